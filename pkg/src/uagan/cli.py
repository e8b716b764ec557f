"""Command-line entry point: gen-data, train, eval, translate, heatmap, ablate.

Settings are resolved as defaults < ``--config`` file < command-line flags.
The config file is INI with sections ``[phantom]``, ``[train]``, ``[weights]``,
``[unet]`` and ``[run]``; a run's ``manifest.json`` is also accepted, which
re-executes that run.

Exit codes: 0 success, 1 usage/validation error, 2 runtime fault.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .losses import LossWeights, TrainingFault
from .metrics import METRICS, MetricsReport, format_table, read_metrics_csv, write_pgm, to_unit_range
from .networks import PRESETS, ConfigurationError, UNetConfig, get_preset
from .phantom_data import PhantomParams, build_unpaired_dataset, load_dataset, write_slice

log = logging.getLogger("uagan")

EXIT_OK, EXIT_USAGE, EXIT_FAULT = 0, 1, 2
ABLATION_PRESETS = ("uagan", "uagan-atten", "uagan-fuse", "uagan-trans", "joint", "individual")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def runs_root() -> Path:
    return Path(os.environ.get("UAGAN_RUNS_DIR", "runs"))


@dataclass
class RunConfig:
    phantom: PhantomParams = field(default_factory=PhantomParams)
    train: "TrainConfig" = None
    n_modalities: int = 3
    train_patients: int = 30
    test_patients: int = 10
    deterministic: bool = True
    data: Optional[str] = None
    out: Optional[str] = None

    def __post_init__(self):
        if self.train is None:
            from .trainer import TrainConfig
            self.train = TrainConfig()

    def to_dict(self) -> dict:
        return {
            "phantom": self.phantom.to_dict(),
            "train": self.train.to_dict(),
            "n_modalities": self.n_modalities,
            "train_patients": self.train_patients,
            "test_patients": self.test_patients,
            "deterministic": self.deterministic,
            "data": self.data,
            "out": self.out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        from .trainer import TrainConfig
        return cls(
            phantom=PhantomParams.from_dict(d.get("phantom", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            **{k: d[k] for k in ("n_modalities", "train_patients", "test_patients", "deterministic", "data", "out")
               if k in d},
        )


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(json.loads(value))
    return value


def _apply_section(obj, section: Dict[str, str], name: str):
    valid = {f.name: getattr(obj, f.name) for f in fields(obj)}
    updates = {}
    for k, v in section.items():
        if k not in valid:
            raise UsageError(f"unknown key {k!r} in [{name}]; valid: {', '.join(sorted(valid))}")
        updates[k] = _coerce(v, valid[k])
    return replace(obj, **updates)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    if path.suffix == ".json":
        with open(path) as f:
            d = json.load(f)
        return RunConfig.from_dict(d.get("run_config", d))
    cp = configparser.ConfigParser()
    cp.read(path)
    rc = RunConfig()
    tc = rc.train
    for sec in cp.sections():
        items = dict(cp.items(sec))
        if sec == "phantom":
            rc.phantom = _apply_section(rc.phantom, items, sec)
        elif sec == "weights":
            tc = replace(tc, weights=_apply_section(tc.weights, items, sec))
        elif sec == "unet":
            tc = replace(tc, unet=_apply_section(tc.unet, items, sec))
        elif sec == "train":
            tc = _apply_section(tc, items, sec)
        elif sec == "run":
            for k, v in items.items():
                if k not in ("n_modalities", "train_patients", "test_patients", "deterministic", "data", "out"):
                    raise UsageError(f"unknown key {k!r} in [run]")
                setattr(rc, k, _coerce(v, getattr(rc, k)) if getattr(rc, k) is not None else v)
        else:
            raise UsageError(f"unknown config section [{sec}]")
    rc.train = tc
    return rc


def resolve_config(args) -> RunConfig:
    rc = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    tc = rc.train
    if getattr(args, "seed", None) is not None:
        tc = replace(tc, seed=args.seed)
    if getattr(args, "deterministic", False):
        rc.deterministic = True
        tc = replace(tc, deterministic=True)
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("variant", "variant"),
                      ("checkpoint_every", "checkpoint_every")):
        v = getattr(args, flag, None)
        if v is not None:
            tc = replace(tc, **{key: v})
    if getattr(args, "no_augment", False):
        tc = replace(tc, augment=False)
    unet = tc.unet
    if getattr(args, "base_channels", None) is not None:
        unet = replace(unet, base_channels=args.base_channels)
    if getattr(args, "modalities", None) is not None:
        rc.n_modalities = args.modalities
    unet = replace(unet, n_modalities=rc.n_modalities)
    tc = replace(tc, unet=unet)
    ph = rc.phantom
    if getattr(args, "image_size", None) is not None:
        ph = replace(ph, image_size=args.image_size)
    if getattr(args, "slices", None) is not None:
        ph = replace(ph, slices_per_patient=args.slices)
    rc.phantom = ph
    if getattr(args, "patients", None) is not None:
        rc.train_patients = args.patients
    if getattr(args, "test_patients", None) is not None:
        rc.test_patients = args.test_patients
    if getattr(args, "data", None):
        rc.data = args.data
    if getattr(args, "out", None):
        rc.out = args.out
    rc.train = tc
    return rc


def split_dir(data, split: str) -> Path:
    """Accept a split directory or a dataset root holding ``train/`` and ``test/``."""
    if data is None:
        raise UsageError("--data is required")
    d = Path(data)
    if (d / split / "manifest.json").is_file():
        return d / split
    if (d / "manifest.json").is_file():
        return d
    raise UsageError(f"no {split} dataset found at {d}")


# --- commands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    rc = resolve_config(args)
    if rc.train_patients < 1 or rc.test_patients < 1:
        raise UsageError("--patients and --test-patients must be >= 1")
    if rc.n_modalities < 1:
        raise UsageError("--modalities must be >= 1")
    if rc.out is None:
        raise UsageError("--out is required")
    try:
        rc.phantom.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    seed = rc.train.seed
    out = Path(rc.out)
    for split, n in (("train", rc.train_patients), ("test", rc.test_patients)):
        m = build_unpaired_dataset(rc.phantom, n, rc.n_modalities, seed, out / split, split=split)
        counts = m.modality_counts()
        n_slices = sum(len(p.slices) for p in m.patients)
        print(f"{split}: {len(m.patients)} patients "
              f"({', '.join(f'{k}={v}' for k, v in counts.items())}), {n_slices} slices")
    with open(out / "dataset.json", "w") as f:
        # location-free so the same settings give byte-identical output anywhere
        settings = {k: v for k, v in rc.to_dict().items() if k not in ("out", "data")}
        json.dump({"code_version": __version__, "seed": seed, "run_config": settings},
                  f, indent=2, sort_keys=True)
        f.write("\n")
    return EXIT_OK


def _run_dir(rc: RunConfig, name: Optional[str]) -> Path:
    if rc.out:
        return Path(rc.out)
    return runs_root() / (name or f"{rc.train.variant}_s{rc.train.seed}")


def cmd_train(args) -> int:
    from .trainer import train
    rc = resolve_config(args)
    data = split_dir(rc.data, "train")
    run_dir = _run_dir(rc, args.name)
    if args.resume and not Path(args.resume).is_file():
        raise UsageError(f"checkpoint not found: {args.resume}")
    manifest = train(rc.train, data, run_dir, resume=args.resume,
                     extra_manifest={"run_config": rc.to_dict(), "argv": list(args.argv)})
    print(f"run {run_dir}: {len(manifest['checkpoints'])} checkpoint(s)")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    data = split_dir(args.data, "test")
    if not args.oracle:
        if not args.checkpoint or not Path(args.checkpoint).exists():
            raise UsageError(f"checkpoint not found: {args.checkpoint}")
    report = evaluate(args.checkpoint, data, oracle=args.oracle)
    if args.out:
        out = Path(args.out)
    elif args.checkpoint and Path(args.checkpoint).is_dir():
        out = Path(args.checkpoint) / "reports"
    else:
        out = runs_root() / "reports"
    paths = report.write(out)
    print(open(paths["summary"]).read(), end="")
    return EXIT_OK


def _pick_samples(samples, patient: Optional[str], n: int):
    if patient:
        chosen = [s for s in samples if s.patient_id == patient]
        if not chosen:
            raise UsageError(f"no slices for patient {patient!r}")
    else:
        # the slice of each patient with most tumor, in manifest order
        best = {}
        for s in samples:
            if s.patient_id not in best or s.mask.sum() > best[s.patient_id].mask.sum():
                best[s.patient_id] = s
        chosen = list(best.values())
    return chosen[:n]


def cmd_translate(args) -> int:
    from .evaluation import LoadedModel, checkpoint_paths, translate_sample
    from .trainer import load_checkpoint
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model = LoadedModel(load_checkpoint(checkpoint_paths(args.checkpoint)[0]))
    if not model.variant.has_trans_stream:
        raise UsageError(f"variant {model.variant.name!r} has no translation stream")
    manifest, samples = load_dataset(split_dir(args.data, "test"))
    if args.target in model.modalities:
        target = model.modalities.index(args.target)
    else:
        try:
            target = int(args.target)
        except ValueError:
            raise UsageError(f"unknown target modality {args.target!r}; have {model.modalities}") from None
        if not 0 <= target < model.M:
            raise UsageError(f"target index {target} out of range")
    out = Path(args.out or runs_root() / "translate")
    out.mkdir(parents=True, exist_ok=True)
    for s in _pick_samples(samples, args.patient, args.n):
        fake, rec = translate_sample(model, s, target)
        stem = f"{s.patient_id}_s{s.slice_index:03d}_to{model.modalities[target]}"
        lo, hi = min(s.image.min(), fake.min(), rec.min()), max(s.image.max(), fake.max(), rec.max())
        for tag, arr in (("source", s.image), ("translated", fake), ("recovered", rec)):
            scaled = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
            write_pgm(out / f"{stem}_{tag}.pgm", scaled)
            write_slice(out / f"{stem}_{tag}.uag", arr.astype(np.float32), s.mask)
        print(f"{stem}: mean|x'-x| {np.abs(fake - s.image).mean():.4f}  mean|rec-x| {np.abs(rec - s.image).mean():.4f}")
    return EXIT_OK


def cmd_heatmap(args) -> int:
    from .evaluation import LoadedModel, checkpoint_paths, feature_heatmaps
    from .trainer import load_checkpoint
    if not Path(args.checkpoint).exists():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model = LoadedModel(load_checkpoint(checkpoint_paths(args.checkpoint)[0]))
    _, samples = load_dataset(split_dir(args.data, "test"))
    out = Path(args.out or runs_root() / "heatmaps")
    out.mkdir(parents=True, exist_ok=True)
    for s in _pick_samples(samples, args.patient, args.n):
        stem = f"{s.patient_id}_s{s.slice_index:03d}"
        write_pgm(out / f"{stem}_image.pgm", to_unit_range(s.image))
        write_pgm(out / f"{stem}_mask.pgm", s.mask.astype(float))
        for name, hm in feature_heatmaps(model, s).items():
            write_pgm(out / f"{stem}_{name}.pgm", hm)
        print(f"{stem}: heatmaps written to {out}")
    return EXIT_OK


def aggregate_runs(run_rows: Dict[str, Dict[int, List[dict]]]) -> List[dict]:
    """Variant x modality rows: patient-pooled mean/std and across-seed std of
    per-seed means, for each metric."""
    out = []
    modalities = sorted({r["modality"] for runs in run_rows.values() for rows in runs.values() for r in rows})
    for mod in modalities + ["overall"]:
        for variant, runs in run_rows.items():
            pooled = []
            seed_means = {m: [] for m in METRICS}
            for seed, rows in sorted(runs.items()):
                sel = [r for r in rows if mod == "overall" or r["modality"] == mod]
                pooled += sel
                for m in METRICS:
                    vals = [r[m] for r in sel if not math.isnan(r[m])]
                    if vals:
                        seed_means[m].append(float(np.mean(vals)))
            if not pooled:
                continue
            row = {"modality": mod, "method": variant, "n_runs": len(runs), "n_patients": len(pooled)}
            for m in METRICS:
                vals = np.array([r[m] for r in pooled if not math.isnan(r[m])])
                row[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
                row[f"{m}_std"] = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                sm = np.array(seed_means[m])
                row[f"{m}_seed_std"] = float(sm.std(ddof=1)) if sm.size > 1 else 0.0
                row[f"{m}_excluded"] = len(pooled) - int(vals.size)
            out.append(row)
    return out


def cmd_ablate(args) -> int:
    from .evaluation import evaluate
    from .trainer import train
    rc = resolve_config(args)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    variants = args.variants.split(",") if args.variants else list(ABLATION_PRESETS)
    for v in variants:
        get_preset(v)
    train_dir, test_dir = split_dir(rc.data, "train"), split_dir(rc.data, "test")
    sweep = Path(rc.out) if rc.out else runs_root() / (args.name or "ablate")
    sweep.mkdir(parents=True, exist_ok=True)
    seeds = [rc.train.seed + k for k in range(args.seeds)]
    run_rows: Dict[str, Dict[int, List[dict]]] = {}
    failed = []
    for v in variants:
        run_rows[v] = {}
        for seed in seeds:
            run_dir = sweep / f"{v}_s{seed}"
            metrics_csv = run_dir / "reports" / "metrics.csv"
            if not metrics_csv.is_file():
                try:
                    cfg = replace(rc.train, variant=v, seed=seed)
                    rcv = replace(rc, train=cfg)
                    train(cfg, train_dir, run_dir, extra_manifest={"run_config": rcv.to_dict()})
                    evaluate(run_dir, test_dir).write(run_dir / "reports")
                except Exception as e:  # one variant failing must not sink the sweep
                    log.error("variant %s seed %d failed: %s", v, seed, e)
                    failed.append(f"{v}_s{seed}")
                    continue
            else:
                log.info("skipping completed run %s", run_dir.name)
            run_rows[v][seed] = read_metrics_csv(metrics_csv)
    rows = aggregate_runs({v: r for v, r in run_rows.items() if r})
    cols = ["modality", "method", "n_runs", "n_patients"]
    for m in METRICS:
        cols += [f"{m}_mean", f"{m}_std", f"{m}_seed_std", f"{m}_excluded"]
    with open(sweep / "ablation.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    table = {}
    for r in rows:
        table.setdefault(r["method"], {})[r["modality"]] = {
            m: {"mean": r[f"{m}_mean"], "std": r[f"{m}_std"]} for m in METRICS}
    text = format_table(table)
    (sweep / "ablation_summary.txt").write_text(text)
    print(text, end="")
    if failed:
        print(f"failed runs: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAULT
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file or a run manifest.json")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("--out")
    common.add_argument("--data")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="uagan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"uagan {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", parents=[common], help="write a synthetic unpaired phantom dataset")
    g.add_argument("--patients", type=int, help="training patients (default 30)")
    g.add_argument("--test-patients", type=int, help="test patients (default 10)")
    g.add_argument("--modalities", type=int)
    g.add_argument("--image-size", type=int)
    g.add_argument("--slices", type=int, help="slices per patient")
    g.set_defaults(func=cmd_gen_data)

    def train_flags(sp):
        sp.add_argument("--variant", type=str.lower, choices=list(PRESETS),
                        metavar="VARIANT", help=f"one of: {', '.join(PRESETS)}")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--base-channels", type=int)
        sp.add_argument("--modalities", type=int)
        sp.add_argument("--checkpoint-every", type=int)
        sp.add_argument("--no-augment", action="store_true")

    t = sub.add_parser("train", parents=[common], help="train one variant")
    train_flags(t)
    t.add_argument("--name", help="run name under $UAGAN_RUNS_DIR when --out is not given")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or run on the test split")
    e.add_argument("--checkpoint", help="checkpoint file or run directory")
    e.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("translate", cmd_translate, "write source/translated/recovered triplets"),
                                 ("heatmap", cmd_heatmap, "export feature heatmaps")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--patient")
        sp.add_argument("-n", type=int, default=3, help="number of slices")
        if name == "translate":
            sp.add_argument("--target", required=True, help="target modality name or index")
        sp.set_defaults(func=func)

    a = sub.add_parser("ablate", parents=[common], help="train and evaluate the preset sweep")
    train_flags(a)
    a.add_argument("--seeds", type=int, default=3)
    a.add_argument("--variants", help="comma-separated subset of presets")
    a.add_argument("--name")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, FileNotFoundError) as e:
        print(f"uagan {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingFault, OSError, RuntimeError, ValueError) as e:
        print(f"uagan {args.command}: fault: {e}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())

"""Two-phase adversarial training loop, checkpoints and baseline runs."""
from __future__ import annotations

import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .losses import (LossReport, LossWeights, TrainingFault, critic_losses, cycle_loss,
                     generator_adversarial_losses, lr_schedule, seg_cross_entropy,
                     shape_consistency_loss, total_generator_loss)
from .networks import (ConfigurationError, UNetConfig, VariantSpec, build_models, describe,
                       get_preset)
from .phantom_data import AugmentConfig, SliceSample, augment, load_dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "uagan"
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-4
    lr_end: float = 1e-6
    beta1: float = 0.5
    beta2: float = 0.999
    # lr is held and lambda_shape ramps over the first hold_fraction of epochs
    hold_fraction: float = 0.6
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0  # epochs; 0 saves only the final checkpoint
    deterministic: bool = True
    weights: LossWeights = field(default_factory=LossWeights)
    unet: UNetConfig = field(default_factory=UNetConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigurationError("batch_size and epochs must be >= 1")
        if not 0 <= self.hold_fraction <= 1:
            raise ConfigurationError("hold_fraction must lie in [0, 1]")
        get_preset(self.variant)

    @property
    def hold_epochs(self) -> int:
        return int(round(self.hold_fraction * self.epochs))

    def lr_at(self, epoch: int) -> float:
        return lr_schedule(epoch, self.lr, self.lr_end, self.hold_epochs, self.epochs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if isinstance(d.get("unet"), dict):
            d["unet"] = UNetConfig(**d["unet"])
        return cls(**d)


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)


def _step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed) & (2 ** 63 - 1), step, stream])


class SliceLoader:
    """Seeded per-epoch shuffling and on-the-fly augmentation.

    Order and augmentation depend only on ``(seed, epoch)``, so a resumed run
    sees the same batches as an uninterrupted one.
    """

    def __init__(self, samples: Sequence[SliceSample], batch_size: int, seed: int,
                 do_augment: bool = True, aug_cfg: AugmentConfig = AugmentConfig()):
        if not samples:
            raise ConfigurationError("no training slices")
        self.samples = list(samples)
        self.batch_size = batch_size
        self.seed = seed
        self.do_augment = do_augment
        self.aug_cfg = aug_cfg

    def __len__(self) -> int:
        return -(-len(self.samples) // self.batch_size)

    def epoch(self, epoch: int) -> Iterator[Dict[str, torch.Tensor]]:
        order = np.random.default_rng([self.seed, epoch, 0]).permutation(len(self.samples))
        aug_rng = np.random.default_rng([self.seed, epoch, 2])
        for start in range(0, len(order), self.batch_size):
            chunk = [self.samples[i] for i in order[start:start + self.batch_size]]
            if self.do_augment:
                chunk = [augment(s, aug_rng, self.aug_cfg) for s in chunk]
            yield collate(chunk)


def collate(samples: Sequence[SliceSample]) -> Dict[str, torch.Tensor]:
    return {
        "x": torch.from_numpy(np.stack([s.image for s in samples])[:, None].astype(np.float32)),
        "mask": torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64)),
        "c": torch.tensor([s.modality.index for s in samples], dtype=torch.long),
    }


def forward_phase(G, D, x, c, mask, c_prime, n_modalities: int):
    """Translate ``x`` to ``c_prime`` and segment ``x``.

    Returns ``(fake, seg_logits, terms)`` with g_adv, g_cls and l_seg.
    """
    target = F.one_hot(c_prime, n_modalities).float()
    fake, seg_logits = G(x, target, x)
    terms = generator_adversarial_losses(D, fake, c_prime)
    terms["l_seg"] = seg_cross_entropy(seg_logits, mask)
    return fake, seg_logits, terms


def backward_phase(G, fake, x, c, mask, n_modalities: int):
    """Recover ``x`` from the fake under the source label and segment the fake.

    Returns g_rec and l_shape; the fake stays attached so the shape loss
    reaches the translation stream.
    """
    source = F.one_hot(c, n_modalities).float()
    recovered, seg_of_fake = G(fake, source, fake)
    return {"g_rec": cycle_loss(recovered, x), "l_shape": shape_consistency_loss(seg_of_fake, mask)}


class Trainer:
    """Owns models, optimizers and counters for one network (or one
    per-modality network of the Individual baseline)."""

    def __init__(self, config: TrainConfig, modalities: Sequence[str], image_size: int,
                 model_modality: Optional[str] = None):
        self.config = config
        self.variant: VariantSpec = get_preset(config.variant)
        self.modalities = list(modalities)
        self.image_size = image_size
        self.model_modality = model_modality
        if config.unet.n_modalities != len(self.modalities):
            raise ConfigurationError(
                f"UNet configured for {config.unet.n_modalities} modalities, dataset has {len(self.modalities)}"
            )
        if image_size % 2 ** config.unet.levels:
            raise ConfigurationError(f"image size {image_size} not divisible by 2^{config.unet.levels}")
        set_deterministic(config.deterministic)
        self.G, self.D = build_models(config.unet, self.variant, seed=config.seed)
        betas = (config.beta1, config.beta2)
        self.opt_G = torch.optim.Adam(self.G.parameters(), config.lr, betas=betas)
        self.opt_D = torch.optim.Adam(self.D.parameters(), config.lr, betas=betas) if self.D is not None else None
        self.epoch = 0
        self.global_step = 0
        self.d_steps = 0
        self.g_steps = 0

    @property
    def M(self) -> int:
        return len(self.modalities)

    def set_lr(self, epoch: int) -> float:
        lr = self.config.lr_at(epoch)
        for opt in (self.opt_G, self.opt_D):
            if opt is not None:
                for group in opt.param_groups:
                    group["lr"] = lr
        return lr

    def train_step(self, batch: Dict[str, torch.Tensor], epoch: Optional[int] = None) -> LossReport:
        epoch = self.epoch if epoch is None else epoch
        cfg, w = self.config, self.config.weights
        lr = self.set_lr(epoch)
        ramp = cfg.hold_epochs
        x, mask, c = batch["x"], batch["mask"], batch["c"]
        B = x.shape[0]
        rng = _step_rng(cfg.seed, self.global_step, 1)
        report = LossReport(epoch=epoch, step=self.global_step, lr=lr)
        self.G.train()

        if self.variant.adversarial:
            d_acc = {"d_adv": 0.0, "d_cls": 0.0, "d_gp": 0.0, "total_D": 0.0}
            self.D.requires_grad_(True)
            for _ in range(w.n_critic):
                c_prime = torch.from_numpy(rng.integers(0, self.M, size=B))
                alpha = torch.from_numpy(rng.random(B).astype(np.float32)).view(B, 1, 1, 1)
                with torch.no_grad():
                    fake = self.G.translate(x, F.one_hot(c_prime, self.M).float())
                d_terms = critic_losses(self.D, x, fake, c, w, alpha)
                self.opt_D.zero_grad(set_to_none=True)
                d_terms["total_D"].backward()
                self.opt_D.step()
                self.d_steps += 1
                for k in d_acc:
                    d_acc[k] += d_terms[k].item() / w.n_critic
            for k, v in d_acc.items():
                setattr(report, k, v)

            self.D.requires_grad_(False)
            c_prime = torch.from_numpy(rng.integers(0, self.M, size=B))
            fake, _, terms = forward_phase(self.G, self.D, x, c, mask, c_prime, self.M)
            terms.update(backward_phase(self.G, fake, x, c, mask, self.M))
            self.D.requires_grad_(True)
        elif self.variant.aux_task == "reconstruction":
            # translation stream reconstructs its own input; no critic, no backward phase
            source = F.one_hot(c, self.M).float()
            recon, seg_logits = self.G(x, source, x)
            terms = {"g_rec": cycle_loss(recon, x), "l_seg": seg_cross_entropy(seg_logits, mask)}
        else:
            _, seg_logits = self.G(None, None, x)
            terms = {"l_seg": seg_cross_entropy(seg_logits, mask)}

        total, lam_shape = total_generator_loss(terms, epoch, w, ramp)
        self.opt_G.zero_grad(set_to_none=True)
        total.backward()
        self.opt_G.step()
        self.g_steps += 1
        self.global_step += 1

        for k, v in terms.items():
            setattr(report, k, v.item())
        report.lambda_shape = lam_shape
        report.total_G = total.item()
        report.check(w)
        return report

    # --- checkpointing -------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "code_version": __version__,
            "variant": self.variant.to_dict(),
            "unet": self.config.unet.to_dict(),
            "train_config": self.config.to_dict(),
            "modalities": self.modalities,
            "model_modality": self.model_modality,
            "image_size": self.image_size,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "d_steps": self.d_steps,
            "g_steps": self.g_steps,
            "G": self.G.state_dict(),
            "D": self.D.state_dict() if self.D is not None else None,
            "opt_G": self.opt_G.state_dict(),
            "opt_D": self.opt_D.state_dict() if self.opt_D is not None else None,
            # all training randomness is derived from (seed, global_step/epoch)
            "rng_state": {"seed": self.config.seed, "global_step": self.global_step,
                          "torch": torch.get_rng_state()},
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        os.close(fd)
        try:
            torch.save(self.state_dict(), tmp)
            os.replace(tmp, path)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)
        return path

    @classmethod
    def from_state(cls, state: dict) -> "Trainer":
        config = TrainConfig.from_dict(state["train_config"])
        t = cls(config, state["modalities"], state["image_size"], state.get("model_modality"))
        t.G.load_state_dict(state["G"])
        t.opt_G.load_state_dict(state["opt_G"])
        if t.D is not None:
            t.D.load_state_dict(state["D"])
            t.opt_D.load_state_dict(state["opt_D"])
        t.epoch = state["epoch"]
        t.global_step = state["global_step"]
        t.d_steps = state["d_steps"]
        t.g_steps = state["g_steps"]
        torch.set_rng_state(state["rng_state"]["torch"])
        return t

    @classmethod
    def load(cls, path) -> "Trainer":
        return cls.from_state(load_checkpoint(path))


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _fit(trainer: Trainer, loader: SliceLoader, run_dir: Path, tag: str, log_file) -> Path:
    cfg = trainer.config
    ckpt_dir = run_dir / "checkpoints"
    while trainer.epoch < cfg.epochs:
        epoch = trainer.epoch
        t0 = time.time()
        sums: Dict[str, float] = {}
        n = 0
        for batch in loader.epoch(epoch):
            report = trainer.train_step(batch, epoch)
            row = report.to_dict()
            if tag:
                row["model"] = tag
            log_file.write(json.dumps(row, sort_keys=True) + "\n")
            for k in ("l_seg", "g_rec", "l_shape", "total_G"):
                sums[k] = sums.get(k, 0.0) + row[k]
            n += 1
        log_file.flush()
        trainer.epoch += 1
        log.info("%s epoch %d/%d  l_seg %.4f  g_rec %.4f  (%.1fs)", tag or cfg.variant, epoch + 1,
                 cfg.epochs, sums["l_seg"] / n, sums["g_rec"] / n, time.time() - t0)
        if cfg.checkpoint_every and trainer.epoch % cfg.checkpoint_every == 0 and trainer.epoch < cfg.epochs:
            trainer.save(ckpt_dir / f"epoch{trainer.epoch:03d}{'_' + tag if tag else ''}.pt")
    return trainer.save(ckpt_dir / f"final{'_' + tag if tag else ''}.pt")


def train(config: TrainConfig, data_dir, run_dir, resume=None, extra_manifest: Optional[dict] = None) -> dict:
    """Train ``config.variant`` on a dataset split; writes checkpoints, the
    step-level loss log and a run manifest under ``run_dir``.

    The Individual baseline trains one network per modality on that
    modality's patients only and writes one final checkpoint per modality.
    """
    run_dir = Path(run_dir)
    data_dir = Path(data_dir)
    if not (data_dir / "manifest.json").is_file():
        raise FileNotFoundError(f"no dataset manifest in {data_dir}")
    manifest, samples = load_dataset(data_dir)
    if not samples:
        raise ConfigurationError(f"dataset {data_dir} has no slices")
    image_size = samples[0].image.shape[-1]
    variant = get_preset(config.variant)
    (run_dir / "logs").mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)

    if variant.per_modality:
        groups = [(m, [s for s in samples if manifest.modalities[s.modality.index] == m])
                  for m in manifest.modalities]
        groups = [(m, g) for m, g in groups if g]
    else:
        groups = [(None, samples)]

    run_manifest = {
        "code_version": __version__,
        "train_config": config.to_dict(),
        "variant": {**variant.to_dict(),
                    "backward_phase": variant.backward_phase,
                    "aux_target": {"translation": "cycle: G(G(x, c'), c) -> x",
                                   "reconstruction": "reconstruction: G(x, c) -> x",
                                   "none": None}[variant.aux_task],
                    "discriminator": variant.adversarial},
        "data_dir": str(data_dir),
        "modalities": manifest.modalities,
        "image_size": image_size,
        "n_train_slices": len(samples),
        "models": [m for m, _ in groups] if variant.per_modality else ["joint" if variant.aux_task == "none" else variant.name],
    }
    if extra_manifest:
        run_manifest.update(extra_manifest)

    checkpoints = []
    log_path = run_dir / "logs" / "loss_log.jsonl"
    resumed = Trainer.load(resume) if resume else None
    if resumed is not None:
        _truncate_log(log_path, resumed.model_modality or "", resumed.global_step)
    with open(log_path, "a" if resumed is not None else "w") as log_file:
        for tag, group in groups:
            final = run_dir / "checkpoints" / f"final{'_' + tag if tag else ''}.pt"
            if resumed is not None and resumed.model_modality == tag:
                trainer = resumed
            elif resumed is not None and final.is_file():
                # another per-modality model that already finished
                checkpoints.append(str(final))
                continue
            else:
                trainer = Trainer(config, manifest.modalities, image_size, model_modality=tag)
            if "parameters" not in run_manifest:
                run_manifest["parameters"] = describe(trainer.G, trainer.D)
                _write_json(run_dir / "manifest.json", run_manifest)
            loader = SliceLoader(group, config.batch_size, config.seed, config.augment)
            checkpoints.append(str(_fit(trainer, loader, run_dir, tag or "", log_file)))
    run_manifest["checkpoints"] = [os.path.relpath(c, run_dir) for c in checkpoints]
    _write_json(run_dir / "manifest.json", run_manifest)
    return run_manifest


def _truncate_log(path: Path, tag: str, global_step: int) -> None:
    """Drop rows the resumed model logged after its checkpoint was written."""
    if not path.is_file():
        return
    keep = [r for r in read_loss_log(path) if r.get("model", "") != tag or r["step"] < global_step]
    with open(path, "w") as f:
        for r in keep:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_loss_log(path) -> List[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def epoch_means(rows: Sequence[dict], key: str, model: Optional[str] = None) -> Dict[int, float]:
    acc: Dict[int, List[float]] = {}
    for r in rows:
        if model is not None and r.get("model") != model:
            continue
        acc.setdefault(r["epoch"], []).append(r[key])
    return {e: float(np.mean(v)) for e, v in sorted(acc.items())}

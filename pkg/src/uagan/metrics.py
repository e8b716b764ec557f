"""Volume assembly, overlap metrics, ASSD, evaluation reports and feature heatmaps."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .phantom_data import SliceSample

METRICS = ("dice", "precision", "sensitivity", "specificity", "assd")
TABLE_HEADERS = {"dice": "Dice(%)", "precision": "Precision(%)", "sensitivity": "Sens(%)",
                 "specificity": "Spec(%)", "assd": "ASSD(mm)"}


class AssemblyError(ValueError):
    pass


@dataclass
class VolumePrediction:
    patient_id: str
    pred_mask: np.ndarray
    gt_mask: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Optional[str] = None


def assemble_volume(slices: Sequence[Tuple[SliceSample, np.ndarray]],
                    spacing=(1.0, 1.0, 1.0), modality: Optional[str] = None) -> VolumePrediction:
    """Stack per-slice predictions and ground truth in ``slice_index`` order.

    ``spacing`` is given per array axis, i.e. (slice, row, column).
    """
    if not slices:
        raise AssemblyError("no slices to assemble")
    pids = {s.patient_id for s, _ in slices}
    if len(pids) != 1:
        raise AssemblyError(f"slices from several patients: {sorted(pids)}")
    ordered = sorted(slices, key=lambda t: t[0].slice_index)
    idx = [s.slice_index for s, _ in ordered]
    expected = list(range(idx[0], idx[0] + len(idx)))
    if idx != expected:
        missing = sorted(set(expected) - set(idx)) or sorted(set(i for i in idx if idx.count(i) > 1))
        raise AssemblyError(f"patient {ordered[0][0].patient_id}: slice indices not contiguous, gap/dup at {missing}")
    pred = np.stack([np.asarray(p, dtype=np.uint8) for _, p in ordered])
    gt = np.stack([s.mask.astype(np.uint8) for s, _ in ordered])
    return VolumePrediction(ordered[0][0].patient_id, pred, gt, tuple(spacing), modality)


def _check_pair(pred, gt) -> Tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred.astype(bool), gt.astype(bool)


def confusion_counts(pred, gt) -> Tuple[int, int, int, int]:
    p, g = _check_pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return tp, fp, fn, tn


# Zero-denominator conventions: both masks empty counts as perfect agreement;
# otherwise an undefined ratio is 0.

def dice(counts) -> float:
    tp, fp, fn, _ = counts
    den = 2 * tp + fp + fn
    return 1.0 if den == 0 else 2 * tp / den


def precision(counts) -> float:
    tp, fp, fn, _ = counts
    if tp + fp == 0:
        return 1.0 if fn == 0 else 0.0
    return tp / (tp + fp)


def sensitivity(counts) -> float:
    tp, fp, fn, _ = counts
    if tp + fn == 0:
        return 1.0 if fp == 0 else 0.0
    return tp / (tp + fn)


def specificity(counts) -> float:
    _, fp, _, tn = counts
    return 1.0 if tn + fp == 0 else tn / (tn + fp)


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background voxel or the volume border."""
    mask = np.asarray(mask, dtype=bool)
    struct = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, struct, border_value=0)


class UndefinedMetric(ValueError):
    pass


def _as_spacing(spacing, ndim: int) -> np.ndarray:
    s = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (ndim,))
    return s


def assd_bruteforce(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """All-pairs surface distance reference; O(|S_A|·|S_B|)."""
    p, g = _check_pair(pred, gt)
    if not p.any() or not g.any():
        raise UndefinedMetric("ASSD undefined for an empty mask")
    sp = _as_spacing(spacing, p.ndim)
    a = np.argwhere(surface(p)) * sp
    b = np.argwhere(surface(g)) * sp
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return float((d.min(axis=1).sum() + d.min(axis=0).sum()) / (len(a) + len(b)))


def assd(pred, gt, spacing=(1.0, 1.0, 1.0)) -> float:
    """Average symmetric surface distance via Euclidean distance transforms."""
    p, g = _check_pair(pred, gt)
    if not p.any() or not g.any():
        raise UndefinedMetric("ASSD undefined for an empty mask")
    sp = _as_spacing(spacing, p.ndim)
    sa, sb = surface(p), surface(g)
    dist_to_b = ndimage.distance_transform_edt(~sb, sampling=sp)
    dist_to_a = ndimage.distance_transform_edt(~sa, sampling=sp)
    total = dist_to_b[sa].sum() + dist_to_a[sb].sum()
    return float(total / (np.count_nonzero(sa) + np.count_nonzero(sb)))


def volume_metrics(pred, gt, spacing=(1.0, 1.0, 1.0)) -> Dict[str, float]:
    counts = confusion_counts(pred, gt)
    row = {"dice": dice(counts), "precision": precision(counts),
           "sensitivity": sensitivity(counts), "specificity": specificity(counts)}
    try:
        row["assd"] = assd(pred, gt, spacing)
    except UndefinedMetric:
        row["assd"] = float("nan")
    return row


def export_feature_heatmap(feature) -> np.ndarray:
    """Channel sum of a CxHxW map, min-max scaled to [0, 1] (constant -> zeros)."""
    f = np.asarray(feature, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] < 1:
        raise ValueError(f"expected CxHxW feature map, got shape {f.shape}")
    s = f.sum(axis=0)
    lo, hi = s.min(), s.max()
    if hi - lo <= 0:
        return np.zeros_like(s)
    return (s - lo) / (hi - lo)


def write_pgm(path, image01: np.ndarray) -> None:
    """8-bit binary PGM of an array scaled to [0, 1]."""
    a = np.clip(np.asarray(image01, dtype=np.float64), 0, 1)
    data = np.round(a * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(data.tobytes())


def to_unit_range(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    lo, hi = a.min(), a.max()
    return np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)


# --- reports ---------------------------------------------------------------

def _mean_std(values: Sequence[float]) -> Tuple[float, float, int]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan"), 0
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return float(v.mean()), std, int(v.size)


@dataclass
class MetricsReport:
    variant: str
    seed: Optional[int]
    rows: List[dict] = field(default_factory=list)  # patient_id, modality, + METRICS

    def aggregate(self) -> Dict[str, Dict[str, dict]]:
        """Per-modality and overall mean/std across patients.

        ASSD rows that are undefined (empty mask) are excluded and counted.
        """
        groups: Dict[str, List[dict]] = {}
        for r in self.rows:
            groups.setdefault(r["modality"], []).append(r)
        groups = {k: groups[k] for k in sorted(groups)}
        groups["overall"] = list(self.rows)
        out = {}
        for name, rows in groups.items():
            out[name] = {}
            for m in METRICS:
                mean, std, n = _mean_std([r[m] for r in rows])
                out[name][m] = {"mean": mean, "std": std, "n": n, "excluded": len(rows) - n}
        return out

    def write(self, out_dir) -> Dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"metrics": out / "metrics.csv", "dice": out / "dice_per_patient.csv",
                 "summary": out / "summary.txt", "summary_json": out / "summary.json"}
        with open(paths["metrics"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "seed", "patient_id", "modality", *METRICS])
            for r in self.rows:
                w.writerow([self.variant, self.seed, r["patient_id"], r["modality"], *[repr(r[m]) for m in METRICS]])
        with open(paths["dice"], "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["variant", "patient_id", "modality", "dice"])
            for r in self.rows:
                w.writerow([self.variant, r["patient_id"], r["modality"], repr(r["dice"])])
        agg = self.aggregate()
        # aggregates must be recomputable from what was just written
        reread = read_metrics_csv(paths["metrics"])
        check = MetricsReport(self.variant, self.seed, reread).aggregate()
        for g in agg:
            for m in METRICS:
                a, b = agg[g][m]["mean"], check[g][m]["mean"]
                if not (math.isnan(a) and math.isnan(b)) and abs(a - b) > 1e-9:
                    raise AssertionError(f"aggregate mismatch for {g}/{m}: {a} vs {b}")
        with open(paths["summary_json"], "w") as f:
            json.dump({"variant": self.variant, "seed": self.seed, "aggregate": agg}, f, indent=2, sort_keys=True)
            f.write("\n")
        with open(paths["summary"], "w") as f:
            f.write(format_table({self.variant: agg}))
        return paths


def read_metrics_csv(path) -> List[dict]:
    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            row = {"patient_id": r["patient_id"], "modality": r["modality"]}
            for m in METRICS:
                row[m] = float(r[m])
            for k in ("variant", "seed"):
                if k in r:
                    row[k] = r[k]
            rows.append(row)
    return rows


def _fmt(m: str, stats: dict) -> str:
    mean, std = stats["mean"], stats["std"]
    if math.isnan(mean):
        return "n/a"
    if m != "assd":
        mean, std = 100 * mean, 100 * std
    return f"{mean:.2f}±{std:.2f}"


def format_table(aggregates: Dict[str, Dict[str, Dict[str, dict]]]) -> str:
    """Modality-major text table: one block per modality, one row per variant."""
    variants = list(aggregates)
    modalities = sorted({m for agg in aggregates.values() for m in agg if m != "overall"}) + ["overall"]
    header = ["Modality", "Method", *[TABLE_HEADERS[m] for m in METRICS]]
    lines = [" | ".join(header)]
    for mod in modalities:
        lines.append("-" * len(lines[0]))
        for v in variants:
            agg = aggregates[v].get(mod)
            if agg is None:
                continue
            lines.append(" | ".join([mod, v, *[_fmt(m, agg[m]) for m in METRICS]]))
    return "\n".join(lines) + "\n"


def evaluate_volumes(volumes: Iterable[VolumePrediction], variant: str, seed: Optional[int] = None) -> MetricsReport:
    report = MetricsReport(variant, seed)
    for v in volumes:
        row = {"patient_id": v.patient_id, "modality": v.modality}
        row.update(volume_metrics(v.pred_mask, v.gt_mask, v.spacing))
        report.rows.append(row)
    return report

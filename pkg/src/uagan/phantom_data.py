"""Synthetic unpaired multimodal phantoms, preprocessing, augmentation and the
on-disk slice format.

Each phantom patient is a 3D ellipsoidal "brain" holding a tumor core wrapped
in an edema shell. Geometry depends only on the seed, so rendering the same
seed under different modalities gives identical masks with different
intensities.
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MAGIC = b"UAG1"
MANIFEST_VERSION = "1"
DEFAULT_MODALITY_NAMES = ("A", "B", "C")
MIN_BRAIN_FRACTION = 0.05


class PhantomConfigError(ValueError):
    pass


class DegenerateVolumeError(ValueError):
    pass


class SliceFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityLabel:
    index: int
    M: int = 3

    def __post_init__(self):
        if not 0 <= self.index < self.M:
            raise ValueError(f"modality index {self.index} out of range for M={self.M}")

    def one_hot(self) -> np.ndarray:
        return one_hot_modality(self.index, self.M)


# (brain, tumor core, edema) intensities before noise; A/B/C loosely follow
# T1Gd / FLAIR / T2 appearance
DEFAULT_CONTRAST = (
    (0.55, 0.95, 0.45),
    (0.45, 0.80, 1.00),
    (0.35, 1.00, 0.80),
)


@dataclass(frozen=True)
class PhantomParams:
    image_size: int = 64
    brain_radius_range: Tuple[float, float] = (22.0, 28.0)
    tumor_radius_range: Tuple[float, float] = (4.0, 8.0)
    edema_width_range: Tuple[float, float] = (2.0, 4.0)
    modality_contrast_table: Tuple[Tuple[float, float, float], ...] = DEFAULT_CONTRAST
    noise_sigma: float = 0.05
    slices_per_patient: int = 8

    def validate(self) -> None:
        b_lo, b_hi = self.brain_radius_range
        t_lo, t_hi = self.tumor_radius_range
        e_lo, e_hi = self.edema_width_range
        if not (0 < b_lo <= b_hi and 0 < t_lo <= t_hi and 0 <= e_lo <= e_hi):
            raise PhantomConfigError("radius ranges must be positive and ordered")
        if t_hi + e_hi >= b_lo:
            raise PhantomConfigError(
                f"tumor (max radius {t_hi} + edema {e_hi}) does not fit inside brain (min radius {b_lo})"
            )
        if 2 * b_hi > self.image_size:
            raise PhantomConfigError(f"brain radius {b_hi} does not fit a {self.image_size}px frame")
        if self.noise_sigma < 0:
            raise PhantomConfigError("noise_sigma must be >= 0")
        if self.slices_per_patient < 1:
            raise PhantomConfigError("slices_per_patient must be >= 1")
        table = [tuple(t) for t in self.modality_contrast_table]
        if any(len(t) != 3 for t in table):
            raise PhantomConfigError("contrast entries are (brain, tumor, edema) triples")
        if len(set(table)) != len(table):
            raise PhantomConfigError("contrast triples must differ across modalities")

    @property
    def n_modalities(self) -> int:
        return len(self.modality_contrast_table)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomParams":
        d = dict(d)
        for k in ("brain_radius_range", "tumor_radius_range", "edema_width_range"):
            if k in d:
                d[k] = tuple(d[k])
        if "modality_contrast_table" in d:
            d["modality_contrast_table"] = tuple(tuple(t) for t in d["modality_contrast_table"])
        return cls(**d)


@dataclass
class SliceSample:
    image: np.ndarray
    mask: np.ndarray
    modality: ModalityLabel
    patient_id: str
    slice_index: int
    brain: Optional[np.ndarray] = None  # pre-normalization brain support, used for slice filtering

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ in shape")

    @property
    def brain_fraction(self) -> float:
        support = self.brain if self.brain is not None else self.image != 0
        return float(np.count_nonzero(support)) / support.size


def one_hot_modality(index: int, M: int) -> np.ndarray:
    if not 0 <= index < M:
        raise ValueError(f"modality index {index} out of range for M={M}")
    v = np.zeros(M, dtype=np.float32)
    v[index] = 1.0
    return v


def expand_and_concat(image, label):
    """Append one constant plane per label component to ``image``.

    Accepts a single ``1xHxW`` array with a length-M label, or torch batches
    ``Bx1xHxW`` with ``BxM`` labels.
    """
    try:
        import torch
    except ImportError:  # pragma: no cover
        torch = None
    if torch is not None and isinstance(image, torch.Tensor):
        label = torch.as_tensor(label, dtype=image.dtype, device=image.device)
        if image.dim() == 3:
            planes = label.view(-1, 1, 1).expand(-1, *image.shape[-2:])
            return torch.cat([image, planes], dim=0)
        planes = label.view(label.shape[0], -1, 1, 1).expand(-1, -1, *image.shape[-2:])
        return torch.cat([image, planes], dim=1)
    image = np.asarray(image)
    label = np.asarray(label, dtype=image.dtype)
    planes = np.broadcast_to(label[:, None, None], (label.shape[0],) + image.shape[-2:])
    return np.concatenate([image, planes], axis=0)


def _patient_geometry(params: PhantomParams, rng: np.random.Generator) -> Dict[str, np.ndarray]:
    """Label volume: 0 background, 1 brain, 2 edema, 3 tumor core."""
    n, size = params.slices_per_patient, params.image_size
    c = (size - 1) / 2.0
    ry, rx = rng.uniform(*params.brain_radius_range, size=2)
    # z extent chosen so the brain spans roughly the slice stack
    rz = max(n / 2.0 + rng.uniform(0.0, 2.0), 1.0)
    cy, cx = c + rng.uniform(-2, 2, size=2)
    cz = (n - 1) / 2.0

    r_t = rng.uniform(*params.tumor_radius_range)
    w_e = rng.uniform(*params.edema_width_range)
    # tumor center kept deep enough that tumor+edema stays inside the brain in-plane
    margin = min(rx, ry) - r_t - w_e
    ang = rng.uniform(0, 2 * math.pi)
    rad = rng.uniform(0, max(margin - 1.0, 0.0))
    ty, tx = cy + rad * math.sin(ang), cx + rad * math.cos(ang)
    tz = cz + rng.uniform(-n / 6.0, n / 6.0)
    # slightly anisotropic tumor, z radius in slices
    t_axes = r_t * rng.uniform(0.8, 1.2, size=2)
    t_rz = max(r_t / 4.0, 0.75) * rng.uniform(0.8, 1.2)

    z, y, x = np.meshgrid(np.arange(n), np.arange(size), np.arange(size), indexing="ij")
    brain = ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0
    d_t = np.sqrt(((z - tz) / t_rz) ** 2 + ((y - ty) / t_axes[0]) ** 2 + ((x - tx) / t_axes[1]) ** 2)
    core = (d_t <= 1.0) & brain
    edema = (d_t <= 1.0 + w_e / r_t) & brain & ~core
    labels = np.zeros(brain.shape, dtype=np.uint8)
    labels[brain] = 1
    labels[edema] = 2
    labels[core] = 3
    return {"labels": labels}


def generate_phantom_patient(params: PhantomParams, modality: ModalityLabel, seed: int,
                             patient_id: Optional[str] = None) -> List[SliceSample]:
    """Render one phantom patient under ``modality``.

    Geometry is drawn from ``seed`` alone; noise from ``(seed, modality)``.
    Images are raw intensities (not z-scored).
    """
    params.validate()
    if modality.index >= params.n_modalities:
        raise PhantomConfigError(f"no contrast entry for modality {modality.index}")
    seed = int(seed) & (2 ** 64 - 1)
    geo_rng = np.random.default_rng([seed, 0])
    labels = _patient_geometry(params, geo_rng)["labels"]
    brain_i, tumor_i, edema_i = params.modality_contrast_table[modality.index]
    lut = np.array([0.0, brain_i, edema_i, tumor_i], dtype=np.float64)
    volume = lut[labels]
    if params.noise_sigma > 0:
        noise_rng = np.random.default_rng([seed, 1, modality.index])
        volume = volume + noise_rng.normal(0.0, params.noise_sigma, size=volume.shape) * (labels > 0)
    pid = patient_id if patient_id is not None else f"p{seed}"
    out = []
    for k in range(labels.shape[0]):
        out.append(SliceSample(
            image=volume[k].astype(np.float32),
            mask=(labels[k] >= 2).astype(np.uint8),
            modality=modality,
            patient_id=pid,
            slice_index=k,
            brain=labels[k] > 0,
        ))
    return out


def zscore_normalize(volume, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Zero-mean, unit population-std rescaling of a whole volume.

    Statistics come from all voxels, or from ``mask`` voxels when given.
    """
    v = np.asarray(volume, dtype=np.float64)
    if v.size < 2:
        raise DegenerateVolumeError("volume needs at least 2 elements")
    ref = v[mask.astype(bool)] if mask is not None else v
    mu = ref.mean()
    sd = ref.std()
    if sd < 1e-8:
        raise DegenerateVolumeError(f"volume has (near) zero variance: std={sd:g}")
    return (v - mu) / sd


def crop_and_resize(img: np.ndarray, crop: int, out_size: int, order: int = 1) -> np.ndarray:
    """Center-crop to ``crop``x``crop`` then resample to ``out_size``.

    ``order=1`` is bilinear (images), ``order=0`` nearest (masks).
    """
    h, w = img.shape
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than slice {h}x{w}")
    top, left = (h - crop) // 2, (w - crop) // 2
    patch = img[top:top + crop, left:left + crop]
    if crop == out_size:
        return patch.copy()
    # align-corners style: output corner pixels sample input corner pixels
    coords = np.linspace(0, crop - 1, out_size)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return ndimage.map_coordinates(patch, [yy, xx], order=order, mode="nearest").astype(img.dtype)


def filter_small_brain_slices(samples: Sequence[SliceSample],
                              min_brain_fraction: float = MIN_BRAIN_FRACTION) -> List[SliceSample]:
    if not 0 <= min_brain_fraction <= 1:
        raise ValueError("min_brain_fraction must lie in [0, 1]")
    return [s for s in samples if s.brain_fraction >= min_brain_fraction]


@dataclass(frozen=True)
class AugmentConfig:
    p: float = 0.5
    max_rotation_deg: float = 15.0
    scale_range: Tuple[float, float] = (0.9, 1.1)


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    angle_deg: Optional[float] = None
    scale: Optional[float] = None


def draw_augmentation(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> AugmentParams:
    # fixed draw count per call keeps the stream aligned whatever gets selected
    sel = rng.random(4) < cfg.p
    angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)
    scale = rng.uniform(*cfg.scale_range)
    return AugmentParams(
        hflip=bool(sel[0]), vflip=bool(sel[1]),
        angle_deg=float(angle) if sel[2] else None,
        scale=float(scale) if sel[3] else None,
    )


def _apply_geometry(arr: np.ndarray, p: AugmentParams, order: int, cval: float) -> np.ndarray:
    out = arr
    if p.hflip:
        out = out[:, ::-1]
    if p.vflip:
        out = out[::-1, :]
    if p.angle_deg is not None or p.scale is not None:
        theta = math.radians(p.angle_deg or 0.0)
        s = p.scale or 1.0
        # output -> input mapping: inverse rotation, then inverse scale, about the center
        rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]]) / s
        center = (np.array(out.shape) - 1) / 2.0
        offset = center - rot @ center
        out = ndimage.affine_transform(out, rot, offset=offset, order=order, mode="constant", cval=cval)
    return np.ascontiguousarray(out)


def apply_augmentation(sample: SliceSample, p: AugmentParams) -> SliceSample:
    # background fill uses the image minimum (background after z-scoring)
    image = _apply_geometry(sample.image, p, order=1, cval=float(sample.image.min()))
    mask = _apply_geometry(sample.mask, p, order=0, cval=0)
    brain = _apply_geometry(sample.brain, p, order=0, cval=0) if sample.brain is not None else None
    return replace(sample, image=image.astype(sample.image.dtype),
                   mask=(mask > 0).astype(np.uint8), brain=brain)


def augment(sample: SliceSample, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> SliceSample:
    """Random flips / rotation / scale applied identically to image and mask."""
    return apply_augmentation(sample, draw_augmentation(rng, cfg))


# --- on-disk format -------------------------------------------------------

def write_slice(path, image: np.ndarray, mask: np.ndarray) -> None:
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.ndim != 2 or image.shape != mask.shape:
        raise SliceFormatError(f"expected matching 2D image/mask, got {image.shape} and {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise SliceFormatError("mask values must be 0 or 1")
    h, w = image.shape
    payload = (MAGIC + struct.pack("<II", h, w)
               + image.astype("<f4").tobytes(order="C")
               + mask.astype(np.uint8).tobytes(order="C"))
    try:
        with open(path, "wb") as f:
            f.write(payload)
    except OSError as e:
        raise OSError(f"failed writing slice {path}: {e}") from e


def read_slice(path) -> Tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise OSError(f"failed reading slice {path}: {e}") from e
    if data[:4] != MAGIC:
        raise SliceFormatError(f"{path}: bad magic {data[:4]!r}")
    h, w = struct.unpack("<II", data[4:12])
    n = h * w
    if len(data) != 12 + 5 * n:
        raise SliceFormatError(f"{path}: expected {12 + 5 * n} bytes, got {len(data)}")
    image = np.frombuffer(data, dtype="<f4", count=n, offset=12).reshape(h, w).astype(np.float32)
    mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=12 + 4 * n).reshape(h, w).copy()
    return image, mask


@dataclass
class PatientEntry:
    patient_id: str
    modality: str
    slices: List[str]
    slice_indices: List[int] = field(default_factory=list)


@dataclass
class DatasetManifest:
    version: str
    modalities: List[str]
    patients: List[PatientEntry]
    split: str

    def to_json(self) -> str:
        d = {
            "version": self.version,
            "modalities": list(self.modalities),
            "split": self.split,
            "patients": [asdict(p) for p in self.patients],
        }
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            d = json.load(f)
        patients = [PatientEntry(**p) for p in d["patients"]]
        ids = [p.patient_id for p in patients]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{path}: duplicate patient ids")
        return cls(d["version"], list(d["modalities"]), patients, d["split"])

    def modality_counts(self) -> Dict[str, int]:
        counts = {m: 0 for m in self.modalities}
        for p in self.patients:
            counts[p.modality] += 1
        return counts


def build_unpaired_dataset(params: PhantomParams, n_patients: int, M: int, seed: int, out_dir,
                           split: str = "train", modality_names: Optional[Sequence[str]] = None,
                           min_brain_fraction: float = MIN_BRAIN_FRACTION,
                           zscore_brain_only: bool = False) -> DatasetManifest:
    """Write an unpaired phantom dataset split to ``out_dir``.

    Every patient gets one uniformly drawn modality; volumes are z-scored per
    patient, small-brain slices dropped, and slices written in the binary
    slice format next to ``manifest.json``.
    """
    params.validate()
    if n_patients < 1:
        raise ValueError("n_patients must be >= 1")
    if not 1 <= M <= params.n_modalities:
        raise PhantomConfigError(f"M={M} needs {M} contrast entries, have {params.n_modalities}")
    if n_patients < M:
        log.warning("only %d patients for %d modalities; some modalities will be missing", n_patients, M)
    names = list(modality_names) if modality_names else [chr(ord("A") + i) for i in range(M)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    ss = np.random.SeedSequence([int(seed) & (2 ** 64 - 1), sum(map(ord, split))])
    assign_rng = np.random.default_rng(ss.spawn(1)[0])
    # shuffled near-balanced list: each patient's modality is uniform over M,
    # and every modality appears whenever n_patients >= M
    modalities = assign_rng.permutation(np.arange(n_patients) % M)
    patient_seeds = ss.generate_state(n_patients, dtype=np.uint64)

    entries = []
    for k in range(n_patients):
        pid = f"{split}_{k:03d}"
        label = ModalityLabel(int(modalities[k]), M)
        samples = generate_phantom_patient(params, label, int(patient_seeds[k]), patient_id=pid)
        vol = np.stack([s.image for s in samples])
        brain = np.stack([s.brain for s in samples])
        z = zscore_normalize(vol, brain if zscore_brain_only else None).astype(np.float32)
        for s, img in zip(samples, z):
            s.image = img
        kept = filter_small_brain_slices(samples, min_brain_fraction)
        files = []
        for s in kept:
            name = f"{pid}_s{s.slice_index:03d}.uag"
            write_slice(out / name, s.image, s.mask)
            files.append(name)
        entries.append(PatientEntry(pid, names[label.index], files, [s.slice_index for s in kept]))

    manifest = DatasetManifest(MANIFEST_VERSION, names, entries, split)
    with open(out / "manifest.json", "w") as f:
        f.write(manifest.to_json())
    return manifest


def load_dataset(directory) -> Tuple[DatasetManifest, List[SliceSample]]:
    """Read a dataset split back into ``SliceSample`` objects (patient order, slice order)."""
    directory = Path(directory)
    manifest = DatasetManifest.load(directory / "manifest.json")
    M = len(manifest.modalities)
    samples = []
    for p in manifest.patients:
        label = ModalityLabel(manifest.modalities.index(p.modality), M)
        indices = p.slice_indices or list(range(len(p.slices)))
        for name, idx in zip(p.slices, indices):
            image, mask = read_slice(directory / name)
            samples.append(SliceSample(image, mask, label, p.patient_id, idx))
    return manifest, samples

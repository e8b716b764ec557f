"""Checkpoint-driven inference: test-set evaluation, translation and heatmaps."""
from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .metrics import MetricsReport, VolumePrediction, assemble_volume, evaluate_volumes, export_feature_heatmap
from .networks import ConfigurationError, TwoStreamGenerator, UNetConfig, VariantSpec
from .phantom_data import SliceSample, load_dataset
from .trainer import load_checkpoint


class LoadedModel:
    def __init__(self, state: dict):
        self.variant = VariantSpec(**state["variant"])
        self.cfg = UNetConfig(**state["unet"])
        self.modalities: List[str] = list(state["modalities"])
        self.model_modality: Optional[str] = state.get("model_modality")
        self.image_size: int = state["image_size"]
        self.seed = state["train_config"].get("seed")
        self.G = TwoStreamGenerator(self.cfg, self.variant)
        self.G.load_state_dict(state["G"])
        self.G.eval()

    @property
    def M(self) -> int:
        return len(self.modalities)

    def one_hot(self, idx) -> torch.Tensor:
        return F.one_hot(torch.as_tensor(idx, dtype=torch.long), self.M).float()


def checkpoint_paths(path) -> List[Path]:
    """A checkpoint file, or every ``final*.pt`` in a run directory."""
    path = Path(path)
    if path.is_file():
        return [path]
    ckpt_dir = path / "checkpoints" if (path / "checkpoints").is_dir() else path
    found = sorted(ckpt_dir.glob("final*.pt"))
    if not found:
        raise FileNotFoundError(f"no final checkpoint under {path}")
    return found


class Segmenter:
    """Routes each slice to its model (one shared model, or one per modality)."""

    def __init__(self, path):
        self.models = [LoadedModel(load_checkpoint(p)) for p in checkpoint_paths(path)]
        first = self.models[0]
        self.variant = first.variant
        self.modalities = first.modalities
        self.image_size = first.image_size
        self.seed = first.seed
        self.by_modality: Dict[Optional[str], LoadedModel] = {m.model_modality: m for m in self.models}

    def model_for(self, modality: str) -> LoadedModel:
        if None in self.by_modality:
            return self.by_modality[None]
        try:
            return self.by_modality[modality]
        except KeyError:
            raise ConfigurationError(f"no per-modality model for {modality!r}") from None

    @torch.no_grad()
    def predict(self, samples: Sequence[SliceSample], batch_size: int = 32) -> List[np.ndarray]:
        out: List[Optional[np.ndarray]] = [None] * len(samples)
        groups = defaultdict(list)
        for i, s in enumerate(samples):
            groups[self.modalities[s.modality.index]].append(i)
        for mod, idx in groups.items():
            model = self.model_for(mod)
            for start in range(0, len(idx), batch_size):
                chunk = idx[start:start + batch_size]
                x = torch.from_numpy(np.stack([samples[i].image for i in chunk])[:, None].astype(np.float32))
                label = model.one_hot([samples[i].modality.index for i in chunk])
                logits = model.G.segment(x, label)
                pred = logits.argmax(dim=1).numpy().astype(np.uint8)
                for j, i in enumerate(chunk):
                    out[i] = pred[j]
        return out


def group_volumes(samples: Sequence[SliceSample], preds: Sequence[np.ndarray],
                  modalities: Sequence[str]) -> List[VolumePrediction]:
    by_patient: Dict[str, list] = defaultdict(list)
    for s, p in zip(samples, preds):
        by_patient[s.patient_id].append((s, p))
    vols = []
    for pid in sorted(by_patient):
        items = by_patient[pid]
        vols.append(assemble_volume(items, modality=modalities[items[0][0].modality.index]))
    return vols


def evaluate(checkpoint, test_dir, oracle: bool = False, variant_name: Optional[str] = None) -> MetricsReport:
    """Segment every test slice, rebuild patient volumes, compute metrics.

    With ``oracle=True`` the ground truth is scored against itself and no
    model is needed.
    """
    manifest, samples = load_dataset(test_dir)
    if oracle:
        preds = [s.mask for s in samples]
        name, seed = variant_name or "oracle", None
    else:
        seg = Segmenter(checkpoint)
        size = samples[0].image.shape[-1]
        if seg.image_size != size:
            raise ConfigurationError(f"checkpoint trained on {seg.image_size}px slices, dataset has {size}px")
        if list(seg.modalities) != list(manifest.modalities):
            raise ConfigurationError(f"checkpoint modalities {seg.modalities} != dataset {manifest.modalities}")
        preds = seg.predict(samples)
        name, seed = variant_name or seg.variant.name, seg.seed
    return evaluate_volumes(group_volumes(samples, preds, manifest.modalities), name, seed)


@torch.no_grad()
def translate_sample(model: LoadedModel, sample: SliceSample, target: int):
    """Return ``(translated, recovered)`` 2D arrays for one slice."""
    if not model.variant.has_trans_stream:
        raise ConfigurationError("variant has no translation stream")
    x = torch.from_numpy(sample.image[None, None].astype(np.float32))
    fake = model.G.translate(x, model.one_hot([target]))
    rec = model.G.translate(fake, model.one_hot([sample.modality.index]))
    return fake[0, 0].numpy(), rec[0, 0].numpy()


@torch.no_grad()
def feature_heatmaps(model: LoadedModel, sample: SliceSample) -> Dict[str, np.ndarray]:
    """Heatmaps of encoder features per stream and level, plus the fused
    decoder inputs and attention maps when the variant has them."""
    G = model.G
    x = torch.from_numpy(sample.image[None, None].astype(np.float32))
    maps: Dict[str, np.ndarray] = {}
    p_seg = G.encode("seg", x)
    p_trans = None
    if G.enc_trans is not None:
        p_trans = G.encode("trans", G._trans_input(x, model.one_hot([sample.modality.index])))
    for p in (p_seg, p_trans):
        if p is None:
            continue
        for i, f in enumerate(p.features):
            maps[f"{p.stream}_enc{i}"] = export_feature_heatmap(f[0].numpy())
    if model.variant.fusion_enabled:
        for stream, own, other in (("seg", p_seg, p_trans), ("trans", p_trans, p_seg)):
            dec = G.dec_seg if stream == "seg" else G.dec_trans
            _, fused = dec(own, other, model.variant, return_fused=True)
            for i, o in enumerate(fused):
                maps[f"{stream}_fused{i}"] = export_feature_heatmap(o[0].numpy())
            if model.variant.attention_enabled:
                for i, fusion in enumerate(dec.fusions):
                    maps[f"{stream}_attn{i}"] = fusion.attention_map(other.features[i])[0, 0].numpy()
    return maps

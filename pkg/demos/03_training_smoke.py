"""A short training run on a small phantom, then evaluation.

The full-size run is `uagan gen-data ... && uagan train --epochs 20`; this
one uses 32px slices and a narrow network so it finishes in about a minute.
"""
# %%
import tempfile
from pathlib import Path

from uagan.evaluation import evaluate
from uagan.networks import UNetConfig
from uagan.phantom_data import PhantomParams, build_unpaired_dataset
from uagan.trainer import TrainConfig, epoch_means, read_loss_log, train

root = Path(tempfile.mkdtemp())
params = PhantomParams(image_size=32, brain_radius_range=(10, 14), tumor_radius_range=(3, 5),
                       edema_width_range=(1, 2), slices_per_patient=4)
build_unpaired_dataset(params, 9, 3, seed=0, out_dir=root / "train", split="train")
build_unpaired_dataset(params, 6, 3, seed=0, out_dir=root / "test", split="test")

# %%
cfg = TrainConfig(variant="uagan", epochs=6, batch_size=8, seed=0,
                  unet=UNetConfig(levels=3, base_channels=8, d_base_channels=8, d_layers=3))
manifest = train(cfg, root / "train", root / "run")
rows = read_loss_log(root / "run" / "logs" / "loss_log.jsonl")
for e, v in epoch_means(rows, "l_seg").items():
    print(f"epoch {e}: l_seg {v:.3f}")

# %%
report = evaluate(root / "run", root / "test")
agg = report.aggregate()
for mod in ("A", "B", "C", "overall"):
    if mod in agg:
        print(f"{mod:8s} Dice {agg[mod]['dice']['mean']:.3f}  ASSD {agg[mod]['assd']['mean']:.2f}")

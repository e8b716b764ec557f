"""Ablation sweep through the command-line entry point, at toy scale."""
# %%
import tempfile
from pathlib import Path

from uagan.cli import main

root = Path(tempfile.mkdtemp())
ini = root / "toy.ini"
ini.write_text("""\
[phantom]
image_size = 32
brain_radius_range = [10, 14]
tumor_radius_range = [3, 5]
edema_width_range = [1, 2]
slices_per_patient = 4

[unet]
levels = 3
base_channels = 8
d_base_channels = 8
d_layers = 3

[run]
train_patients = 6
test_patients = 3
""")

# %%
main(["gen-data", "--config", str(ini), "--out", str(root / "data")])
code = main(["ablate", "--config", str(ini), "--data", str(root / "data"), "--seeds", "2", "--epochs", "2",
             "--out", str(root / "sweep")])
print("exit", code)
print((root / "sweep" / "ablation.csv").read_text().splitlines()[0])

# %% Rerunning skips every completed run directory
main(["ablate", "--config", str(ini), "--data", str(root / "data"), "--seeds", "2", "--epochs", "2",
      "--out", str(root / "sweep"), "-v"])

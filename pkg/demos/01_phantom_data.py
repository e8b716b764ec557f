"""Synthetic unpaired phantom data: one modality per patient."""
# %%
import tempfile
from pathlib import Path

import numpy as np

from uagan.phantom_data import (AugmentConfig, ModalityLabel, PhantomParams, augment, build_unpaired_dataset,
                                generate_phantom_patient, load_dataset)

params = PhantomParams()
print("image size", params.image_size, "slices per patient", params.slices_per_patient)

# %% One patient, seen through each modality. Geometry depends only on the
# seed, so the tumor masks are identical; only the contrast changes.
views = [generate_phantom_patient(params, ModalityLabel(m), seed=3) for m in range(3)]
for m, slices in enumerate(views):
    img = np.stack([s.image for s in slices])
    mask = np.stack([s.mask for s in slices])
    brain = np.stack([s.brain for s in slices])
    tumor, rest = img[mask > 0].mean(), img[brain & (mask == 0)].mean()
    print(f"modality {m}: tumor mean {tumor:.2f}  rest-of-brain mean {rest:.2f}")
assert all(np.array_equal(a.mask, b.mask) for a, b in zip(views[0], views[2]))

# %% A small dataset on disk, with a shuffled balanced modality assignment
out = Path(tempfile.mkdtemp()) / "train"
manifest = build_unpaired_dataset(params, n_patients=9, M=3, seed=1, out_dir=out)
print("modality counts", manifest.modality_counts())
manifest, samples = load_dataset(out)
print(len(samples), "slices, first from", samples[0].patient_id)

# %% Augmentation keeps image and mask aligned
rng = np.random.default_rng(0)
s = max(samples, key=lambda t: t.mask.sum())
a = augment(s, rng, AugmentConfig(p=1.0))
print("tumor pixels before/after augmentation:", int(s.mask.sum()), int(a.mask.sum()))

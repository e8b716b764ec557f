"""Overlap and surface-distance metrics on small hand-made volumes."""
# %%
import numpy as np

from uagan.metrics import assd, assd_bruteforce, confusion_counts, dice, specificity, volume_metrics

a = np.zeros((4, 4, 4), bool)
b = np.zeros((4, 4, 4), bool)
a[0, 0, 0] = True
b[3, 0, 0] = True
print("two points 3 voxels apart, ASSD =", assd(a, b))

# %% Counts (tp, fp, fn, tn) = (2, 2, 2, 58)
c = (2, 2, 2, 58)
print("Dice", dice(c), "Spec", specificity(c))

# %% Anisotropic spacing: the EDT path agrees with all-pairs distances
rng = np.random.default_rng(1)
p, g = rng.random((4, 8, 8)) > 0.7, rng.random((4, 8, 8)) > 0.7
sp = (3.0, 1.0, 1.0)
print("ASSD fast", assd(p, g, sp), "brute", assd_bruteforce(p, g, sp))
print(volume_metrics(p, g, sp))
print("counts", confusion_counts(p, g))

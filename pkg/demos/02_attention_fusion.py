"""The cross-stream attention gate, checked by hand."""
# %%
import torch

from uagan.networks import PRESETS, AttentionFusion, attentional_fuse

torch.manual_seed(0)
own, other = torch.randn(1, 4, 8, 8), torch.randn(1, 4, 8, 8)
gate = AttentionFusion(4)

# %% The mask is a sigmoid of a 1x1 conv on the other stream's features
with torch.no_grad():
    m = gate.attention_map(other)
print("attention map range", float(m.min()), float(m.max()))

# %% If the align conv is zero nothing flows across: output is F_own exactly
with torch.no_grad():
    gate.align_conv.weight.zero_()
    gate.align_conv.bias.zero_()
print("zero align -> identity:", torch.equal(gate(own, other), own))

# %% Fully open gate with an identity align conv adds the features
g1 = AttentionFusion(1)
with torch.no_grad():
    g1.align_conv.weight.fill_(1.0)
    g1.align_conv.bias.zero_()
    g1.mask_conv.weight.zero_()
    g1.mask_conv.bias.fill_(100.0)
a, b = torch.randn(1, 1, 4, 4), torch.randn(1, 1, 4, 4)
print("saturated gate max |out - (a+b)|:", float((g1(a, b) - (a + b)).abs().max()))

# %% Ablation presets change what the decoder receives
print("uagan-fuse ignores the other stream:",
      torch.equal(attentional_fuse(own, other, None, PRESETS["uagan-fuse"]), own))
print("uagan-atten without params adds:",
      torch.equal(attentional_fuse(own, other, None, PRESETS["uagan-atten"]), own + other))

"""
=================================
Aligning a shifted feature map
=================================

A deformable convolution samples its input at learned, per-pixel offsets.
With a kernel that keeps only the centre tap, it becomes a pure resampler,
so feeding the negated shift as the offset undoes a translation.

Here ``moved`` observes ``ref`` displaced by ``d = (2, -3)`` pixels:
``moved(p) = ref(p + d)``. Sampling ``moved`` at ``p - d`` recovers ``ref``
away from the borders. A whole-pixel shift is recovered exactly; a
fractional one picks up the blur of two bilinear resamplings.
"""

import torch
import torch.nn.functional as F

from aligncr.deform import bilinear_sample, deform_conv

torch.manual_seed(0)
H = W = 32
C, K, G = 3, 3, 1
ref = F.avg_pool2d(torch.randn(1, C, H + 4, W + 4, dtype=torch.float64), 5, stride=1)  # smooth field
dx, dy = 2.0, -3.0

ys, xs = torch.meshgrid(torch.arange(H, dtype=torch.float64), torch.arange(W, dtype=torch.float64), indexing="ij")
moved = bilinear_sample(ref, (xs + dx).reshape(1, -1), (ys + dy).reshape(1, -1)).view(1, C, H, W)

# centre tap only: output = input sampled at p + offset
weight = torch.zeros(C, C, K, K, dtype=torch.float64)
weight[range(C), range(C), 1, 1] = 1.0
offsets = torch.zeros(1, G * K * K, 2, H, W, dtype=torch.float64)
offsets[:, :, 0], offsets[:, :, 1] = -dx, -dy
modulation = torch.ones(1, G * K * K, H, W, dtype=torch.float64)
aligned = deform_conv(moved, offsets.view(1, -1, H, W), modulation, weight, offset_groups=G)

inner = (slice(None), slice(None), slice(4, H - 4), slice(4, W - 4))
print(f"mean |moved - ref|   {(moved - ref[..., :H, :W])[inner].abs().mean():.4f}")
print(f"mean |aligned - ref| {(aligned - ref[..., :H, :W])[inner].abs().mean():.2e}")

# fractional shift: sampled twice, so a little smoothing remains
dx, dy = 2.5, -1.0
moved = bilinear_sample(ref, (xs + dx).reshape(1, -1), (ys + dy).reshape(1, -1)).view(1, C, H, W)
offsets[:, :, 0], offsets[:, :, 1] = -dx, -dy
aligned = deform_conv(moved, offsets.view(1, -1, H, W), modulation, weight, offset_groups=G)
print(f"fractional shift: mean |aligned - ref| {(aligned - ref[..., :H, :W])[inner].abs().mean():.2e}")

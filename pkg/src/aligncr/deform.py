"""Modulated deformable convolution and pyramid/cascading feature alignment.

Offsets use the layout ``[G, K*K, 2]`` flattened to ``2*K*K*G`` channels,
with ``(dx, dy)`` per kernel tap in feature pixels; taps are enumerated
row-major over the kernel. Modulation has ``K*K*G`` channels in [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from ._dcn_kernels import DeformSample

STREAMS = ("optical", "sar")


@dataclass
class FeatureMap:
    """Activation tensor tagged with its stream and AlignFuse block index."""

    values: torch.Tensor
    stream: str
    block_index: int = 0

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise ValueError(f"unknown stream {self.stream!r}")


@dataclass
class OffsetField:
    """Per-location sampling displacements and modulation for one deform conv."""

    offsets: torch.Tensor
    modulation: torch.Tensor
    level: int = 1

    def mean_displacement(self):
        """Mean (dx, dy) over taps, groups and positions, per batch item."""
        b, _, h, w = self.offsets.shape
        return self.offsets.view(b, -1, 2, h, w).mean(dim=(1, 3, 4))


def _values(x):
    if isinstance(x, FeatureMap):
        return x.values
    return x


def bilinear_sample(img, px, py):
    """Sample (N, C, H, W) images at pixel coordinates ``px``, ``py`` of shape (N, P).

    Corners outside the image contribute zero. Returns (N, C, P).
    """
    N, C, H, W = img.shape
    flat = img.reshape(N, C, H * W)
    x0, y0 = torch.floor(px), torch.floor(py)
    fx, fy = px - x0, py - y0
    x0, y0 = x0.long(), y0.long()
    out = None
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).unsqueeze(1).expand(N, C, -1)
            term = flat.gather(2, idx) * (wx * wy * valid).unsqueeze(1)
            out = term if out is None else out + term
    return out


def deform_conv(x, offsets, modulation, weight, bias=None, offset_groups=1, impl="compiled"):
    """Modulated deformable convolution with 'same' padding.

    ``out(p) = sum_k m_k(p) * w_k * x(p + r_k + dp_k(p))`` where fractional
    positions are bilinearly interpolated and samples outside the input are
    zero.

    Args:
        x (Tensor): (B, C, H, W) or (C, H, W) input.
        offsets (Tensor): (B, 2*K*K*G, H, W) displacements, (dx, dy) per tap.
        modulation (Tensor): (B, K*K*G, H, W) tap weights, or None for 1.
        weight (Tensor): (C_out, C, K, K) kernel, K odd.
        bias (Tensor | None): (C_out,) bias.
        offset_groups (int): G, number of channel groups sharing an offset set.
        impl (str): ``"compiled"`` uses the numba kernels with a hand-written
            backward; ``"torch"`` is the autograd reference built from gathers.

    Returns:
        Tensor: (B, C_out, H, W), or (C_out, H, W) for unbatched input.
    """
    unbatched = x.dim() == 3
    if unbatched:
        x, offsets = x[None], offsets[None]
        modulation = None if modulation is None else modulation[None]
    B, C, H, W = x.shape
    C_out, C_w, K, K2 = weight.shape
    G = offset_groups
    if K != K2 or K % 2 == 0:
        raise ValueError(f"kernel must be square with odd size, got {K}x{K2}")
    if C_w != C or C % G:
        raise ValueError(f"weight expects {C_w} input channels for {C}-channel input with {G} groups")
    KK = K * K
    if offsets.shape != (B, 2 * KK * G, H, W):
        raise ValueError(f"offsets shape {tuple(offsets.shape)} != {(B, 2 * KK * G, H, W)}")
    if modulation is not None and modulation.shape != (B, KK * G, H, W):
        raise ValueError(f"modulation shape {tuple(modulation.shape)} != {(B, KK * G, H, W)}")
    if torch.isnan(offsets).any():
        raise ValueError("offsets contain NaN")

    dtype, device = x.dtype, x.device
    if impl == "torch":
        half = K // 2
        ky, kx = torch.meshgrid(
            torch.arange(K, dtype=dtype, device=device) - half,
            torch.arange(K, dtype=dtype, device=device) - half,
            indexing="ij",
        )
        ys = torch.arange(H, dtype=dtype, device=device).view(1, 1, H, 1)
        xs = torch.arange(W, dtype=dtype, device=device).view(1, 1, 1, W)
        off = offsets.view(B * G, KK, 2, H, W)
        px = xs + kx.reshape(1, KK, 1, 1) + off[:, :, 0]  # (B*G, KK, H, W)
        py = ys + ky.reshape(1, KK, 1, 1) + off[:, :, 1]
    xg = x.reshape(B * G, C // G, H, W)
    if impl == "compiled":
        if modulation is None:
            modulation = torch.ones(B, KK * G, H, W, dtype=dtype, device=device)
        sampled = DeformSample.apply(
            xg, offsets.reshape(B * G, KK, 2, H, W), modulation.reshape(B * G, KK, H, W).to(dtype), K
        )
    elif impl == "torch":
        sampled = bilinear_sample(xg, px.reshape(B * G, -1), py.reshape(B * G, -1))
        sampled = sampled.view(B, G, C // G, KK, H, W)
        if modulation is not None:
            sampled = sampled * modulation.view(B, G, 1, KK, H, W)
    else:
        raise ValueError(f"unknown impl {impl!r}")
    cols = sampled.reshape(B, C * KK, H * W)
    out = torch.matmul(weight.reshape(C_out, C * KK), cols).view(B, C_out, H, W)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out[0] if unbatched else out


class DeformConv2d(nn.Module):
    """Learnable kernel applied through :func:`deform_conv`."""

    def __init__(self, in_channels, out_channels, kernel_size=3, offset_groups=8, bias=True):
        super().__init__()
        self.offset_groups = offset_groups
        self.kernel_size = kernel_size
        conv = nn.Conv2d(in_channels, out_channels, kernel_size, padding=kernel_size // 2, bias=bias)
        self.weight = conv.weight
        self.bias = conv.bias

    def forward(self, x, field):
        return deform_conv(x, field.offsets, field.modulation, self.weight, self.bias, self.offset_groups)


class OffsetPredictor(nn.Module):
    """Offsets and modulation from an (optical, SAR) feature pair.

    When a coarser-level field is given, its offsets are bilinearly upsampled
    2x and doubled; they enter the feature stack through a fusion conv and
    are the base to which the predicted residual is added. The two output
    heads start at zero, so an untrained predictor returns the (upsampled)
    prior with modulation 0.5.
    """

    def __init__(self, channels, kernel_size=3, offset_groups=8, level=1, has_prior=False):
        super().__init__()
        self.level = level
        self.has_prior = has_prior
        kk = kernel_size * kernel_size * offset_groups
        self.conv1 = nn.Conv2d(2 * channels, channels, 3, padding=1)
        if has_prior:
            self.fuse = nn.Conv2d(channels + 2 * kk, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.offset_head = nn.Conv2d(channels, 2 * kk, 3, padding=1)
        self.mask_head = nn.Conv2d(channels, kk, 3, padding=1)
        for head in (self.offset_head, self.mask_head):
            nn.init.zeros_(head.weight)
            nn.init.zeros_(head.bias)
        self.lrelu = nn.LeakyReLU(0.1)

    def forward(self, f_opt, f_sar, coarser=None):
        if isinstance(f_opt, FeatureMap) and isinstance(f_sar, FeatureMap) and f_opt.stream == f_sar.stream:
            raise ValueError(f"offset prediction needs one optical and one sar feature, got two {f_opt.stream}")
        f_opt, f_sar = _values(f_opt), _values(f_sar)
        if f_opt.shape[-2:] != f_sar.shape[-2:]:
            raise ValueError(f"feature extents differ: {tuple(f_opt.shape[-2:])} vs {tuple(f_sar.shape[-2:])}")
        if (coarser is not None) != self.has_prior:
            raise ValueError("coarser field must be given exactly when the predictor was built with a prior")
        feat = self.lrelu(self.conv1(torch.cat([f_opt, f_sar], dim=1)))
        prior = 0.0
        if coarser is not None:
            prior = 2.0 * F.interpolate(coarser.offsets, size=f_opt.shape[-2:], mode="bilinear", align_corners=False)
            feat = self.lrelu(self.fuse(torch.cat([feat, prior], dim=1)))
        feat = self.lrelu(self.conv2(feat))
        offsets = prior + self.offset_head(feat)
        modulation = torch.sigmoid(self.mask_head(feat))
        return OffsetField(offsets, modulation, self.level)


class PCDAlignment(nn.Module):
    """Warp SAR features onto optical features, coarse to fine.

    A three-level pyramid (strides 1, 2, 4) is built for each stream with
    strided convolutions. Offsets are predicted at level 3 first and
    propagated upward; aligned features from a coarser level are upsampled
    and fused into the finer level. A final cascading stage predicts one more
    full-resolution field from (optical, aligned) and applies it.
    """

    levels = 3

    def __init__(self, channels=64, offset_groups=8, kernel_size=3):
        super().__init__()
        c = channels
        self.down_opt = nn.ModuleList()
        self.down_sar = nn.ModuleList()
        for _ in range(self.levels - 1):
            for mods in (self.down_opt, self.down_sar):
                mods.append(nn.Sequential(
                    nn.Conv2d(c, c, 3, stride=2, padding=1), nn.LeakyReLU(0.1),
                    nn.Conv2d(c, c, 3, padding=1), nn.LeakyReLU(0.1),
                ))
        self.predictors = nn.ModuleList(
            OffsetPredictor(c, kernel_size, offset_groups, level=lv, has_prior=lv < self.levels)
            for lv in range(1, self.levels + 1)
        )
        self.dconvs = nn.ModuleList(
            DeformConv2d(c, c, kernel_size, offset_groups) for _ in range(self.levels)
        )
        self.feat_fuse = nn.ModuleList(
            nn.Conv2d(2 * c, c, 3, padding=1) for _ in range(self.levels - 1)
        )
        self.cas_predictor = OffsetPredictor(c, kernel_size, offset_groups, level=1)
        self.cas_dconv = DeformConv2d(c, c, kernel_size, offset_groups)
        self.lrelu = nn.LeakyReLU(0.1)

    def offset_parameters(self):
        """Parameters of the offset/modulation heads."""
        for p in (*self.predictors, self.cas_predictor):
            yield from p.offset_head.parameters()
            yield from p.mask_head.parameters()

    def forward(self, f_opt, f_sar, return_fields=False):
        f_opt, f_sar = _values(f_opt), _values(f_sar)
        if f_opt.shape != f_sar.shape:
            raise ValueError(f"feature shapes differ: {tuple(f_opt.shape)} vs {tuple(f_sar.shape)}")
        H, W = f_opt.shape[-2:]
        if H % 4 or W % 4:
            raise ValueError(f"feature extent {H}x{W} must be divisible by 4 for the 3-level pyramid")
        opt_pyr, sar_pyr = [f_opt], [f_sar]
        for i in range(self.levels - 1):
            opt_pyr.append(self.down_opt[i](opt_pyr[-1]))
            sar_pyr.append(self.down_sar[i](sar_pyr[-1]))

        fields = {}
        field, aligned = None, None
        for lv in range(self.levels, 0, -1):
            idx = lv - 1
            field = self.predictors[idx](opt_pyr[idx], sar_pyr[idx], field)
            feat = self.dconvs[idx](sar_pyr[idx], field)
            if aligned is not None:
                up = F.interpolate(aligned, size=feat.shape[-2:], mode="bilinear", align_corners=False)
                feat = self.feat_fuse[idx](torch.cat([feat, up], dim=1))
            aligned = self.lrelu(feat) if lv > 1 else feat
            fields[f"l{lv}"] = field
        cas = self.cas_predictor(f_opt, aligned)
        out = self.lrelu(self.cas_dconv(aligned, cas))
        fields["cascade"] = cas
        return (out, fields) if return_fields else out

"""Two-stream cloud-removal network with deformable SAR-to-optical alignment.

Cloudy optical (4, H, W) and nearest-upsampled SAR (2, H, W) pass through
stream-specific feature extractors, then ``D`` AlignFuse blocks. Each block
warps SAR features onto the optical features (:class:`PCDAlignment`), fuses
them with residual dense blocks plus window attention whose keys/values
include SAR tokens (:class:`SGCIFusion`), and injects gated SAR features into
the optical stream (:class:`SLFCompensation`). The optical outputs of all
blocks are concatenated and decoded into a residual over the cloudy input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
from torch import nn
from torch.nn import functional as F

from .deform import FeatureMap, PCDAlignment


@dataclass
class ModelConfig:
    D: int = 6
    channels: int = 64
    window_size: int = 8
    heads: int = 4
    rdb_growth: int = 32
    rdb_layers: int = 4
    offset_groups: int = 8
    use_sar: bool = True
    use_align: bool = True

    def __post_init__(self):
        if self.D < 1:
            raise ValueError(f"D must be >= 1, got {self.D}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.channels % self.offset_groups:
            raise ValueError(f"channels {self.channels} not divisible by offset groups {self.offset_groups}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        out = {}
        for k, v in d.items():
            if isinstance(v, str):
                v = v.strip().lower() in ("1", "true", "yes") if known[k] in (bool, "bool") else int(v)
            out[k] = v
        return cls(**out)


@dataclass
class Prediction:
    image: torch.Tensor
    intermediates: list | None = None
    fields: list | None = None


def _nearest_index(n_dst, n_src):
    if 3 * n_dst != 10 * n_src:
        raise ValueError(f"upsampling {n_src} -> {n_dst} is not a 10/3 ratio")
    return (torch.arange(n_dst) * 3) // 10


def upsample_nearest(sar):
    """Nearest-neighbour 10/3 upsampling: ``out[..., i, j] = in[..., floor(3i/10), floor(3j/10)]``."""
    h, w = sar.shape[-2:]
    if (10 * h) % 3 or (10 * w) % 3:
        raise ValueError(f"SAR extent {h}x{w} does not map to an integral optical extent")
    rows = _nearest_index(10 * h // 3, h)
    cols = _nearest_index(10 * w // 3, w)
    return sar[..., rows, :][..., cols]


def mask_to_features(mask, size):
    """Area-average a (B, 1, H, W) mask to a feature grid of ``size``."""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.adaptive_avg_pool2d(mask, size)


class FeatureExtractor(nn.Module):
    def __init__(self, in_channels, channels, stream):
        super().__init__()
        self.in_channels = in_channels
        self.stream = stream
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, channels, 3, padding=1),
            nn.LeakyReLU(0.1),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x):
        if x.shape[-3] != self.in_channels:
            raise ValueError(f"{self.stream} extractor expects {self.in_channels} channels, got {x.shape[-3]}")
        H, W = x.shape[-2:]
        if H % 4 or W % 4:
            raise ValueError(f"input extent {H}x{W} must be divisible by 4")
        return self.body(x)


class DenseLayers(nn.Module):
    """Densely connected 3x3 convs followed by 1x1 local feature fusion."""

    def __init__(self, channels, growth, layers):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(channels + i * growth, growth, 3, padding=1) for i in range(layers)
        )
        self.lff = nn.Conv2d(channels + layers * growth, channels, 1)
        self.lrelu = nn.LeakyReLU(0.1)

    def forward(self, x):
        feats = x
        for conv in self.convs:
            feats = torch.cat([feats, self.lrelu(conv(feats))], dim=1)
        return self.lff(feats)


def window_partition(x, ws):
    """(B, H, W, C) -> (B * nW, ws*ws, C)."""
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws * ws, C)


def window_reverse(windows, ws, B, H, W):
    C = windows.shape[-1]
    x = windows.view(B, H // ws, W // ws, ws, ws, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H, W, C)


def shifted_window_mask(H, W, ws, shift, device=None):
    """Additive (nW, N, N) mask keeping attention inside regions that were
    contiguous before the cyclic shift."""
    img = torch.zeros(1, H, W, 1, device=device)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            img[:, hs, wsl, :] = cnt
            cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    diff = win[:, None, :] - win[:, :, None]
    return torch.zeros_like(diff).masked_fill(diff != 0, float("-inf"))


class WindowCrossAttention(nn.Module):
    """Multi-head attention inside (optionally shifted) non-overlapping windows.

    Queries come from optical tokens; keys/values come from the optical tokens
    and, when given, the SAR tokens of the same window. Returns the projected
    attention output (the caller adds it as a residual).
    """

    def __init__(self, channels, window_size, heads, shift=False):
        super().__init__()
        self.window_size = window_size
        self.heads = heads
        self.shift = shift
        self.norm_opt = nn.LayerNorm(channels)
        self.norm_sar = nn.LayerNorm(channels)
        self.q = nn.Linear(channels, channels)
        self.kv_opt = nn.Linear(channels, 2 * channels)
        self.kv_sar = nn.Linear(channels, 2 * channels)
        self.proj = nn.Linear(channels, channels)
        self._mask_cache = {}

    def _mask(self, H, W, shift, dtype, device):
        key = (H, W, shift, dtype, device)
        if key not in self._mask_cache:
            self._mask_cache[key] = shifted_window_mask(H, W, self.window_size, shift, device).to(dtype)
        return self._mask_cache[key]

    def _heads(self, t):
        n, L, C = t.shape
        return t.view(n, L, self.heads, C // self.heads).transpose(1, 2)

    def forward(self, x_opt, x_sar=None):
        B, C, H, W = x_opt.shape
        ws = self.window_size
        if H % ws or W % ws:
            raise ValueError(f"window size {ws} does not divide feature extent {H}x{W}")
        shift = ws // 2 if self.shift and ws < min(H, W) else 0

        def tokens(x):
            x = x.permute(0, 2, 3, 1)
            if shift:
                x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
            return window_partition(x, ws)

        t_opt = self.norm_opt(tokens(x_opt))
        q = self._heads(self.q(t_opt))
        k, v = self.kv_opt(t_opt).chunk(2, dim=-1)
        if x_sar is not None:
            t_sar = self.norm_sar(tokens(x_sar))
            k_s, v_s = self.kv_sar(t_sar).chunk(2, dim=-1)
            k, v = torch.cat([k, k_s], dim=1), torch.cat([v, v_s], dim=1)
        k, v = self._heads(k), self._heads(v)

        mask = None
        if shift:
            m = self._mask(H, W, shift, q.dtype, q.device)
            if x_sar is not None:
                m = torch.cat([m, m], dim=-1)
            nW = m.shape[0]
            mask = m.repeat(B, 1, 1).unsqueeze(1)  # (B*nW, 1, N, keys)
            assert mask.shape[0] == B * nW
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        out = out.transpose(1, 2).reshape(-1, ws * ws, C)
        out = self.proj(out)
        out = window_reverse(out, ws, B, H, W)
        if shift:
            out = torch.roll(out, shifts=(shift, shift), dims=(1, 2))
        return out.permute(0, 3, 1, 2)


class SGCIFusion(nn.Module):
    """SAR-guided global context interaction.

    Each stream runs a residual dense block; window attention (queries from
    the optical stream, keys/values from both) sits after the optical local
    feature fusion conv, inside the optical residual.
    """

    def __init__(self, cfg, shift=False):
        super().__init__()
        self.use_sar = cfg.use_sar
        self.dense_opt = DenseLayers(cfg.channels, cfg.rdb_growth, cfg.rdb_layers)
        if cfg.use_sar:
            self.dense_sar = DenseLayers(cfg.channels, cfg.rdb_growth, cfg.rdb_layers)
        self.attn = WindowCrossAttention(cfg.channels, cfg.window_size, cfg.heads, shift)

    def forward(self, f_opt, f_sar=None):
        o = self.dense_opt(f_opt)
        if self.use_sar:
            s = self.dense_sar(f_sar)
            o = o + self.attn(o, s)
            return f_opt + o, f_sar + s
        o = o + self.attn(o)
        return f_opt + o, None


class SLFCompensation(nn.Module):
    """``f_opt + sigmoid(gate([f_opt, f_sar, mask])) * comp(f_sar)``."""

    def __init__(self, channels):
        super().__init__()
        self.gate = nn.Conv2d(2 * channels + 1, channels, 3, padding=1)
        self.comp = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, f_opt, f_sar, mask):
        if mask.shape[-2:] != f_opt.shape[-2:] or f_sar.shape != f_opt.shape:
            raise ValueError(
                f"extent mismatch: opt {tuple(f_opt.shape)}, sar {tuple(f_sar.shape)}, mask {tuple(mask.shape)}"
            )
        g = torch.sigmoid(self.gate(torch.cat([f_opt, f_sar, mask], dim=1)))
        return f_opt + g * self.comp(f_sar)


class AlignFuseBlock(nn.Module):
    def __init__(self, cfg, index=0):
        super().__init__()
        self.index = index
        self.use_sar = cfg.use_sar
        self.use_align = cfg.use_sar and cfg.use_align
        if self.use_align:
            self.align = PCDAlignment(cfg.channels, cfg.offset_groups)
        self.sgci = SGCIFusion(cfg, shift=index % 2 == 1)
        if cfg.use_sar:
            self.slfc = SLFCompensation(cfg.channels)

    def forward(self, f_opt, f_sar, mask, return_fields=False):
        fields = None
        if not self.use_sar:
            out, _ = self.sgci(f_opt)
            return (out, None, fields) if return_fields else (out, None)
        if self.use_align:
            f_sar_hat, fields = self.align(f_opt, f_sar, return_fields=True)
        else:
            f_sar_hat = f_sar
        o, s = self.sgci(f_opt, f_sar_hat)
        o = self.slfc(o, s, mask_to_features(mask, o.shape[-2:]))
        return (o, s, fields) if return_fields else (o, s)


class Reconstruction(nn.Module):
    """Concatenated block outputs -> 1x1 conv -> two 3x3 convs -> residual over the cloudy input."""

    def __init__(self, D, channels, out_channels=4):
        super().__init__()
        self.D = D
        self.gff = nn.Conv2d(D * channels, channels, 1)
        self.refine = nn.Conv2d(channels, channels, 3, padding=1)
        self.out = nn.Conv2d(channels, out_channels, 3, padding=1)
        self.lrelu = nn.LeakyReLU(0.1)

    def forward(self, intermediates, cloudy):
        if len(intermediates) != self.D:
            raise ValueError(f"expected {self.D} intermediate features, got {len(intermediates)}")
        x = self.gff(torch.cat(intermediates, dim=1))
        x = self.out(self.lrelu(self.refine(x)))
        return cloudy + x


class AlignCR(nn.Module):
    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.fe_opt = FeatureExtractor(4, cfg.channels, "optical")
        if cfg.use_sar:
            self.fe_sar = FeatureExtractor(2, cfg.channels, "sar")
        self.blocks = nn.ModuleList(AlignFuseBlock(cfg, i) for i in range(cfg.D))
        self.reconstruct = Reconstruction(cfg.D, cfg.channels)

    def alignment_parameters(self):
        return [p for b in self.blocks if b.use_align for p in b.align.parameters()]

    def param_groups(self):
        """(alignment parameters, everything else)."""
        align_ids = {id(p) for p in self.alignment_parameters()}
        rest = [p for p in self.parameters() if id(p) not in align_ids]
        return self.alignment_parameters(), rest

    def forward(self, cloudy, sar=None, mask=None, return_aux=False):
        """Unclamped restoration of ``cloudy`` (B, 4, H, W).

        ``sar`` is (B, 2, 3H/10, 3W/10) and ``mask`` (B, 1, H, W); both are
        ignored when the model was built with ``use_sar=False``. With
        ``return_aux`` a dict with the per-block optical features and offset
        fields is returned as well.
        """
        H, W = cloudy.shape[-2:]
        ws = self.cfg.window_size
        if H % 4 or W % 4 or H % ws or W % ws:
            raise ValueError(f"extent {H}x{W} must be divisible by 4 and by window size {ws}")
        f_opt = self.fe_opt(cloudy)
        f_sar = None
        if self.cfg.use_sar:
            if sar is None or mask is None:
                raise ValueError("this model needs SAR and cloud mask inputs")
            up = upsample_nearest(sar)
            if up.shape[-2:] != (H, W):
                raise ValueError(f"SAR extent {tuple(sar.shape[-2:])} is not 3/10 of optical {H}x{W}")
            f_sar = self.fe_sar(up)
        intermediates, all_fields = [], []
        for block in self.blocks:
            f_opt, f_sar, fields = block(f_opt, f_sar, mask, return_fields=True)
            intermediates.append(f_opt)
            all_fields.append(fields)
        out = self.reconstruct(intermediates, cloudy)
        if return_aux:
            return out, {"intermediates": intermediates, "fields": all_fields}
        return out

    @torch.no_grad()
    def predict(self, cloudy, sar=None, mask=None, keep_intermediates=False, keep_fields=False):
        """Inference on arbitrary extents (multiples of 10): inputs are
        reflect-padded to a multiple of lcm(10, 4, window) and the output is
        cropped back and clamped to [0, 1]."""
        unbatched = cloudy.dim() == 3
        if unbatched:
            cloudy = cloudy[None]
            sar = None if sar is None else sar[None]
            mask = None if mask is None else mask[None]
        H, W = cloudy.shape[-2:]
        unit = _lcm(_lcm(10, 4), self.cfg.window_size)
        ph, pw = -H % unit, -W % unit
        if ph or pw:
            if ph % 10 or pw % 10:
                raise ValueError(f"extent {H}x{W} cannot be padded congruently with SAR")
            cloudy = F.pad(cloudy, (0, pw, 0, ph), mode="reflect")
            if self.cfg.use_sar:
                sar = F.pad(sar, (0, pw * 3 // 10, 0, ph * 3 // 10), mode="reflect")
                mask = F.pad(mask, (0, pw, 0, ph), mode="reflect")
        out, aux = self.forward(cloudy, sar, mask, return_aux=True)
        image = out[..., :H, :W].clamp(0.0, 1.0)
        inter = [f[..., :H, :W] for f in aux["intermediates"]] if keep_intermediates else None
        fields = None
        if keep_fields:
            fields = [
                None if fs is None else {k: _crop_field(f, H, W) for k, f in fs.items()}
                for fs in aux["fields"]
            ]
        if unbatched:
            image = image[0]
        return Prediction(image, inter, fields)


def _crop_field(field, H, W):
    if field.level > 1:
        s = 2 ** (field.level - 1)
        H, W = H // s, W // s
    return type(field)(field.offsets[..., :H, :W], field.modulation[..., :H, :W], field.level)


def _lcm(a, b):
    import math

    return a * b // math.gcd(a, b)


def feature_map(t, stream, block_index=0):
    return FeatureMap(t, stream, block_index)


def parameter_report(model):
    """Parameter count per top-level submodule plus the total."""
    report = {}
    for name, mod in model.named_children():
        report[name] = sum(p.numel() for p in mod.parameters())
    report["total"] = sum(p.numel() for p in model.parameters())
    return report

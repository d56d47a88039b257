"""Compiled bilinear gather/scatter kernels for deformable convolution.

Kernels work channels-last so the channels of one offset group are adjacent
(N = batch * offset_groups, Cg = channels per group):

    x        (N, H, W, Cg)
    offsets  (N, KK, 2, H, W)   (dx, dy) per tap, feature pixels
    mod      (N, KK, H, W)
    cols     (N, KK, H, W, Cg)  modulated bilinear samples

Corners outside the image read as zero. At integer sample positions the
interpolation weights are exactly (1, 0, 0, 0), so the sampled value is the
pixel value bit for bit.
"""

import math

import numba
import numpy as np
import torch


@numba.njit(cache=True)
def _forward(x, offsets, mod, K, cols):
    N, H, W, Cg = x.shape
    half = K // 2
    for n in range(N):
        for k in range(K * K):
            ky = k // K - half
            kx = k % K - half
            for i in range(H):
                for j in range(W):
                    sx = j + kx + offsets[n, k, 0, i, j]
                    sy = i + ky + offsets[n, k, 1, i, j]
                    fx0 = math.floor(sx)
                    fy0 = math.floor(sy)
                    fx = sx - fx0
                    fy = sy - fy0
                    x0 = int(fx0)
                    y0 = int(fy0)
                    if y0 < -1 or y0 >= H or x0 < -1 or x0 >= W:
                        for c in range(Cg):
                            cols[n, k, i, j, c] = 0.0
                        continue
                    m = mod[n, k, i, j]
                    w00 = m * ((1 - fy) * (1 - fx))
                    w01 = m * ((1 - fy) * fx)
                    w10 = m * (fy * (1 - fx))
                    w11 = m * (fy * fx)
                    in_y0 = y0 >= 0
                    in_y1 = y0 + 1 < H
                    in_x0 = x0 >= 0
                    in_x1 = x0 + 1 < W
                    for c in range(Cg):
                        v00 = x[n, y0, x0, c] if in_y0 and in_x0 else 0.0
                        v01 = x[n, y0, x0 + 1, c] if in_y0 and in_x1 else 0.0
                        v10 = x[n, y0 + 1, x0, c] if in_y1 and in_x0 else 0.0
                        v11 = x[n, y0 + 1, x0 + 1, c] if in_y1 and in_x1 else 0.0
                        cols[n, k, i, j, c] = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11


@numba.njit(cache=True)
def _backward(x, offsets, mod, K, gcols, gx, goff, gmod):
    N, H, W, Cg = x.shape
    half = K // 2
    for n in range(N):
        for k in range(K * K):
            ky = k // K - half
            kx = k % K - half
            for i in range(H):
                for j in range(W):
                    sx = j + kx + offsets[n, k, 0, i, j]
                    sy = i + ky + offsets[n, k, 1, i, j]
                    fx0 = math.floor(sx)
                    fy0 = math.floor(sy)
                    fx = sx - fx0
                    fy = sy - fy0
                    x0 = int(fx0)
                    y0 = int(fy0)
                    if y0 < -1 or y0 >= H or x0 < -1 or x0 >= W:
                        continue
                    m = mod[n, k, i, j]
                    w00 = (1 - fy) * (1 - fx)
                    w01 = (1 - fy) * fx
                    w10 = fy * (1 - fx)
                    w11 = fy * fx
                    in_y0 = y0 >= 0
                    in_y1 = y0 + 1 < H
                    in_x0 = x0 >= 0
                    in_x1 = x0 + 1 < W
                    acc_m = 0.0
                    acc_x = 0.0
                    acc_y = 0.0
                    for c in range(Cg):
                        g = gcols[n, k, i, j, c]
                        v00 = x[n, y0, x0, c] if in_y0 and in_x0 else 0.0
                        v01 = x[n, y0, x0 + 1, c] if in_y0 and in_x1 else 0.0
                        v10 = x[n, y0 + 1, x0, c] if in_y1 and in_x0 else 0.0
                        v11 = x[n, y0 + 1, x0 + 1, c] if in_y1 and in_x1 else 0.0
                        acc_m += g * (w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11)
                        gm = g * m
                        acc_x += gm * ((1 - fy) * (v01 - v00) + fy * (v11 - v10))
                        acc_y += gm * ((1 - fx) * (v10 - v00) + fx * (v11 - v01))
                        if in_y0:
                            if in_x0:
                                gx[n, y0, x0, c] += gm * w00
                            if in_x1:
                                gx[n, y0, x0 + 1, c] += gm * w01
                        if in_y1:
                            if in_x0:
                                gx[n, y0 + 1, x0, c] += gm * w10
                            if in_x1:
                                gx[n, y0 + 1, x0 + 1, c] += gm * w11
                    gmod[n, k, i, j] = acc_m
                    goff[n, k, 0, i, j] = acc_x
                    goff[n, k, 1, i, j] = acc_y


def _np(t):
    return t.detach().contiguous().numpy()


class DeformSample(torch.autograd.Function):
    """Modulated bilinear sampling at every kernel tap.

    Takes ``x`` as (N, Cg, H, W) and returns columns (N, Cg, KK, H, W).
    """

    @staticmethod
    def forward(ctx, x, offsets, mod, K):
        ctx.K = K
        xl = _np(x.permute(0, 2, 3, 1))
        N, H, W, Cg = xl.shape
        cols = np.empty((N, K * K, H, W, Cg), dtype=xl.dtype)
        _forward(xl, _np(offsets), _np(mod), K, cols)
        ctx.save_for_backward(x, offsets, mod)
        return torch.from_numpy(cols).permute(0, 4, 1, 2, 3)

    @staticmethod
    def backward(ctx, gcols):
        x, offsets, mod = ctx.saved_tensors
        xl = _np(x.permute(0, 2, 3, 1))
        oa, ma = _np(offsets), _np(mod)
        ga = _np(gcols.permute(0, 2, 3, 4, 1))
        gx = np.zeros_like(xl)
        goff = np.zeros_like(oa)
        gmod = np.zeros_like(ma)
        _backward(xl, oa, ma, ctx.K, ga, gx, goff, gmod)
        return torch.from_numpy(gx).permute(0, 3, 1, 2), torch.from_numpy(goff), torch.from_numpy(gmod), None

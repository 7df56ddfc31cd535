"""Volumetric primitives: 3D convolution, trilinear sampling, upsampling.

Volumes are channel-first [C, D, H, W] float64 arrays. Sampling coordinates
are absolute voxel positions in a [3, ...] array ordered (depth, height,
width); out-of-bounds positions clamp to the border voxel.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, _finish, as_tensor
from .errors import ShapeError


def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _tap_slices(k: int, stride: int, out_extents: tuple[int, int, int]):
    do, ho, wo = out_extents
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                yield (slice(None), slice(dz, dz + stride * do, stride),
                       slice(dy, dy + stride * ho, stride),
                       slice(dx, dx + stride * wo, stride))


def conv3d(x: Tensor, kernels: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate [C_in,D,H,W] with [C_out,C_in,k,k,k]; zero padding.

    The forward pass gathers the k^3 taps into one column matrix and runs a
    single GEMM; the backward pass reuses the same layout.
    """
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    c_in, d, h, w = x.data.shape
    c_out, c_in_k, k, k2, k3 = kernels.data.shape
    if c_in_k != c_in:
        raise ShapeError(f"conv3d: input channels {c_in} vs kernel {c_in_k}")
    if not (k == k2 == k3) or k % 2 == 0:
        raise ShapeError(f"conv3d: kernel must be cubic with odd extent, got {kernels.data.shape}")
    do, ho, wo = (_conv_out_extent(n, k, stride, padding) for n in (d, h, w))
    if min(do, ho, wo) < 1:
        raise ShapeError(f"conv3d: output extent ({do},{ho},{wo}) < 1")

    p = padding
    taps, m = k ** 3, do * ho * wo
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data

    def build_col() -> np.ndarray:
        col = np.empty((taps, c_in, do, ho, wo))
        for t, sl in enumerate(_tap_slices(k, stride, (do, ho, wo))):
            col[t] = xp[sl]
        return col.reshape(taps * c_in, m)

    # Kernel as [c_out, taps*c_in] with tap-major columns, matching build_col.
    k2d = np.ascontiguousarray(kernels.data.transpose(0, 2, 3, 4, 1)).reshape(c_out, -1)
    out = (k2d @ build_col()).reshape(c_out, do, ho, wo)

    def grad_x(g):
        dcol = (k2d.T @ g.reshape(c_out, m)).reshape(taps, c_in, do, ho, wo)
        gxp = np.zeros_like(xp)
        for t, sl in enumerate(_tap_slices(k, stride, (do, ho, wo))):
            gxp[sl] += dcol[t]
        return gxp[:, p:p + d, p:p + h, p:p + w] if p else gxp

    def grad_k(g):
        gk = g.reshape(c_out, m) @ build_col().T
        return np.ascontiguousarray(
            gk.reshape(c_out, k, k, k, c_in).transpose(0, 4, 1, 2, 3))

    return _finish(out, [(x, grad_x), (kernels, grad_k)])


def depthwise_conv3d(x: Tensor, kernels: Tensor, padding: int = 1) -> Tensor:
    """Per-channel cross-correlation of [C,D,H,W] with [C,k,k,k]; stride 1."""
    x = as_tensor(x)
    kernels = as_tensor(kernels)
    c, d, h, w = x.data.shape
    ck, k, k2, k3 = kernels.data.shape
    if ck != c:
        raise ShapeError(f"depthwise_conv3d: channels {c} vs kernel {ck}")
    if not (k == k2 == k3) or k % 2 == 0:
        raise ShapeError(f"depthwise_conv3d: kernel must be cubic with odd extent")
    do, ho, wo = (_conv_out_extent(n, k, 1, padding) for n in (d, h, w))
    if min(do, ho, wo) < 1:
        raise ShapeError(f"depthwise_conv3d: output extent ({do},{ho},{wo}) < 1")

    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    kd = kernels.data
    out = np.zeros((c, do, ho, wo))
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                out += kd[:, dz, dy, dx, None, None, None] * \
                    xp[:, dz:dz + do, dy:dy + ho, dx:dx + wo]

    def grad_x(g):
        gxp = np.zeros_like(xp)
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    gxp[:, dz:dz + do, dy:dy + ho, dx:dx + wo] += \
                        kd[:, dz, dy, dx, None, None, None] * g
        return gxp[:, p:p + d, p:p + h, p:p + w] if p else gxp

    def grad_k(g):
        gk = np.empty_like(kd)
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    gk[:, dz, dy, dx] = np.sum(
                        g * xp[:, dz:dz + do, dy:dy + ho, dx:dx + wo], axis=(1, 2, 3))
        return gk

    return _finish(out, [(x, grad_x), (kernels, grad_k)])


# ---------------------------------------------------------------------------
# Trilinear sampling
# ---------------------------------------------------------------------------

def _corner_setup(coords: np.ndarray, dims: tuple[int, int, int]):
    """Clamped corner indices and fractional offsets for trilinear sampling."""
    lows, fracs, masks = [], [], []
    for axis, n in enumerate(dims):
        c = np.clip(coords[axis], 0.0, n - 1.0)
        lo = np.minimum(np.floor(c), n - 2).astype(np.intp) if n > 1 else np.zeros(c.shape, np.intp)
        lows.append(lo)
        fracs.append(c - lo if n > 1 else np.zeros_like(c))
        # Interior mask: clamped positions have zero derivative w.r.t. coords.
        masks.append((coords[axis] > 0.0) & (coords[axis] < n - 1.0))
    return lows, fracs, masks


def _trilinear_gather(vol: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Pure-numpy trilinear sampling of [C,D,H,W] at [3,*out] absolute coords."""
    c = vol.shape[0]
    d, h, w = vol.shape[1:]
    out_shape = coords.shape[1:]
    lows, fracs, _ = _corner_setup(coords.reshape(3, -1), (d, h, w))
    flat = vol.reshape(c, -1)
    out = np.zeros((c, lows[0].size))
    for bz in (0, 1):
        wz = fracs[0] if bz else 1.0 - fracs[0]
        iz = np.minimum(lows[0] + bz, d - 1)
        for by in (0, 1):
            wy = fracs[1] if by else 1.0 - fracs[1]
            iy = np.minimum(lows[1] + by, h - 1)
            for bx in (0, 1):
                wx = fracs[2] if bx else 1.0 - fracs[2]
                ix = np.minimum(lows[2] + bx, w - 1)
                idx = (iz * h + iy) * w + ix
                out += flat[:, idx] * (wz * wy * wx)
    return out.reshape(c, *out_shape)


def _scatter_add(c: int, size: int, idx: np.ndarray, contrib: np.ndarray) -> np.ndarray:
    """Sum [C, M] contributions into a [C, size] buffer at flat indices idx."""
    offsets = (np.arange(c, dtype=np.intp)[:, None] * size + idx[None, :]).ravel()
    return np.bincount(offsets, weights=contrib.ravel(), minlength=c * size).reshape(c, size)


def grid_sample_trilinear(x: Tensor, coords: Tensor | np.ndarray) -> Tensor:
    """Trilinear interpolation of [C,D,H,W] at absolute voxel coords [3,*out].

    Differentiable in both the volume and the coordinates; out-of-bounds
    coordinates clamp to the border (zero coordinate gradient there).
    """
    x = as_tensor(x)
    coords = as_tensor(coords)
    if x.data.ndim != 4:
        raise ShapeError(f"grid_sample: volume must be [C,D,H,W], got {x.data.shape}")
    if coords.data.ndim < 2 or coords.data.shape[0] != 3:
        raise ShapeError(f"grid_sample: coords must be [3,...], got {coords.data.shape}")
    c = x.data.shape[0]
    d, h, w = x.data.shape[1:]
    out_shape = coords.data.shape[1:]
    cflat = coords.data.reshape(3, -1)
    m = cflat.shape[1]
    lows, fracs, masks = _corner_setup(cflat, (d, h, w))
    flat = x.data.reshape(c, -1)

    corners = []  # (flat index, weight, per-axis signs) reused by all backward rules
    out = np.zeros((c, m))
    for bz in (0, 1):
        wz = fracs[0] if bz else 1.0 - fracs[0]
        iz = np.minimum(lows[0] + bz, d - 1)
        for by in (0, 1):
            wy = fracs[1] if by else 1.0 - fracs[1]
            iy = np.minimum(lows[1] + by, h - 1)
            for bx in (0, 1):
                wx = fracs[2] if bx else 1.0 - fracs[2]
                ix = np.minimum(lows[2] + bx, w - 1)
                idx = (iz * h + iy) * w + ix
                weight = wz * wy * wx
                corners.append((idx, weight, (bz, by, bx), (wz, wy, wx)))
                out += flat[:, idx] * weight

    def grad_x(g):
        gf = g.reshape(c, -1)
        gx = np.zeros((c, d * h * w))
        for idx, weight, _, _ in corners:
            gx += _scatter_add(c, d * h * w, idx, gf * weight)
        return gx.reshape(x.data.shape)

    def grad_coords(g):
        gf = g.reshape(c, -1)
        gc = np.zeros((3, m))
        for idx, _, signs, ws in corners:
            vals = (flat[:, idx] * gf).sum(axis=0)
            for axis in range(3):
                sign = 1.0 if signs[axis] else -1.0
                others = 1.0
                for other in range(3):
                    if other != axis:
                        others = others * ws[other]
                gc[axis] += sign * others * vals
        for axis in range(3):
            gc[axis] *= masks[axis]
        return gc.reshape(coords.data.shape)

    return _finish(out.reshape(c, *out_shape), [(x, grad_x), (coords, grad_coords)])


def _double_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Linear interpolation at half-pixel-aligned positions along one axis.

    out[2i] = 0.25*x[i-1] + 0.75*x[i], out[2i+1] = 0.75*x[i] + 0.25*x[i+1],
    with neighbors clamped at the borders.
    """
    n = x.shape[axis]
    shape = list(x.shape)
    shape[axis] = 2 * n
    out = np.empty(shape)

    def sl(lo=None, hi=None, step=None):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(lo, hi, step)
        return tuple(idx)

    prev = np.concatenate([x[sl(0, 1)], x[sl(None, n - 1)]], axis=axis)
    nxt = np.concatenate([x[sl(1, None)], x[sl(n - 1, None)]], axis=axis)
    out[sl(0, None, 2)] = 0.25 * prev + 0.75 * x
    out[sl(1, None, 2)] = 0.75 * x + 0.25 * nxt
    return out


def _double_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of ``_double_axis``: scatter doubled-axis gradients back."""
    n = g.shape[axis] // 2

    def sl(lo=None, hi=None, step=None):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(lo, hi, step)
        return tuple(idx)

    ge, go = g[sl(0, None, 2)], g[sl(1, None, 2)]
    dx = 0.75 * (ge + go)
    dx[sl(None, n - 1)] += 0.25 * ge[sl(1, None)]
    dx[sl(0, 1)] += 0.25 * ge[sl(0, 1)]
    dx[sl(1, None)] += 0.25 * go[sl(None, n - 1)]
    dx[sl(n - 1, None)] += 0.25 * go[sl(n - 1, None)]
    return dx


def upsample_trilinear_2x(x: Tensor) -> Tensor:
    """Double each spatial extent of [C,D,H,W] by trilinear interpolation.

    Equivalent to sampling at half-pixel-aligned coordinates with border
    clamp, computed separably per axis.
    """
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"upsample expects [C,D,H,W], got {x.data.shape}")
    out = x.data
    for axis in (1, 2, 3):
        out = _double_axis(out, axis)

    def grad_x(g):
        for axis in (3, 2, 1):
            g = _double_axis_adjoint(g, axis)
        return g

    return _finish(out, [(x, grad_x)])


def nearest_sample(vol: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Nearest-neighbor lookup of [D,H,W] (any dtype) at absolute coords [3,D,H,W]."""
    d, h, w = vol.shape
    iz = np.clip(np.rint(coords[0]), 0, d - 1).astype(np.intp)
    iy = np.clip(np.rint(coords[1]), 0, h - 1).astype(np.intp)
    ix = np.clip(np.rint(coords[2]), 0, w - 1).astype(np.intp)
    return vol[iz, iy, ix]

"""Displacement-field algebra: warping, composition, recursion, Jacobians.

A displacement field is a [3, D, H, W] array of voxel-unit offsets; warping
pulls values from position x + u(x). Functions accept either autodiff Tensors
(differentiable path) or plain numpy arrays (evaluation path).
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ShapeError
from .spatial import _trilinear_gather, grid_sample_trilinear, nearest_sample


@lru_cache(maxsize=32)
def identity_grid(shape: tuple[int, int, int]) -> np.ndarray:
    """Absolute voxel coordinates [3,D,H,W] of every grid position."""
    axes = [np.arange(n, dtype=np.float64) for n in shape]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"))
    grid.setflags(write=False)
    return grid


def _field_shape(u) -> tuple[int, int, int]:
    data = u.data if isinstance(u, Tensor) else u
    if data.ndim != 4 or data.shape[0] != 3:
        raise ShapeError(f"displacement field must be [3,D,H,W], got {data.shape}")
    return data.shape[1:]


def warp(vol, u, mode: str = "trilinear"):
    """Pull-warp a volume by a displacement field: out(x) = vol(x + u(x)).

    Trilinear mode accepts [D,H,W] or [C,D,H,W] volumes (Tensor or ndarray)
    and is differentiable in both arguments; nearest mode is for integer
    label volumes and returns an ndarray of the input dtype.
    """
    shape = _field_shape(u)
    vol_data = vol.data if isinstance(vol, Tensor) else vol
    if vol_data.shape[-3:] != shape:
        raise ShapeError(f"volume extents {vol_data.shape} do not match field {shape}")

    if mode == "nearest":
        if vol_data.ndim != 3:
            raise ShapeError("nearest warp expects a [D,H,W] volume")
        u_data = u.data if isinstance(u, Tensor) else u
        return nearest_sample(vol_data, identity_grid(shape) + u_data)
    if mode != "trilinear":
        raise ValueError(f"unknown warp mode {mode!r}")

    squeeze = vol_data.ndim == 3
    if isinstance(vol, Tensor) or isinstance(u, Tensor):
        vol_t = as_tensor(vol)
        if squeeze:
            vol_t = ad.reshape(vol_t, (1, *shape))
        coords = ad.add(as_tensor(u), Tensor(identity_grid(shape)))
        out = grid_sample_trilinear(vol_t, coords)
        return ad.reshape(out, shape) if squeeze else out
    out = _trilinear_gather(vol_data[None] if squeeze else vol_data,
                            identity_grid(shape) + u)
    return out[0] if squeeze else out


def compose(u_prev, u_res):
    """Combine two fields so warp(warp(v, u_prev), u_res) ~= warp(v, result).

    result(x) = u_res(x) + u_prev(x + u_res(x)), sampled trilinearly with
    border clamp. The zero field is a two-sided identity at lattice points.
    """
    shape = _field_shape(u_prev)
    if _field_shape(u_res) != shape:
        raise ShapeError("compose: field shapes differ")
    if isinstance(u_prev, Tensor) or isinstance(u_res, Tensor):
        u_prev_t, u_res_t = as_tensor(u_prev), as_tensor(u_res)
        coords = ad.add(u_res_t, Tensor(identity_grid(shape)))
        return ad.add(u_res_t, grid_sample_trilinear(u_prev_t, coords))
    return u_res + _trilinear_gather(u_prev, identity_grid(shape) + u_res)


def recursive_register(model, i_src, i_tgt, k: int):
    """Coarse-to-fine registration: warp, predict residual, compose, repeat.

    Returns (final_field, [field_1 .. field_k]). The model is invoked exactly
    k times; level fields satisfy phi_k = compose(phi_{k-1}, residual_k).
    """
    if k < 1:
        raise ValueError(f"recursion depth must be >= 1, got {k}")
    i_src, i_tgt = as_tensor(i_src), as_tensor(i_tgt)
    cached_tgt = model.extract_features(i_tgt)
    fields = []
    phi = None
    for _ in range(k):
        warped = i_src if phi is None else warp(i_src, phi)
        residual = model.register_features(model.extract_features(warped), cached_tgt)
        phi = residual if phi is None else compose(phi, residual)
        fields.append(phi)
    return phi, fields


def jacobian_det(u: np.ndarray) -> np.ndarray:
    """det(I + grad(u)) per voxel; central differences interior, one-sided at borders."""
    u = u.data if isinstance(u, Tensor) else np.asarray(u, dtype=np.float64)
    shape = _field_shape(u)
    if min(shape) < 2:
        raise ShapeError(f"jacobian_det needs extents >= 2, got {shape}")
    jac = np.empty((3, 3) + shape)
    for comp in range(3):
        for axis in range(3):
            jac[comp, axis] = np.gradient(u[comp], axis=axis, edge_order=1)
        jac[comp, comp] += 1.0
    a, b, c = jac[0]
    d, e, f = jac[1]
    g, h, i = jac[2]
    return a * (e * i - f * h) - b * (d * i - f * g) + c * (d * h - e * g)

"""3D cross-scan: flatten a volume into six directional sequences, scan, merge.

Each direction linearizes the [D, H, W] grid with one named axis varying
slowest (the named axis is swapped into the leading slot of the default
depth-height-width order), traversed forward or reversed. The six orderings
are bijections, so gather followed by scatter is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ShapeError
from .spatial import depthwise_conv3d
from .ssm import SsmBlockParams, discretize_zoh, init_ssm_params, scan_parallel, selective_params


@dataclass(frozen=True)
class ScanDirection:
    """A voxel traversal order: spatial axes slowest-to-fastest, plus reversal."""

    axis_order: tuple[int, int, int]
    reverse: bool

    def permutation(self, shape: tuple[int, int, int]) -> np.ndarray:
        """Flat voxel indices (row-major) in traversal order."""
        perm = np.arange(int(np.prod(shape)), dtype=np.intp).reshape(shape)
        perm = perm.transpose(self.axis_order).ravel()
        return perm[::-1].copy() if self.reverse else perm


# Depth-major is the native row-major order; height- and width-major swap the
# named axis into the slowest slot.
DIRECTIONS: tuple[ScanDirection, ...] = tuple(
    ScanDirection(order, rev)
    for order in ((0, 1, 2), (1, 0, 2), (2, 1, 0))
    for rev in (False, True)
)


@lru_cache(maxsize=64)
def _direction_perms(shape: tuple[int, int, int]) -> tuple[np.ndarray, ...]:
    return tuple(d.permutation(shape) for d in DIRECTIONS)


def cross_scan(x: Tensor) -> list[Tensor]:
    """Gather a [C,D,H,W] volume into six [L,C] sequences, L = D*H*W."""
    x = as_tensor(x)
    c = x.data.shape[0]
    shape = x.data.shape[1:]
    length = int(np.prod(shape))
    flat = ad.reshape(x, (c, length))
    return [ad.transpose(ad.permute_axis(flat, perm, axis=1), (1, 0))
            for perm in _direction_perms(shape)]


def cross_merge(ys: list[Tensor], shape: tuple[int, int, int]) -> Tensor:
    """Scatter six [L,C] sequences back through their inverse orders and sum.

    Summation is pairwise in direction order, which keeps
    cross_merge(cross_scan(x)) == 6*x bit-exact.
    """
    length = int(np.prod(shape))
    perms = _direction_perms(shape)
    if len(ys) != len(perms):
        raise ShapeError(f"cross_merge: expected {len(perms)} sequences, got {len(ys)}")
    vols = []
    for y, perm in zip(ys, perms):
        y = as_tensor(y)
        if y.data.shape[0] != length:
            raise ShapeError(f"cross_merge: sequence length {y.data.shape[0]} "
                             f"does not match volume {shape}")
        inv = np.argsort(perm)
        vols.append(ad.permute_axis(ad.transpose(y, (1, 0)), inv, axis=1))
    pair01 = ad.add(vols[0], vols[1])
    pair23 = ad.add(vols[2], vols[3])
    pair45 = ad.add(vols[4], vols[5])
    total = ad.add(ad.add(pair01, pair23), pair45)
    c = vols[0].data.shape[0]
    return ad.reshape(total, (c, *shape))


# ---------------------------------------------------------------------------
# VSS block
# ---------------------------------------------------------------------------

@dataclass
class VssBlockWeights:
    """Shared projections, depthwise conv, norms, and six per-direction scans."""

    ln1_gamma: Tensor
    ln1_beta: Tensor
    in_proj_w: Tensor
    in_proj_b: Tensor
    gate_proj_w: Tensor
    gate_proj_b: Tensor
    dw_kernel: Tensor
    dw_bias: Tensor
    ln2_gamma: Tensor
    ln2_beta: Tensor
    out_proj_w: Tensor
    out_proj_b: Tensor
    ssm: list[SsmBlockParams] = field(default_factory=list)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for k in ("ln1_gamma", "ln1_beta", "in_proj_w", "in_proj_b", "gate_proj_w",
                  "gate_proj_b", "dw_kernel", "dw_bias", "ln2_gamma", "ln2_beta",
                  "out_proj_w", "out_proj_b"):
            out[f"{prefix}.{k}"] = getattr(self, k)
        for i, p in enumerate(self.ssm):
            out.update(p.named(f"{prefix}.dir{i}"))
        return out


def init_vss_block(rng: np.random.Generator, channels: int, state_size: int) -> VssBlockWeights:
    s = 1.0 / np.sqrt(channels)
    return VssBlockWeights(
        ln1_gamma=ad.parameter(np.ones(channels)),
        ln1_beta=ad.parameter(np.zeros(channels)),
        in_proj_w=ad.parameter(rng.normal(0.0, s, (channels, channels))),
        in_proj_b=ad.parameter(np.zeros(channels)),
        gate_proj_w=ad.parameter(rng.normal(0.0, s, (channels, channels))),
        gate_proj_b=ad.parameter(np.zeros(channels)),
        dw_kernel=ad.parameter(rng.normal(0.0, 1.0 / np.sqrt(27.0), (channels, 3, 3, 3))),
        dw_bias=ad.parameter(np.zeros(channels)),
        ln2_gamma=ad.parameter(np.ones(channels)),
        ln2_beta=ad.parameter(np.zeros(channels)),
        out_proj_w=ad.parameter(rng.normal(0.0, s, (channels, channels))),
        out_proj_b=ad.parameter(np.zeros(channels)),
        ssm=[init_ssm_params(rng, channels, state_size) for _ in DIRECTIONS],
    )


def _channels_last(x: Tensor) -> Tensor:
    return ad.transpose(x, (1, 2, 3, 0))


def _channels_first(x: Tensor) -> Tensor:
    return ad.transpose(x, (3, 0, 1, 2))


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Layer norm over the channel axis of a [C,D,H,W] volume."""
    return _channels_first(ad.layer_norm(_channels_last(x), gamma, beta))


def channel_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-voxel linear map over the channel axis of a [C,D,H,W] volume."""
    return _channels_first(ad.linear(_channels_last(x), w, b))


def _scan_all_directions(seqs: list[Tensor], ssm: list[SsmBlockParams],
                         block: int) -> list[Tensor]:
    """Run the six directional scans as one batched recurrence.

    Per-direction selective projections stay separate (independent weights);
    the directions are then stacked along the channel axis so the recurrence
    kernel runs once over [L, 6C, N].
    """
    channels = seqs[0].data.shape[1]
    deltas, bs, cs = zip(*(selective_params(seq, p) for seq, p in zip(seqs, ssm)))
    a_diag = ad.concat([p.a_diag() for p in ssm], axis=0)
    a_bar, b_bar = discretize_zoh(a_diag, ad.concat(bs, axis=1), ad.concat(deltas, axis=1))
    y_all = scan_parallel(ad.concat(seqs, axis=1), a_bar, b_bar,
                          ad.concat(cs, axis=1),
                          ad.concat([p.d_skip for p in ssm], axis=0), block=block)
    return [ad.narrow(y_all, 1, i * channels, channels) for i in range(len(seqs))]


def vss_block(x: Tensor, w: VssBlockWeights, block: int = 64) -> Tensor:
    """Residual visual state-space block on a [C,D,H,W] volume."""
    x = as_tensor(x)
    shape = x.data.shape[1:]
    channels = x.data.shape[0]
    normed = channel_norm(x, w.ln1_gamma, w.ln1_beta)
    t = channel_linear(normed, w.in_proj_w, w.in_proj_b)
    t = depthwise_conv3d(t, w.dw_kernel, padding=1)
    t = ad.silu(ad.add(t, ad.reshape(w.dw_bias, (channels, 1, 1, 1))))
    ys = _scan_all_directions(cross_scan(t), w.ssm, block)
    merged = channel_norm(cross_merge(ys, shape), w.ln2_gamma, w.ln2_beta)
    gate = ad.silu(channel_linear(normed, w.gate_proj_w, w.gate_proj_b))
    return ad.add(x, channel_linear(ad.mul(merged, gate), w.out_proj_w, w.out_proj_b))

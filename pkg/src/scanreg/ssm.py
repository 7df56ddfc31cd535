"""Selective state-space scan: discretization, reference and parallel kernels.

Sequences are [L, C] arrays; per-position state tensors are [L, C, N] with N
states per channel. The state matrix is diagonal, real, and strictly negative,
parameterized as -exp(a_log) so that discretization always contracts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .errors import ContractError, NumericsError, ShapeError


@dataclass
class SsmBlockParams:
    """Learnable parameters of one directional scan.

    a_log:   [C, N]  log-magnitudes; state matrix diagonal is -exp(a_log)
    d_skip:  [C]     per-channel skip gain
    w_delta: [C, C], b_delta: [C]   input projection for the step size
    w_b:     [C, C*N]  input projection for the state input gains
    w_c:     [C, C*N]  input projection for the state readout
    """

    a_log: Tensor
    d_skip: Tensor
    w_delta: Tensor
    b_delta: Tensor
    w_b: Tensor
    w_c: Tensor

    @property
    def channels(self) -> int:
        return self.a_log.data.shape[0]

    @property
    def state_size(self) -> int:
        return self.a_log.data.shape[1]

    def a_diag(self) -> Tensor:
        return ad.neg(ad.exp(self.a_log))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k)
                for k in ("a_log", "d_skip", "w_delta", "b_delta", "w_b", "w_c")}


def init_ssm_params(rng: np.random.Generator, channels: int, state_size: int) -> SsmBlockParams:
    """Stable default initialization: decay rates 1..N, unit skip, small projections."""
    a_log = np.tile(np.log(np.arange(1, state_size + 1, dtype=np.float64)), (channels, 1))
    proj_scale = 1.0 / np.sqrt(channels)
    return SsmBlockParams(
        a_log=ad.parameter(a_log),
        d_skip=ad.parameter(np.ones(channels)),
        w_delta=ad.parameter(rng.normal(0.0, proj_scale, (channels, channels))),
        b_delta=ad.parameter(np.zeros(channels)),
        w_b=ad.parameter(rng.normal(0.0, proj_scale, (channels, channels * state_size))),
        w_c=ad.parameter(rng.normal(0.0, proj_scale, (channels, channels * state_size))),
    )


# ---------------------------------------------------------------------------
# Discretization
# ---------------------------------------------------------------------------

def discretize_zoh(a_diag: Tensor, b: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Exact zero-order-hold step: a_bar = exp(delta*a), b_bar = (a_bar-1)/a * b.

    a_diag is [C,N] (strictly negative), b is [L,C,N], delta is [L,C] and must
    be nonnegative; delta == 0 yields the exact limit (a_bar=1, b_bar=0).
    """
    a_diag, b, delta = as_tensor(a_diag), as_tensor(b), as_tensor(delta)
    if np.any(a_diag.data >= 0):
        raise ContractError("discretize_zoh: state diagonal must be strictly negative")
    if np.any(delta.data < 0):
        raise ContractError("discretize_zoh: delta must be nonnegative")
    length, channels = delta.data.shape
    d3 = ad.reshape(delta, (length, channels, 1))
    a_bar = ad.exp(ad.mul(d3, a_diag))
    b_bar = ad.mul(ad.div(ad.add_const(a_bar, -1.0), a_diag), b)
    return a_bar, b_bar


def discretize_euler(b: Tensor, delta: Tensor) -> Tensor:
    """First-order step: b_bar = delta * b (comparison baseline for the exact rule)."""
    b, delta = as_tensor(b), as_tensor(delta)
    length, channels = delta.data.shape
    return ad.mul(ad.reshape(delta, (length, channels, 1)), b)


def selective_params(x: Tensor, p: SsmBlockParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent step size, input gains, and readout for a [L,C] sequence."""
    x = as_tensor(x)
    length, channels = x.data.shape
    n = p.state_size
    delta = ad.clamp_min(ad.softplus(ad.linear(x, p.w_delta, p.b_delta)), 1e-6)
    b = ad.reshape(ad.linear(x, p.w_b), (length, channels, n))
    c = ad.reshape(ad.linear(x, p.w_c), (length, channels, n))
    return delta, b, c


# ---------------------------------------------------------------------------
# Recurrence kernels (pure numpy)
# ---------------------------------------------------------------------------

def combine_scan_pairs(p1, p2):
    """Associative operator on (a, b) pairs: later element second."""
    a1, b1 = p1
    a2, b2 = p2
    return a2 * a1, a2 * b1 + b2


def recurrence_sequential(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Reference kernel for h[k] = a[k]*h[k-1] + b[k], h[-1] = 0."""
    out = np.empty_like(b)
    h = np.zeros_like(b[0])
    for k in range(b.shape[0]):
        h = a[k] * h + b[k]
        out[k] = h
    return out


def recurrence_blocked(a: np.ndarray, b: np.ndarray, block: int = 64) -> np.ndarray:
    """Blocked tree evaluation of the same recurrence.

    Within-block scans run vectorized across blocks, block carries are combined
    sequentially, then carries are broadcast back through each block. The result
    matches the sequential kernel up to floating-point reassociation.
    """
    length = a.shape[0]
    if length == 0:
        return np.empty_like(b)
    block = max(1, min(block, length))
    nblocks = -(-length // block)
    pad = nblocks * block - length
    if pad:
        # (a=1, b=0) is the identity element of the pair operator.
        a = np.concatenate([a, np.ones((pad,) + a.shape[1:])])
        b = np.concatenate([b, np.zeros((pad,) + b.shape[1:])])
    ab = a.reshape(nblocks, block, *a.shape[1:])
    bb = b.reshape(nblocks, block, *b.shape[1:])

    h = np.empty_like(bb)  # within-block states assuming zero entry state
    coef = np.multiply.accumulate(ab, axis=1)  # running products of a per block
    h[:, 0] = bb[:, 0]
    for t in range(1, block):
        np.multiply(ab[:, t], h[:, t - 1], out=h[:, t])
        h[:, t] += bb[:, t]

    carry = np.zeros_like(bb[0, 0])  # exit state of the previous block
    carries = np.empty_like(bb[:, 0])
    for g in range(nblocks):
        carries[g] = carry
        carry = coef[g, -1] * carry + h[g, -1]

    out = h + coef * carries[:, None]
    return out.reshape(nblocks * block, *a.shape[1:])[:length]


# ---------------------------------------------------------------------------
# Selective scan as a differentiable operation
# ---------------------------------------------------------------------------

def _scan_forward_backward(x, a_bar, b_bar, c_out, d_skip, kernel):
    xd, ad_, bd, cd, dd = x.data, a_bar.data, b_bar.data, c_out.data, d_skip.data
    length, channels = xd.shape
    if ad_.shape != bd.shape or ad_.shape != cd.shape or ad_.shape[:2] != (length, channels):
        raise ShapeError(f"scan: state tensors {ad_.shape}/{bd.shape}/{cd.shape} "
                         f"inconsistent with sequence {xd.shape}")
    if dd.shape != (channels,):
        raise ShapeError(f"scan: skip gain shape {dd.shape}, expected ({channels},)")

    bx = bd * xd[:, :, None]
    h = kernel(ad_, bx)
    y = np.einsum("lcn,lcn->lc", cd, h) + dd * xd
    if not (np.isfinite(y).all() and np.isfinite(h[-1]).all()):
        raise NumericsError("scan produced non-finite values")

    def backward_rules(g):
        # Adjoint of the state recurrence runs the same kernel time-reversed:
        # lam[k] = c[k]*g[k] + a[k+1]*lam[k+1].
        src = cd * g[:, :, None]
        a_rev = np.concatenate([np.zeros((1, channels, ad_.shape[2])), ad_[:0:-1]])
        lam = kernel(a_rev, src[::-1])[::-1]
        h_prev = np.concatenate([np.zeros((1, channels, ad_.shape[2])), h[:-1]])
        grads = {
            "x": np.einsum("lcn,lcn->lc", bd, lam) + dd * g,
            "a": lam * h_prev,
            "b": lam * xd[:, :, None],
            "c": g[:, :, None] * h,
            "d": (g * xd).sum(axis=0),
        }
        return grads

    cache: dict = {}

    def cached(g, key):
        if cache.get("g_id") != id(g):
            cache["grads"] = backward_rules(g)
            cache["g_id"] = id(g)
        return cache["grads"][key]

    return ad._finish(y, [
        (x, lambda g: cached(g, "x")),
        (a_bar, lambda g: cached(g, "a")),
        (b_bar, lambda g: cached(g, "b")),
        (c_out, lambda g: cached(g, "c")),
        (d_skip, lambda g: cached(g, "d")),
    ])


def scan_sequential(x, a_bar, b_bar, c_out, d_skip) -> Tensor:
    """Run the state recurrence with the sequential reference kernel."""
    return _scan_forward_backward(as_tensor(x), as_tensor(a_bar), as_tensor(b_bar),
                                  as_tensor(c_out), as_tensor(d_skip),
                                  recurrence_sequential)


def scan_parallel(x, a_bar, b_bar, c_out, d_skip, block: int = 64) -> Tensor:
    """Run the state recurrence with the blocked associative kernel."""
    return _scan_forward_backward(as_tensor(x), as_tensor(a_bar), as_tensor(b_bar),
                                  as_tensor(c_out), as_tensor(d_skip),
                                  lambda a, b: recurrence_blocked(a, b, block))


def run_selective_scan(x: Tensor, p: SsmBlockParams, block: int = 64) -> Tensor:
    """Full selective pass over one [L,C] sequence: project, discretize, scan."""
    delta, b, c = selective_params(x, p)
    a_bar, b_bar = discretize_zoh(p.a_diag(), b, delta)
    return scan_parallel(x, a_bar, b_bar, c, p.d_skip, block=block)

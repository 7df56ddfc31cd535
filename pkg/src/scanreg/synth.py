"""Deterministic synthetic volume pairs: labeled pseudo-anatomy under smooth
nonrigid motion with a simulated cross-modality appearance gap.

Every generator is a pure function of its arguments; the same seed always
produces bitwise-identical output.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .fields import warp
from .spatial import _trilinear_gather


def derive_seed(root: int, tag: str) -> int:
    """Split one root seed into independent streams: root XOR hash(tag)."""
    digest = hashlib.blake2s(tag.encode(), digest_size=8).digest()
    return (int(root) ^ int.from_bytes(digest, "little")) & (2**63 - 1)


def _as_extents(extents) -> tuple[int, int, int]:
    if isinstance(extents, int):
        return (extents,) * 3
    e = tuple(int(v) for v in extents)
    if len(e) != 3:
        raise ContractError(f"extents must be an int or a 3-tuple, got {extents!r}")
    return e


def _smooth_noise(rng: np.random.Generator, extents, spacing: int, ncomp: int = 1) -> np.ndarray:
    """Low-frequency noise: a coarse random grid trilinearly resampled to full size."""
    coarse_shape = tuple(int(np.ceil((n - 1) / spacing)) + 1 for n in extents)
    coarse = rng.standard_normal((ncomp, *coarse_shape))
    axes = [np.arange(n, dtype=np.float64) / spacing for n in extents]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    return _trilinear_gather(coarse, coords)


def gen_base(seed: int, extents, n_labels: int) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-anatomy: nested blob-shaped structures with per-label intensities.

    Returns (image in [0,1] float64, labels int32). Labels are quantile bands
    of a smooth bump field, so each of the n_labels ids covers a guaranteed
    share of the volume.
    """
    extents = _as_extents(extents)
    if min(extents) < 8:
        raise ContractError(f"extents {extents} too small for structures (need >= 8)")
    if n_labels < 2:
        raise ContractError(f"need background plus at least one structure, got {n_labels}")
    rng = np.random.default_rng(seed)

    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in extents],
                                indexing="ij"))
    bump = np.zeros(extents)
    for _ in range(n_labels + 1):
        center = np.array([rng.uniform(0.28, 0.72) * (n - 1) for n in extents])
        sigma = np.array([rng.uniform(0.12, 0.22) * n for n in extents])
        d2 = sum(((grid[a] - center[a]) / sigma[a]) ** 2 for a in range(3))
        bump += rng.uniform(0.5, 1.0) * np.exp(-0.5 * d2)

    # Quantile bands: ~62% background, the rest split evenly across structures.
    fracs = np.linspace(0.62, 1.0, n_labels)[:-1]
    thresholds = np.quantile(bump, fracs)
    labels = np.searchsorted(thresholds, bump, side="right").astype(np.int32)

    base = np.linspace(0.15, 0.9, n_labels)
    rng.shuffle(base)
    image = base[labels] + 0.04 * _smooth_noise(rng, extents, spacing=4)[0]
    image = np.clip(image, 0.0, 1.0)
    return image, labels


def random_smooth_field(seed: int, extents, amplitude_vox: float,
                        smoothness: float) -> np.ndarray:
    """Low-frequency displacement field with max |u| scaled to amplitude_vox.

    Built per component from a coarse grid with spacing ``smoothness`` voxels;
    amplitudes up to about smoothness/3 stay fold-free.
    """
    extents = _as_extents(extents)
    if amplitude_vox < 0:
        raise ContractError(f"amplitude must be >= 0, got {amplitude_vox}")
    if amplitude_vox == 0:
        return np.zeros((3, *extents))
    rng = np.random.default_rng(seed)
    u = _smooth_noise(rng, extents, spacing=int(max(2, round(smoothness))), ncomp=3)
    peak = np.abs(u).max()
    if peak > 0:
        u *= amplitude_vox / peak
    return u


@dataclass
class PairSample:
    """A source/target pair with labels and the generating ground-truth field."""

    i_src: np.ndarray
    i_tgt: np.ndarray
    s_src: np.ndarray
    s_tgt: np.ndarray
    u_gt: np.ndarray
    seed: int


def gen_pair(seed: int, extents, n_labels: int, amplitude: float,
             smoothness: float | None = None) -> PairSample:
    """Generate a multi-modality-style pair differing in geometry and appearance.

    The target is the warped base image pushed through a per-label contrast
    inversion and gamma curve, so source and target intensities disagree even
    where the anatomy aligns. Target labels are the nearest-warped source
    labels, making u_gt an exact label-level ground truth.
    """
    extents = _as_extents(extents)
    if smoothness is None:
        smoothness = max(6.0, 0.375 * min(extents))
    image, labels = gen_base(derive_seed(seed, "base"), extents, n_labels)
    u_gt = random_smooth_field(derive_seed(seed, "field"), extents, amplitude, smoothness)

    warped = warp(image, u_gt) if amplitude > 0 else image.copy()
    s_tgt = warp(labels, u_gt, mode="nearest") if amplitude > 0 else labels.copy()

    rng = np.random.default_rng(derive_seed(seed, "style"))
    gammas = rng.uniform(0.6, 1.7, n_labels)
    i_tgt = np.empty_like(warped)
    for v in range(n_labels):
        mask = s_tgt == v
        vals = np.clip(warped[mask], 0.0, 1.0)
        if v % 2 == 1:
            vals = 1.0 - vals
        i_tgt[mask] = vals ** gammas[v]
    i_tgt += 0.02 * _smooth_noise(rng, extents, spacing=4)[0]
    i_tgt = np.clip(i_tgt, 0.0, 1.0)

    return PairSample(i_src=image, i_tgt=i_tgt, s_src=labels, s_tgt=s_tgt,
                      u_gt=u_gt, seed=seed)

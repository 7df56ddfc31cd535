"""Evaluation metrics: label overlap, 95% surface distance, fold detection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import MetricUndefined, ShapeError
from .fields import jacobian_det

_SIX_CONN = ndimage.generate_binary_structure(3, 1)


def _foreground_labels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    labels = np.union1d(np.unique(a), np.unique(b))
    return labels[labels != 0]


def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """Mean Dice overlap (percent) over foreground labels present in either volume."""
    if a.shape != b.shape:
        raise ShapeError(f"dice_score: shapes {a.shape} vs {b.shape}")
    labels = _foreground_labels(a, b)
    if labels.size == 0:
        raise MetricUndefined("dice_score: no foreground labels in either volume")
    scores = []
    for v in labels:
        am, bm = a == v, b == v
        denom = am.sum() + bm.sum()
        scores.append(2.0 * np.logical_and(am, bm).sum() / denom)
    return 100.0 * float(np.mean(scores))


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """[M,3] coordinates of foreground voxels with a six-connected background neighbor.

    The outside of the volume counts as background, so border foreground
    voxels are surface voxels.
    """
    eroded = ndimage.binary_erosion(mask, structure=_SIX_CONN, border_value=0)
    return np.argwhere(mask & ~eroded)


def hd95(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over labels of the 95th percentile of bidirectional surface distances.

    Distances from each surface voxel of one volume to the nearest surface
    voxel of the other are pooled in both directions; the percentile uses
    linear interpolation between order statistics. Labels empty on one side
    are excluded; if every label is excluded the metric is undefined.
    """
    if a.shape != b.shape:
        raise ShapeError(f"hd95: shapes {a.shape} vs {b.shape}")
    labels = _foreground_labels(a, b)
    if labels.size == 0:
        raise MetricUndefined("hd95: no foreground labels in either volume")
    values = []
    for v in labels:
        am, bm = a == v, b == v
        if not am.any() or not bm.any():
            continue
        sa, sb = surface_voxels(am), surface_voxels(bm)
        d_ab = cKDTree(sb).query(sa)[0]
        d_ba = cKDTree(sa).query(sb)[0]
        values.append(float(np.percentile(np.concatenate([d_ab, d_ba]), 95.0)))
    if not values:
        raise MetricUndefined("hd95: all labels empty on one side")
    return float(np.mean(values))


def per_label_scores(a: np.ndarray, b: np.ndarray) -> dict[int, dict[str, float | None]]:
    """Dice and HD95 per foreground label; HD95 is None where undefined."""
    out = {}
    for v in _foreground_labels(a, b):
        am, bm = a == v, b == v
        denom = am.sum() + bm.sum()
        entry = {"dice_pct": 100.0 * 2.0 * np.logical_and(am, bm).sum() / denom,
                 "hd95_vox": None}
        if am.any() and bm.any():
            sa, sb = surface_voxels(am), surface_voxels(bm)
            d = np.concatenate([cKDTree(sb).query(sa)[0], cKDTree(sa).query(sb)[0]])
            entry["hd95_vox"] = float(np.percentile(d, 95.0))
        out[int(v)] = entry
    return out


def njd_pct(u: np.ndarray) -> float:
    """Percentage of voxels whose local Jacobian determinant is non-positive."""
    det = jacobian_det(u)
    return 100.0 * float(np.mean(det <= 0.0))


@dataclass
class MetricsReport:
    """Registration quality for one volume pair."""

    dice_pct: float
    hd95_vox: float | None
    njd_pct: float | None
    per_label: dict = field(default_factory=dict)
    inference_time_s: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "dice_pct": self.dice_pct,
            "hd95_vox": self.hd95_vox,
            "njd_pct": self.njd_pct,
            "per_label": {str(k): v for k, v in self.per_label.items()},
            "time_s": self.inference_time_s,
        }


def evaluate_labels(warped_src_labels: np.ndarray, tgt_labels: np.ndarray,
                    u: np.ndarray | None = None,
                    inference_time_s: float | None = None) -> MetricsReport:
    """Assemble a report comparing warped source labels against the target."""
    try:
        hd = hd95(warped_src_labels, tgt_labels)
    except MetricUndefined:
        hd = None
    return MetricsReport(
        dice_pct=dice_score(warped_src_labels, tgt_labels),
        hd95_vox=hd,
        njd_pct=None if u is None else njd_pct(u),
        per_label=per_label_scores(warped_src_labels, tgt_labels),
        inference_time_s=inference_time_s,
    )

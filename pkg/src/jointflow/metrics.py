"""Assembly metrics: rotation/translation error, part accuracy and chamfer distance.

Conventions (fixed, and only comparable internally):

* chamfer: squared nearest-neighbour distances, averaged per direction, then
  the two directions averaged.
* rotation error: Euler angles (intrinsic Z-Y-X) of the relative rotation
  ``gt^T pred``, RMSE over the three angles, in degrees. At gimbal lock the
  last angle is set to zero.
* reported scales: TE x 1e2, CD x 1e3.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import EmptyInput, ShapeMismatch
from .manifold import PoseState

PA_THRESHOLD = 1e-2
TE_SCALE = 1e2
CD_SCALE = 1e3


def _nn_sq(src: np.ndarray, dst: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Squared distance from each point of ``src`` to its nearest point in ``dst`` (exact brute force)."""
    out = np.empty(len(src))
    for start in range(0, len(src), chunk):
        diff = src[start:start + chunk, None, :] - dst[None, :, :]
        d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
        out[start:start + chunk] = d2.min(axis=1)
    return out


def chamfer_terms(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """One-directional mean squared NN distances (a->b, b->a)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise EmptyInput("chamfer distance needs two non-empty point sets")
    return math.fsum(_nn_sq(a, b)) / len(a), math.fsum(_nn_sq(b, a)) / len(b)


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    ab, ba = chamfer_terms(a, b)
    return 0.5 * (ab + ba)


def euler_zyx(r: np.ndarray) -> np.ndarray:
    """Intrinsic Z-Y-X angles (yaw, pitch, roll) in degrees."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # gimbal lock notice
        return Rotation.from_matrix(np.asarray(r, dtype=np.float64)).as_euler("ZYX", degrees=True)


def rotation_residuals(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-part Euler residuals ``(..., 3)`` of ``gt^T pred`` in degrees."""
    rel = np.swapaxes(np.asarray(gt), -1, -2) @ np.asarray(pred)
    return euler_zyx(rel)


def rotation_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """RMSE over Euler residual angles, degrees (pooled over all parts when batched)."""
    res = rotation_residuals(pred, gt)
    return float(np.sqrt(np.mean(res**2)))


def translation_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """RMSE over translation components (pooled over all parts when batched)."""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return float(np.sqrt(np.mean(diff**2)))


def part_chamfers(pred: PoseState, gt: PoseState, fragments: list[np.ndarray]) -> np.ndarray:
    if len(pred) != len(gt) or len(gt) != len(fragments):
        raise ShapeMismatch(f"{len(pred)} predicted poses, {len(gt)} gt poses, {len(fragments)} fragments")
    return np.array([chamfer(pred[i].apply(p), gt[i].apply(p)) for i, p in enumerate(fragments)])


def part_accuracy(pred: PoseState, gt: PoseState, fragments: list[np.ndarray],
                  threshold: float = PA_THRESHOLD) -> float:
    """Percentage of parts whose posed-point chamfer to ground truth is strictly below ``threshold``."""
    cds = part_chamfers(pred, gt, fragments)
    return 100.0 * float(np.mean(cds < threshold))


@dataclass
class SampleRecord:
    """Per-sample sums from which every report field can be recomputed."""

    index: int
    category: str
    num_parts: int
    rot_sq_sum: float
    trans_sq_sum: float
    parts_correct: int
    cd: float
    part_cds: list[float] = field(default_factory=list)
    missing: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def score_sample(index: int, category: str, pred: PoseState, gt: PoseState, fragments: list[np.ndarray],
                 assembled: np.ndarray, reference: np.ndarray, missing: int = 0) -> SampleRecord:
    res = rotation_residuals(pred.rotation, gt.rotation)
    diff = pred.translation - gt.translation
    cds = part_chamfers(pred, gt, fragments)
    return SampleRecord(
        index=index,
        category=category,
        num_parts=len(fragments),
        rot_sq_sum=float(np.sum(res**2)),
        trans_sq_sum=float(np.sum(diff**2)),
        parts_correct=int(np.sum(cds < PA_THRESHOLD)),
        cd=chamfer(assembled, reference),
        part_cds=[float(c) for c in cds],
        missing=missing,
    )


@dataclass
class MetricsReport:
    RE: float
    TE: float
    PA: float
    CD: float
    num_samples: int
    num_parts: int
    per_category: dict = field(default_factory=dict)
    header: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _summary(records: list[SampleRecord]) -> dict:
    parts = sum(r.num_parts for r in records)
    return {
        "RE": math.sqrt(sum(r.rot_sq_sum for r in records) / (3 * parts)),
        "TE": TE_SCALE * math.sqrt(sum(r.trans_sq_sum for r in records) / (3 * parts)),
        "PA": 100.0 * sum(r.parts_correct for r in records) / parts,
        "CD": CD_SCALE * sum(r.cd for r in records) / len(records),
        "num_samples": len(records),
        "num_parts": parts,
    }


def aggregate(records: list[SampleRecord], header: dict | None = None) -> MetricsReport:
    if not records:
        raise EmptyInput("no samples to aggregate")
    cats = sorted({r.category for r in records})
    per_cat = {c: _summary([r for r in records if r.category == c]) for c in cats}
    return MetricsReport(**_summary(records), per_category=per_cat, header=header or {})

"""Assembly samples: generation, pose noising and missing-part variants."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..errors import FractureFailed, TooFewParts
from ..manifold import PoseState, sample_uniform_rotation
from .fracture import Fragment, fracture, split_by_labels
from .shapes import FRACTURE_KINDS, PART_KINDS, Shape, make_shape

SILHOUETTE_RES = 64
SILHOUETTE_EXTENT = 0.75
TRANSLATION_NOISE = 0.5


@dataclass
class DataConfig:
    family: str = "fracture"  # "fracture" or "parts"
    kinds: tuple[str, ...] | None = None
    min_parts: int = 2
    max_parts: int = 20
    whole_points: int = 2048
    whole_queries: int = 512
    near_surface_points: int = 2048
    near_surface_sigma: float = 0.02
    uniform_points: int = 1024
    min_fragment_fraction: float = 0.0

    def __post_init__(self):
        if self.family not in ("fracture", "parts"):
            raise ValueError(f"unknown family {self.family!r}")
        if not 2 <= self.min_parts <= self.max_parts <= 20:
            raise ValueError("part range must satisfy 2 <= min_parts <= max_parts <= 20")
        if self.kinds is None:
            self.kinds = FRACTURE_KINDS if self.family == "fracture" else PART_KINDS
        self.kinds = tuple(self.kinds)


@dataclass
class AssemblySample:
    fragments: list[Fragment]
    gt_poses: PoseState
    whole_points: np.ndarray
    whole_queries: np.ndarray
    sdf_points: np.ndarray
    sdf_values: np.ndarray
    silhouette: np.ndarray
    view_axis: np.ndarray
    category: str
    missing_mask: np.ndarray = field(default=None)
    family: str = "fracture"
    reference_points: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.missing_mask is None:
            self.missing_mask = np.zeros(len(self.fragments), dtype=bool)

    @property
    def num_parts(self) -> int:
        return len(self.fragments)

    @property
    def observed(self) -> list[int]:
        return [i for i in range(self.num_parts) if not self.missing_mask[i]]

    @property
    def areas(self) -> np.ndarray:
        return np.array([f.area for f in self.fragments])


def farthest_point_order(points: np.ndarray, k: int, start: int = 0) -> np.ndarray:
    """Indices of ``k`` points chosen greedily by farthest-point sampling."""
    k = min(k, len(points))
    idx = np.empty(k, dtype=np.int64)
    idx[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, k):
        idx[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[idx[i]], axis=1))
    return idx


def orthonormal_frame(axis: np.ndarray) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return np.stack([u, np.cross(axis, u), axis])


def render_silhouette(sdf, axis: np.ndarray, res: int = SILHOUETTE_RES, extent: float = SILHOUETTE_EXTENT,
                      depth_samples: int = 128) -> np.ndarray:
    """Orthographic occupancy image looking along ``axis``; values in {0, 1}."""
    u, v, w = orthonormal_frame(np.asarray(axis, dtype=np.float64))
    coords = (np.arange(res) + 0.5) / res * 2 * extent - extent
    depth = np.linspace(-1.8, 1.8, depth_samples)
    img = np.zeros((res, res), dtype=np.float32)
    for row, y in enumerate(coords[::-1]):
        pts = (coords[:, None, None] * u + y * v + depth[None, :, None] * w)
        img[row] = (sdf(pts.reshape(-1, 3)).reshape(res, depth_samples) < 0).any(axis=1)
    return img


def build_sample(config: DataConfig, rng: np.random.Generator, max_attempts: int = 10) -> AssemblySample:
    """One canonical sample (identity ground-truth poses, nothing missing)."""
    for _ in range(max_attempts):
        kind = str(config.kinds[rng.integers(len(config.kinds))])
        shape = make_shape(kind, rng)
        points, labels, area = shape.sample_surface(config.whole_points, rng)
        if config.family == "fracture":
            num_parts = int(rng.integers(config.min_parts, config.max_parts + 1))
            try:
                fragments = fracture(shape, num_parts, rng, points=points, surface_area=area,
                                     min_fraction=config.min_fragment_fraction)
            except FractureFailed:
                continue
        else:
            fragments = split_by_labels(points, labels, area)
            if not config.min_parts <= len(fragments) <= config.max_parts:
                raise ValueError(f"{kind} has {len(fragments)} parts, outside the configured range")
        return _finish_sample(shape, fragments, points, config, rng)
    raise FractureFailed(f"no valid fracture after {max_attempts} shapes")


def _finish_sample(shape: Shape, fragments, points, config: DataConfig, rng) -> AssemblySample:
    # farthest-point order inside each fragment: any prefix is then a well-spread subsample
    fragments = [Fragment(f.id, f.points[farthest_point_order(f.points, len(f.points))], f.area)
                 for f in fragments]
    # independent surface draw used as the ground-truth shape when scoring chamfer distance
    reference, _, _ = shape.sample_surface(config.whole_points, rng)
    queries = points[farthest_point_order(points, config.whole_queries, start=int(rng.integers(len(points))))]
    near_src, _, _ = shape.sample_surface(config.near_surface_points, rng)
    near = near_src + config.near_surface_sigma * rng.standard_normal(near_src.shape)
    uniform = rng.uniform(-1.0, 1.0, size=(config.uniform_points, 3))
    sdf_points = np.clip(np.concatenate([near, uniform]), -1.0, 1.0)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return AssemblySample(
        fragments=fragments,
        gt_poses=PoseState.identity(len(fragments)),
        whole_points=points,
        whole_queries=queries,
        sdf_points=sdf_points,
        sdf_values=shape.sdf(sdf_points),
        silhouette=render_silhouette(shape.sdf, axis),
        view_axis=axis,
        category=shape.kind,
        family=config.family,
        reference_points=reference,
    )


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` under master ``seed``."""
    return np.random.default_rng([int(seed), int(index)])


def generate_samples(config: DataConfig, n: int, seed: int, start: int = 0):
    for i in range(start, start + n):
        yield build_sample(config, sample_rng(seed, i))


def randomize_poses(sample: AssemblySample, rng: np.random.Generator, identity: bool = False,
                    translation_noise: float = TRANSLATION_NOISE):
    """Scramble every fragment; returns (noised point sets, poses mapping them back).

    Each fragment is recentred on its centroid, rotated by a Haar-uniform
    rotation and shifted by isotropic Gaussian noise.
    """
    noised, rots, trans = [], [], []
    for frag in sample.fragments:
        if identity:
            noised.append(frag.points.copy())
            rots.append(np.eye(3))
            trans.append(np.zeros(3))
            continue
        c = frag.points.mean(axis=0)
        r = sample_uniform_rotation(rng)
        shift = translation_noise * rng.standard_normal(3)
        noised.append((frag.points - c) @ r.T + shift)
        rots.append(r.T)
        trans.append(c - r.T @ shift)
    return noised, PoseState(np.stack(rots), np.stack(trans))


def drop_parts(sample: AssemblySample, drop_fraction: float, rng: np.random.Generator,
               count: int | None = None) -> AssemblySample:
    """Mark ``ceil(drop_fraction * N)`` (or ``count``) random parts as missing."""
    n = sample.num_parts
    if count is None:
        if not 0.0 <= drop_fraction < 1.0:
            raise ValueError("drop_fraction must be in [0, 1)")
        count = int(np.ceil(drop_fraction * n - 1e-12))
    if count == 0:
        return sample
    if n - count < 2:
        raise TooFewParts(f"dropping {count} of {n} parts would leave fewer than 2")
    mask = np.zeros(n, dtype=bool)
    mask[rng.choice(n, size=count, replace=False)] = True
    return dataclasses.replace(sample, missing_mask=mask)

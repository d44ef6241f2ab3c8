"""Virtual fracturing by recursive planar cuts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ..errors import FractureFailed
from .shapes import Shape

MIN_FRAGMENT_POINTS = 16
MAX_PARTS = 20


@dataclass
class Fragment:
    id: int
    points: np.ndarray
    area: float


def is_connected(points: np.ndarray, radius: float) -> bool:
    if len(points) < 2:
        return True
    pairs = cKDTree(points).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        return False
    from scipy.sparse import coo_matrix

    n = len(points)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    n_comp, _ = connected_components(graph, directed=False)
    return n_comp == 1


def _interior_point(shape: Shape, planes: list, rng: np.random.Generator, fallback: np.ndarray) -> np.ndarray:
    for _ in range(20):
        cand = rng.uniform(-1.0, 1.0, size=(4096, 3))
        ok = shape.sdf(cand) < 0
        for normal, offset in planes:
            ok &= cand @ normal <= offset
        hits = np.flatnonzero(ok)
        if len(hits):
            return cand[hits[0]]
    return fallback


def fracture(
    shape: Shape,
    num_parts: int,
    rng: np.random.Generator,
    points: np.ndarray | None = None,
    surface_area: float | None = None,
    min_points: int = MIN_FRAGMENT_POINTS,
    min_fraction: float = 0.0,
    max_retries: int = 20,
) -> list[Fragment]:
    """Split the surface sample of ``shape`` into ``num_parts`` connected pieces.

    Each cut is a plane through a random interior point of the piece being
    split, with a uniformly random normal; the largest piece is always cut
    next. Fragments partition ``points`` and their areas partition the
    surface area.
    """
    if not 2 <= num_parts <= MAX_PARTS:
        raise ValueError(f"num_parts must be in [2, {MAX_PARTS}], got {num_parts}")
    if points is None:
        points, _, surface_area = shape.sample_surface(2048, rng)
    elif surface_area is None:
        raise ValueError("surface_area is required when points are given")
    n = len(points)
    min_count = max(min_points, int(np.ceil(min_fraction * n)))
    # a few mean point spacings: enough to bridge sampling gaps, small enough to see real gaps
    radius = 3.0 * np.sqrt(surface_area / n)

    labels = np.zeros(n, dtype=np.int64)
    planes: list[list[tuple[np.ndarray, float]]] = [[]]
    while len(planes) < num_parts:
        target = int(np.argmax(np.bincount(labels, minlength=len(planes))))
        members = np.flatnonzero(labels == target)
        for _ in range(max_retries):
            origin = _interior_point(shape, planes[target], rng, points[members].mean(axis=0))
            normal = rng.normal(size=3)
            normal /= np.linalg.norm(normal)
            side = (points[members] - origin) @ normal > 0
            a, b = members[~side], members[side]
            if min(len(a), len(b)) < min_count:
                continue
            if not (is_connected(points[a], radius) and is_connected(points[b], radius)):
                continue
            break
        else:
            raise FractureFailed(f"could not split a piece of {len(members)} points after {max_retries} tries")
        offset = float(normal @ origin)
        labels[b] = len(planes)
        planes.append(planes[target] + [(-normal, -offset)])
        planes[target] = planes[target] + [(normal, offset)]

    counts = np.bincount(labels, minlength=num_parts)
    return [
        Fragment(i, points[labels == i], surface_area * counts[i] / n) for i in range(num_parts)
    ]


def split_by_labels(points: np.ndarray, labels: np.ndarray, surface_area: float) -> list[Fragment]:
    """Semantic-part fragments: one per distinct label, in label order."""
    out = []
    for i, lab in enumerate(np.unique(labels)):
        sel = labels == lab
        out.append(Fragment(i, points[sel], surface_area * sel.sum() / len(points)))
    return out

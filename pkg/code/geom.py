"""
Point-cloud container, normalization, farthest point sampling, k-nearest
neighbour grouping and spatial-center computation.

Every selection in this module breaks exact ties by comparing coordinates
lexicographically (x, then y, then z) and never by row index, so that for
clouds with pairwise-distinct coordinates the results do not depend on the
order in which the points are stored.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy.spatial import cKDTree

import config
from errors import BadCountError, NonFiniteError, ShapeMismatchError

logger = logging.getLogger(__name__)


class CenterMode(str, Enum):
    QUERY_POINT = "query_point"
    SPATIAL_CENTER = "spatial_center"


@dataclass(frozen=True)
class PointCloud:
    """An immutable N x 3 point set with optional per-point features.

    Attributes:
        coords: (N, 3) float64 coordinates.
        feats: Optional (N, C) float64 feature rows.
        label: Optional class index.
    """
    coords: np.ndarray
    feats: Optional[np.ndarray] = None
    label: Optional[int] = None

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ShapeMismatchError(
                f"coords must have shape (N, 3), got {coords.shape}")
        if coords.shape[0] < 1:
            raise BadCountError("a point cloud needs at least one point")
        if not np.all(np.isfinite(coords)):
            raise NonFiniteError("point coordinates must be finite")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

        if self.feats is not None:
            feats = np.array(self.feats, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != coords.shape[0]:
                raise ShapeMismatchError(
                    f"feats must have {coords.shape[0]} rows, "
                    f"got shape {feats.shape}")
            feats.setflags(write=False)
            object.__setattr__(self, "feats", feats)

        if self.label is not None:
            label = int(self.label)
            if label < 0:
                raise ValueError(f"label must be >= 0, got {label}")
            object.__setattr__(self, "label", label)

    def __len__(self):
        return self.coords.shape[0]

    @property
    def feature_channels(self) -> int:
        return 0 if self.feats is None else self.feats.shape[1]

    def with_coords(self, coords: np.ndarray) -> "PointCloud":
        """Copy with new coordinates; features are kept only if N is unchanged."""
        feats = self.feats
        if feats is not None and len(coords) != len(feats):
            feats = None
        return PointCloud(coords=coords, feats=feats, label=self.label)


@dataclass(frozen=True)
class GroupIndex:
    """Grouping of a parent point set into M sets of K neighbours.

    Attributes:
        set_count: M.
        neighbor_count: K.
        indices: (M, K) rows into the parent points, nearest first.
        centers: (M, 3) query point coordinates (FPS picks).
        spatial_centers: (M, 3) mean of each set's member coordinates.
        query_indices: (M,) parent rows of the query points.
        center_mode: which of the two centers represents the set downstream.
    """
    set_count: int
    neighbor_count: int
    indices: np.ndarray
    centers: np.ndarray
    spatial_centers: np.ndarray
    query_indices: np.ndarray
    center_mode: CenterMode = CenterMode.SPATIAL_CENTER

    @property
    def output_centers(self) -> np.ndarray:
        if self.center_mode == CenterMode.QUERY_POINT:
            return self.centers
        return self.spatial_centers


PointsLike = Union[PointCloud, np.ndarray]


def _as_points(cloud: PointsLike) -> np.ndarray:
    if isinstance(cloud, PointCloud):
        return cloud.coords
    points = np.asarray(cloud, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeMismatchError(
            f"points must have shape (N, 3), got {points.shape}")
    return points


def ordered_mean(points: np.ndarray) -> np.ndarray:
    """Column mean that does not depend on row order.

    Each column is sorted before summation, so the floating point sum is
    the same for every permutation of the rows. Leading axes are batch axes:
    (..., n, 3) gives (..., 3).
    """
    return np.sort(points, axis=-2).sum(axis=-2) / points.shape[-2]


def squared_distances(points: np.ndarray, query: np.ndarray) -> np.ndarray:
    return ((points - query) ** 2).sum(axis=-1)


def lexicographic_order(points: np.ndarray) -> np.ndarray:
    """Row order sorting by x, then y, then z (stable)."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def _lexicographic_argmax(values: np.ndarray, points: np.ndarray) -> int:
    best = values.max()
    candidates = np.flatnonzero(values == best)
    if len(candidates) == 1:
        return int(candidates[0])
    tied = points[candidates]
    return int(candidates[lexicographic_order(tied)[0]])


def normalize(cloud: PointCloud) -> PointCloud:
    """Center the cloud on its centroid and scale it into the unit sphere.

    A cloud whose points all coincide is mapped to the origin and the scale
    step is skipped.
    """
    points = cloud.coords
    centered = points - ordered_mean(points)
    scale = np.sqrt((centered ** 2).sum(axis=1)).max()
    if scale > 0.0:
        centered = centered / scale
    else:
        centered = np.zeros_like(points)
    return PointCloud(coords=centered, feats=cloud.feats, label=cloud.label)


def fps(cloud: PointsLike, m: int) -> np.ndarray:
    """Greedy farthest point sampling.

    The first pick is the point farthest from the whole-cloud centroid; every
    later pick maximizes the distance to the nearest point already picked.

    Args:
        cloud: PointCloud or (N, 3) array.
        m: number of points to pick, 1 <= m <= N.

    Returns:
        np.ndarray: (m,) row indices in pick order.
    """
    points = _as_points(cloud)
    n = points.shape[0]
    if m < 1 or m > n:
        raise BadCountError(f"fps needs 1 <= m <= {n}, got m={m}")

    first = _lexicographic_argmax(
        squared_distances(points, ordered_mean(points)), points)
    picked = [first]
    min_dist = squared_distances(points, points[first])
    min_dist[first] = -np.inf
    for _ in range(1, m):
        nxt = _lexicographic_argmax(min_dist, points)
        picked.append(nxt)
        min_dist = np.minimum(min_dist, squared_distances(points, points[nxt]))
        min_dist[picked] = -np.inf
    return np.asarray(picked, dtype=np.int64)


def _knn_brute(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    dist = squared_distances(points[None, :, :], queries[:, None, :])
    shape = dist.shape
    keys = (
        np.broadcast_to(points[:, 2], shape),
        np.broadcast_to(points[:, 1], shape),
        np.broadcast_to(points[:, 0], shape),
        dist,
    )
    return np.lexsort(keys, axis=-1)[:, :k]


def _knn_tree(points: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    tree = cKDTree(points)
    kth, _ = tree.query(queries, k=[k])
    result = np.empty((len(queries), k), dtype=np.int64)
    for row, (query, radius) in enumerate(zip(queries, kth[:, 0])):
        # every point tied with the k-th distance must be a candidate
        radius = radius * (1.0 + 1e-9) + 1e-12
        candidates = np.asarray(
            tree.query_ball_point(query, radius), dtype=np.int64)
        result[row] = candidates[
            _knn_brute(points[candidates], query[None, :], k)[0]]
    return result


def knn_many(points: np.ndarray, queries: np.ndarray, k: int,
             backend: Optional[str] = None) -> np.ndarray:
    """k nearest neighbours of each query row, nearest first.

    Args:
        points: (N, 3) candidate points.
        queries: (M, 3) query coordinates.
        k: neighbours per query, 1 <= k <= N.
        backend: "brute" or "kdtree"; defaults to config.KNN_BACKEND.

    Returns:
        np.ndarray: (M, k) row indices into points.
    """
    points = _as_points(points)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    n = points.shape[0]
    if k < 1 or k > n:
        raise BadCountError(f"knn needs 1 <= k <= {n}, got k={k}")
    backend = backend or config.KNN_BACKEND
    if backend == "kdtree":
        return _knn_tree(points, queries, k)
    if backend != "brute":
        raise ValueError(f"unknown knn backend '{backend}'")
    return _knn_brute(points, queries, k)


def knn(cloud: PointsLike, query: np.ndarray, k: int,
        backend: Optional[str] = None) -> np.ndarray:
    """k nearest points to one query by Euclidean distance, nearest first."""
    return knn_many(_as_points(cloud), np.asarray(query)[None, :], k,
                    backend=backend)[0]


def _spatial_centers(points: np.ndarray, indices: np.ndarray) -> np.ndarray:
    return points[indices].mean(axis=1)


def group(cloud: PointsLike, m: int, k: int,
          center_mode: Union[CenterMode, str] = CenterMode.SPATIAL_CENTER,
          center_coords: Optional[np.ndarray] = None) -> GroupIndex:
    """Sample m query points with FPS and gather k neighbours around each.

    Args:
        cloud: parent PointCloud or (N, 3) array.
        m: number of sets.
        k: points per set.
        center_mode: which center represents each set at the next level.
        center_coords: coordinates of the previous level's set centers; when
            given, sampling and grouping run on them instead of the cloud.

    Returns:
        GroupIndex
    """
    points = _as_points(cloud if center_coords is None else center_coords)
    query_indices = fps(points, m)
    centers = points[query_indices]
    indices = knn_many(points, centers, k)
    return GroupIndex(
        set_count=m,
        neighbor_count=k,
        indices=indices,
        centers=centers,
        spatial_centers=_spatial_centers(points, indices),
        query_indices=query_indices,
        center_mode=CenterMode(center_mode),
    )


def regroup(points: np.ndarray, frozen: GroupIndex) -> GroupIndex:
    """Reuse a grouping on moved coordinates, recomputing both centers."""
    points = _as_points(points)
    if frozen.indices.max() >= points.shape[0]:
        raise BadCountError(
            "frozen grouping refers to rows beyond the point set")
    return GroupIndex(
        set_count=frozen.set_count,
        neighbor_count=frozen.neighbor_count,
        indices=frozen.indices,
        centers=points[frozen.query_indices],
        spatial_centers=_spatial_centers(points, frozen.indices),
        query_indices=frozen.query_indices,
        center_mode=frozen.center_mode,
    )

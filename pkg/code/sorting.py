"""
Spatial sorting strategies and ordered-feature assembly.

A sort key is a scalar per point; points are ordered by ascending key with
exact ties broken by lexicographic comparison of their coordinates. An
ordered feature matrix concatenates, along the channel axis, one copy of
the point features per strategy, each reordered by that strategy.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

import config
from errors import DegenerateRefError, NonFiniteError, ShapeMismatchError
from geom import ordered_mean

Vector = Tuple[float, float, float]

AXES = {
    "x": (1.0, 0.0, 0.0),
    "y": (0.0, 1.0, 0.0),
    "z": (0.0, 0.0, 1.0),
}

# plane name -> (normal, reference vector)
PLANES = {
    "xy": (AXES["z"], AXES["x"]),
    "yz": (AXES["x"], AXES["y"]),
    "xz": (AXES["y"], AXES["z"]),
}


class SortKind(str, Enum):
    APS = "aps"
    PCS = "pcs"
    EDS = "eds"


def _unit(vector, name: str) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (3,):
        raise ShapeMismatchError(f"{name} must be a 3-vector, got {v.shape}")
    if abs(np.linalg.norm(v) - 1.0) > 1e-9:
        raise ValueError(f"{name} must have unit norm, got {np.linalg.norm(v)}")
    return v


def _in_plane_reference(normal: np.ndarray, ref: np.ndarray) -> np.ndarray:
    projected = ref - np.dot(ref, normal) * normal
    length = np.linalg.norm(projected)
    if length <= config.DEGENERATE_REFERENCE:
        raise DegenerateRefError(
            "reference vector projects to zero on the sorting plane")
    return projected / length


@dataclass(frozen=True)
class SortStrategy:
    """One way of assigning a scalar key to every point of a set.

    Attributes:
        kind: APS, PCS or EDS.
        axis: projection axis (APS).
        normal: plane normal (PCS).
        ref: reference direction, projected onto the plane (PCS).
        center: fixed distance center (EDS); None uses the set's center.
    """
    kind: SortKind
    axis: Optional[Vector] = None
    normal: Optional[Vector] = None
    ref: Optional[Vector] = None
    center: Optional[Vector] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SortKind(self.kind))
        if self.kind == SortKind.APS:
            if self.axis is None:
                raise ValueError("APS needs an axis")
            _unit(self.axis, "axis")
        elif self.kind == SortKind.PCS:
            if self.normal is None or self.ref is None:
                raise ValueError("PCS needs a normal and a reference vector")
            _in_plane_reference(_unit(self.normal, "normal"),
                                _unit(self.ref, "ref"))
        for name in ("axis", "normal", "ref", "center"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(float(c) for c in value))

    def to_dict(self) -> dict:
        if self.kind == SortKind.APS:
            return {"kind": "aps", "axis": list(self.axis)}
        if self.kind == SortKind.PCS:
            return {"kind": "pcs", "normal": list(self.normal),
                    "ref": list(self.ref)}
        return {"kind": "eds",
                "center": None if self.center is None else list(self.center)}

    @classmethod
    def from_dict(cls, data: dict) -> "SortStrategy":
        return cls(kind=data["kind"], axis=data.get("axis"),
                   normal=data.get("normal"), ref=data.get("ref"),
                   center=data.get("center"))


@dataclass(frozen=True)
class SortPlan:
    """Ordered list of strategies; one feature block per strategy."""
    strategies: Tuple[SortStrategy, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        if len(self.strategies) < 1:
            raise ValueError("a sort plan needs at least one strategy")

    @property
    def n_sort(self) -> int:
        return len(self.strategies)

    def to_dict(self) -> dict:
        return {"strategies": [s.to_dict() for s in self.strategies]}

    @classmethod
    def from_dict(cls, data: dict) -> "SortPlan":
        return cls(tuple(SortStrategy.from_dict(s) for s in data["strategies"]))


def aps_plan(axes: str = "xyz") -> SortPlan:
    return SortPlan(tuple(SortStrategy(SortKind.APS, axis=AXES[a]) for a in axes))


def pcs_plan(planes: Sequence[str] = ("xy", "yz", "xz")) -> SortPlan:
    return SortPlan(tuple(
        SortStrategy(SortKind.PCS, normal=PLANES[p][0], ref=PLANES[p][1])
        for p in planes))


def eds_plan() -> SortPlan:
    return SortPlan((SortStrategy(SortKind.EDS),))


def parse_plan(text: str) -> SortPlan:
    """Build a plan from a compact description.

    Tokens are separated by "+" or ",": "aps" (x, y, z axes), "aps:x",
    "pcs" (XY, YZ, XZ planes), "pcs:yz", "eds". Example: "aps:x,aps:y+eds".
    """
    strategies = []
    for token in text.replace("+", ",").split(","):
        token = token.strip().lower()
        if not token:
            continue
        kind, _, arg = token.partition(":")
        if kind == "aps":
            strategies.extend(aps_plan(arg or "xyz").strategies)
        elif kind == "pcs":
            strategies.extend(
                pcs_plan([arg] if arg else ("xy", "yz", "xz")).strategies)
        elif kind == "eds" and not arg:
            strategies.append(SortStrategy(SortKind.EDS))
        else:
            raise ValueError(f"unknown sort token '{token}'")
    return SortPlan(tuple(strategies))


def aps_keys(points: np.ndarray, axis) -> np.ndarray:
    """Projection of each point onto a unit axis."""
    return (np.asarray(points, dtype=np.float64) * np.asarray(axis)).sum(axis=-1)


def pcs_keys(points: np.ndarray, normal, ref) -> np.ndarray:
    """Signed in-plane angle of each point, in (-pi, pi].

    Points are projected onto the plane through the origin with the given
    normal; the angle is measured from the in-plane reference direction,
    positive counter-clockwise about the normal. Points whose projection
    vanishes get key -pi.
    """
    points = np.asarray(points, dtype=np.float64)
    normal = np.asarray(normal, dtype=np.float64)
    ref_in_plane = _in_plane_reference(normal, np.asarray(ref, dtype=np.float64))

    projected = points - (points * normal).sum(axis=-1)[..., None] * normal
    sine = (np.cross(ref_in_plane, projected) * normal).sum(axis=-1)
    cosine = (projected * ref_in_plane).sum(axis=-1)
    keys = np.arctan2(sine, cosine)
    keys = np.where(keys == -math.pi, math.pi, keys)

    degenerate = np.sqrt((projected ** 2).sum(axis=-1)) < config.DEGENERATE_PROJECTION
    return np.where(degenerate, -math.pi, keys)


def eds_keys(points: np.ndarray, center) -> np.ndarray:
    """Euclidean distance of each point to a center."""
    diff = np.asarray(points, dtype=np.float64) - np.asarray(center)
    return np.sqrt((diff ** 2).sum(axis=-1))


def strategy_keys(points: np.ndarray, strategy: SortStrategy,
                  center: Optional[np.ndarray] = None) -> np.ndarray:
    """Keys of one strategy for (..., k, 3) points.

    Args:
        points: member coordinates, any leading batch shape.
        strategy: the strategy.
        center: (..., 3) set centers; PCS angles and EDS distances are taken
            around it. APS order does not depend on it.
    """
    points = np.asarray(points, dtype=np.float64)
    if center is not None:
        center = np.asarray(center, dtype=np.float64)[..., None, :]
    if strategy.kind == SortKind.APS:
        return aps_keys(points, strategy.axis)
    if strategy.kind == SortKind.PCS:
        relative = points if center is None else points - center
        return pcs_keys(relative, strategy.normal, strategy.ref)
    if strategy.center is not None:
        return eds_keys(points, strategy.center)
    if center is None:
        center = ordered_mean(points)[..., None, :]
    return eds_keys(points, center)


def sort_permutation(keys: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Ascending key order, exact ties broken lexicographically on coordinates.

    Works on a single set ((k,) keys, (k, 3) points) or a batch along leading
    axes.
    """
    keys = np.asarray(keys, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    if not np.all(np.isfinite(keys)):
        raise NonFiniteError("sort keys must be finite")
    if points.shape[:-1] != keys.shape:
        raise ShapeMismatchError(
            f"keys {keys.shape} do not match points {points.shape}")
    return np.lexsort(
        (points[..., 2], points[..., 1], points[..., 0], keys), axis=-1)


def plan_orders(points: np.ndarray, plan: SortPlan,
                center: Optional[np.ndarray] = None) -> np.ndarray:
    """Permutations of every strategy, shape (..., n_sort, k)."""
    return np.stack(
        [sort_permutation(strategy_keys(points, s, center), points)
         for s in plan.strategies],
        axis=-2)


def ordered_features(points: np.ndarray, feats: np.ndarray, plan: SortPlan,
                     center: Optional[np.ndarray] = None) -> np.ndarray:
    """Concatenate one reordered copy of feats per strategy.

    Args:
        points: (k, 3) member coordinates.
        feats: (k, c) member features.
        plan: strategies in block order.
        center: optional (3,) set center for PCS and EDS.

    Returns:
        np.ndarray: (k, n_sort * c); row r of block j is the feature of the
        r-th point under strategy j.
    """
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[0] != np.asarray(points).shape[0]:
        raise ShapeMismatchError(
            f"{feats.shape[0]} feature rows for {len(points)} points")
    orders = plan_orders(points, plan, center)
    return np.concatenate([feats[order] for order in orders], axis=1)

"""
Noise corruptions of normalized point clouds at five severity levels.

Numeric parameters come from data/corruption_params.json. Every corruption
draws from a Philox generator keyed by CorruptionSpec.seed, so the same cloud
and CorruptionSpec always give bit-identical output.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np

import config
from errors import NotNormalizedError
from geom import PointCloud
from storage import load_json_resource
from tensor_nn import make_rng

logger = logging.getLogger(__name__)


class CorruptionKind(str, Enum):
    UNIFORM = "uniform"
    GAUSSIAN = "gaussian"
    IMPULSE = "impulse"
    UPSAMPLING = "upsampling"
    BACKGROUND = "background"

    @property
    def preserves_count(self) -> bool:
        return self in (CorruptionKind.UNIFORM, CorruptionKind.GAUSSIAN,
                        CorruptionKind.IMPULSE)


# Table column order
KINDS = tuple(CorruptionKind)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    severity: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "kind", CorruptionKind(self.kind))
        if self.severity not in config.SEVERITIES:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "severity": self.severity, "seed": self.seed}


@lru_cache(maxsize=1)
def corruption_params() -> dict:
    params = load_json_resource(
        config.CORRUPTION_PARAMS_FILE,
        "data/corruption_params.json was not found.")
    return params


def derive_seed(base_seed: int, kind: CorruptionKind, severity: int,
                cloud_index: int) -> int:
    """63-bit seed for one (cloud, kind, severity) cell."""
    sequence = np.random.SeedSequence(
        [base_seed, KINDS.index(CorruptionKind(kind)), severity, cloud_index])
    low, high = sequence.generate_state(2, dtype=np.uint32)
    return int(high & 0x7FFFFFFF) << 32 | int(low)


def affected_count(kind: CorruptionKind, n: int, severity: int) -> int:
    """Points moved (impulse) or appended (upsampling, background)."""
    kind = CorruptionKind(kind)
    if kind.preserves_count and kind != CorruptionKind.IMPULSE:
        return 0
    divisor = corruption_params()["kinds"][kind.value]["count_divisor"]
    return (n * severity) // divisor


def check_normalized(cloud: PointCloud) -> None:
    radius = np.sqrt((cloud.coords ** 2).sum(axis=1)).max()
    if radius > 1.0 + config.NORMALIZE_TOLERANCE:
        raise NotNormalizedError(
            f"cloud extends to radius {radius:.6f}; normalize it first")


def _appended(cloud: PointCloud, coords: np.ndarray,
              feats: Optional[np.ndarray]) -> PointCloud:
    all_coords = np.vstack([cloud.coords, coords])
    all_feats = None
    if cloud.feats is not None:
        all_feats = np.vstack([cloud.feats, feats])
    return PointCloud(coords=all_coords, feats=all_feats, label=cloud.label)


def corrupt(cloud: PointCloud, spec: CorruptionSpec) -> PointCloud:
    """
    Apply one corruption

    Args:
        cloud: a normalized cloud.
        spec: kind, severity and seed.

    Returns:
        PointCloud: the corrupted copy; the label is kept.
    """
    check_normalized(cloud)
    params = corruption_params()["kinds"][spec.kind.value]
    rng = make_rng(spec.seed)
    s = spec.severity
    points = cloud.coords
    n = len(cloud)

    if spec.kind == CorruptionKind.UNIFORM:
        delta = params["delta_per_severity"] * s
        return cloud.with_coords(points + rng.uniform(-delta, delta, size=points.shape))

    if spec.kind == CorruptionKind.GAUSSIAN:
        sigma = params["sigma_per_severity"] * s
        return cloud.with_coords(points + rng.normal(0.0, sigma, size=points.shape))

    if spec.kind == CorruptionKind.IMPULSE:
        count = affected_count(spec.kind, n, s)
        magnitude = params["magnitude"] * (1.0 + params["growth_per_severity"] * (s - 1))
        moved = rng.choice(n, size=count, replace=False)
        signs = rng.choice(np.array([-1.0, 1.0]), size=(count, 3))
        coords = points.copy()
        coords[moved] += signs * magnitude
        return cloud.with_coords(coords)

    count = affected_count(spec.kind, n, s)
    if spec.kind == CorruptionKind.UPSAMPLING:
        source = rng.integers(0, n, size=count)
        jitter = params["jitter"]
        extra = points[source] + rng.uniform(-jitter, jitter, size=(count, 3))
        feats = None if cloud.feats is None else cloud.feats[source]
        return _appended(cloud, extra, feats)

    bound = params["bound"]
    extra = rng.uniform(-bound, bound, size=(count, 3))
    feats = None
    if cloud.feats is not None:
        feats = np.zeros((count, cloud.feature_channels))
    return _appended(cloud, extra, feats)


def corruption_suite(cloud: PointCloud, base_seed: int = config.DEFAULT_SEED,
                     cloud_index: int = 0,
                     kinds: Sequence[CorruptionKind] = KINDS,
                     severities: Sequence[int] = config.SEVERITIES
                     ) -> List[Tuple[CorruptionSpec, PointCloud]]:
    """Every (kind, severity) corruption of one cloud, with its spec."""
    results = []
    for kind in kinds:
        for severity in severities:
            spec = CorruptionSpec(
                kind, severity, derive_seed(base_seed, kind, severity, cloud_index))
            results.append((spec, corrupt(cloud, spec)))
    return results

"""
Deterministic synthetic shape dataset.

Eight analytic surface families are sampled uniformly by area (or arc length
for the helix), jittered, scaled anisotropically, optionally rotated about z
and normalized into the unit sphere.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from geom import PointCloud, normalize
from storage import save_json, write_index, write_pcf
from tensor_nn import make_rng

logger = logging.getLogger(__name__)

MIN_POINTS = 64
SCALE_RANGE = (0.6, 1.4)
TORUS_RADII = (1.0, 0.35)  # tube center radius, tube radius
SPLITS = {"train": 0, "test": 1}


class Family(str, Enum):
    SPHERE = "sphere"
    CUBE_SURFACE = "cube_surface"
    CYLINDER = "cylinder"
    CONE = "cone"
    TORUS = "torus"
    PLANE = "plane"
    HELIX = "helix"
    TWO_SPHERES = "two_spheres"


FAMILIES = tuple(Family)


@dataclass(frozen=True)
class ShapeSpec:
    """
    One synthetic cloud.

    Attributes:
        family: surface family.
        points: point count, at least 64.
        seed: generator key.
        jitter: standard deviation of the Gaussian jitter.
        scale: per-axis scale in [0.6, 1.4]; drawn from the seed when None.
        rotate_z: apply a random rotation about z.
        label: class index; defaults to the family's enumeration index.
    """
    family: Family
    points: int
    seed: int
    jitter: float = 0.01
    scale: Optional[Tuple[float, float, float]] = None
    rotate_z: bool = True
    label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        if self.points < MIN_POINTS:
            raise ValueError(f"a shape needs at least {MIN_POINTS} points")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.scale is not None:
            scale = tuple(float(s) for s in self.scale)
            if len(scale) != 3 or not all(
                    SCALE_RANGE[0] <= s <= SCALE_RANGE[1] for s in scale):
                raise ValueError(f"scale must be three values in {SCALE_RANGE}")
            object.__setattr__(self, "scale", scale)


def _directions(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sphere(rng, n):
    # antipodal pairs keep the centroid at the origin
    half = _directions(rng, (n + 1) // 2)
    return np.vstack([half, -half])[:n]


def _cube_surface(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    axis = face // 2
    sign = np.where(face % 2 == 0, -1.0, 1.0)
    points = np.empty((n, 3))
    for a in range(3):
        rows = axis == a
        others = [b for b in range(3) if b != a]
        points[rows, a] = sign[rows]
        points[np.ix_(rows, others)] = uv[rows]
    return points


def _disk(rng, n, radius):
    r = radius * np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0.0, 2.0 * math.pi, size=n)
    return r * np.cos(t), r * np.sin(t)


def _cylinder(rng, n):
    lateral, cap = 4.0 * math.pi, 2.0 * math.pi
    on_side = rng.uniform(size=n) < lateral / (lateral + cap)
    t = rng.uniform(0.0, 2.0 * math.pi, size=n)
    points = np.stack([np.cos(t), np.sin(t), rng.uniform(-1.0, 1.0, size=n)], axis=1)
    x, y = _disk(rng, n, 1.0)
    top = np.where(rng.uniform(size=n) < 0.5, -1.0, 1.0)
    caps = np.stack([x, y, top], axis=1)
    return np.where(on_side[:, None], points, caps)


def _cone(rng, n):
    # apex at z = 1, base of radius 1 at z = -1
    lateral, base = math.pi * math.sqrt(5.0), math.pi
    on_side = rng.uniform(size=n) < lateral / (lateral + base)
    frac = np.sqrt(rng.uniform(size=n))
    t = rng.uniform(0.0, 2.0 * math.pi, size=n)
    side = np.stack([frac * np.cos(t), frac * np.sin(t), 1.0 - 2.0 * frac], axis=1)
    x, y = _disk(rng, n, 1.0)
    bottom = np.stack([x, y, -np.ones(n)], axis=1)
    return np.where(on_side[:, None], side, bottom)


def _torus(rng, n):
    big, small = TORUS_RADII
    accepted = []
    count = 0
    while count < n:
        phi = rng.uniform(0.0, 2.0 * math.pi, size=2 * n)
        keep = rng.uniform(size=2 * n) < (big + small * np.cos(phi)) / (big + small)
        accepted.append(phi[keep])
        count += int(keep.sum())
    phi = np.concatenate(accepted)[:n]
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    ring = big + small * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta),
                     small * np.sin(phi)], axis=1)


def _plane(rng, n):
    return np.hstack([rng.uniform(-1.0, 1.0, size=(n, 2)), np.zeros((n, 1))])


def _helix(rng, n):
    turns = 2.0
    t = rng.uniform(0.0, 2.0 * math.pi * turns, size=n)
    return np.stack([np.cos(t), np.sin(t), t / (math.pi * turns) - 1.0], axis=1)


def _two_spheres(rng, n):
    points = 0.5 * _sphere(rng, n)
    offset = np.where(np.arange(n) % 2 == 0, -0.6, 0.6)
    points[:, 0] += offset
    return points


_SAMPLERS = {
    Family.SPHERE: _sphere,
    Family.CUBE_SURFACE: _cube_surface,
    Family.CYLINDER: _cylinder,
    Family.CONE: _cone,
    Family.TORUS: _torus,
    Family.PLANE: _plane,
    Family.HELIX: _helix,
    Family.TWO_SPHERES: _two_spheres,
}


def surface_points(family: Family, n: int, rng: np.random.Generator,
                   jitter: float = 0.0) -> np.ndarray:
    """Uniform samples of the canonical surface plus Gaussian jitter."""
    points = _SAMPLERS[Family(family)](rng, n)
    if jitter > 0.0:
        points = points + rng.normal(0.0, jitter, size=points.shape)
    return points


def rotation_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_shape(spec: ShapeSpec) -> PointCloud:
    rng = make_rng(spec.seed)
    points = surface_points(spec.family, spec.points, rng, spec.jitter)
    scale = spec.scale
    if scale is None:
        scale = rng.uniform(*SCALE_RANGE, size=3)
    points = points * np.asarray(scale)
    if spec.rotate_z:
        points = points @ rotation_z(rng.uniform(0.0, 2.0 * math.pi)).T
    label = FAMILIES.index(spec.family) if spec.label is None else spec.label
    return normalize(PointCloud(coords=points, label=label))


def sample_seed(base_seed: int, split: str, class_index: int, item: int) -> int:
    sequence = np.random.SeedSequence([base_seed, SPLITS[split], class_index, item])
    low, high = sequence.generate_state(2, dtype=np.uint32)
    return int(high & 0x7FFFFFFF) << 32 | int(low)


@dataclass
class SyntheticDataset:
    families: List[Family]
    train: List[PointCloud]
    test: List[PointCloud]
    rows: List[Dict] = field(default_factory=list)
    base_seed: int = config.DEFAULT_SEED
    points: int = 512
    jitter: float = 0.01

    def manifest(self) -> dict:
        return {
            "families": [f.value for f in self.families],
            "train_count": len(self.train),
            "test_count": len(self.test),
            "base_seed": self.base_seed,
            "points": self.points,
            "jitter": self.jitter,
        }


def _specs(families, per_class, split, base_seed, points, jitter):
    specs = []
    for label, family in enumerate(families):
        for item in range(per_class):
            specs.append(ShapeSpec(
                family=family, points=points,
                seed=sample_seed(base_seed, split, label, item),
                jitter=jitter, label=label))
    return specs


def make_dataset(families: Sequence[str], per_class_train: int, per_class_test: int,
                 base_seed: int = config.DEFAULT_SEED, points: int = 512,
                 jitter: float = 0.01, out_dir: Optional[str] = None) -> SyntheticDataset:
    """
    Generate class-balanced train and test splits

    Args:
        families: family names; labels are their positions in this list.
        per_class_train: training clouds per family.
        per_class_test: test clouds per family.
        base_seed: every cloud seed is derived from it, the split, the class
            and the item number, so the splits never share a seed.
        points: points per cloud.
        jitter: Gaussian jitter.
        out_dir: when given, PCF1 files, index.csv and dataset.json are
            written there.

    Returns:
        SyntheticDataset
    """
    families = [Family(f) for f in families]
    if len(set(families)) != len(families):
        raise ValueError("families must be distinct")
    dataset = SyntheticDataset(families=families, train=[], test=[],
                               base_seed=base_seed, points=points, jitter=jitter)
    with ThreadPoolExecutor(max_workers=config.THREADS) as pool:
        for split, per_class in (("train", per_class_train), ("test", per_class_test)):
            specs = _specs(families, per_class, split, base_seed, points, jitter)
            clouds = list(pool.map(sample_shape, specs))
            setattr(dataset, split, clouds)
            for i, spec in enumerate(specs):
                item = i % per_class
                dataset.rows.append({
                    "path": f"{split}/{spec.family.value}_{item:04d}.pcf",
                    "label": spec.label,
                    "family": spec.family.value,
                    "seed": spec.seed,
                })
    logger.info(f"Generated {len(dataset.train)} train and {len(dataset.test)} "
                f"test clouds over {len(families)} families")

    if out_dir is not None:
        clouds = dataset.train + dataset.test
        for row, cloud in zip(dataset.rows, clouds):
            write_pcf(cloud, os.path.join(out_dir, row["path"]))
        write_index(dataset.rows, out_dir)
        save_json(dataset.manifest(), os.path.join(out_dir, config.DATASET_MANIFEST))
    return dataset

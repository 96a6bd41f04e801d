"""
Set-Mixer aggregation, set-abstraction layers and the hierarchical classifier.

A model is described by a JSON-serializable ModelConfig and instantiated as a
SetMixerClassifier holding the trainable Parameters. Geometry (sampling,
grouping, sorting) depends only on coordinates and the configuration, so it
is planned once per cloud (plan_geometry) and can be cached or frozen; the
network then runs on a Tape over a batch of equally sized clouds.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

import config
from errors import BadCountError, ShapeMismatchError
from geom import CenterMode, GroupIndex, PointCloud, group, regroup
from sorting import SortPlan, parse_plan, plan_orders
from tensor_nn import (Activation, DropoutSpec, FcLayer, Node, NormKind,
                       NormLayer, Parameter, Tape, backward, gradcheck,
                       make_rng)

logger = logging.getLogger(__name__)


class AggregatorKind(str, Enum):
    SET_MIXER = "set_mixer"
    MAX_POOL = "max_pool"
    MEAN_POOL = "mean_pool"
    MIXER_NO_SORT = "mixer_no_sort"

    @property
    def uses_mixer(self) -> bool:
        return self in (AggregatorKind.SET_MIXER, AggregatorKind.MIXER_NO_SORT)


# ---------------------------
# Configuration
# ---------------------------

def _fc_spec(in_dim: int, out_dim: int, activation: str) -> dict:
    return {"in": int(in_dim), "out": int(out_dim), "activation": activation}


@dataclass(frozen=True)
class MixerParams:
    """Shape of one Set-Mixer.

    Attributes:
        k: points per group.
        c_in: channels entering the mixer (output width of the shared mapping).
        n_sort: sorting strategies, one feature block each.
        m_layers: three FC specs across the point dimension, k -> h1 -> h2 -> d.
        r_layer: FC spec d * n_sort * c_in -> 2 * c_in.
        norm: layer_norm or none.
        dropout_rate: dropout after the first two point-dimension layers.
    """
    k: int
    c_in: int
    n_sort: int
    m_layers: Tuple[dict, ...]
    r_layer: dict
    norm: NormKind = NormKind.LAYER_NORM
    dropout_rate: float = config.MIXER_DROPOUT

    def __post_init__(self):
        object.__setattr__(self, "norm", NormKind(self.norm))
        object.__setattr__(self, "m_layers", tuple(dict(s) for s in self.m_layers))
        object.__setattr__(self, "r_layer", dict(self.r_layer))
        if self.norm == NormKind.BATCH_NORM:
            raise ValueError("the mixer norm is layer_norm or none")
        if len(self.m_layers) != 3:
            raise ValueError("m needs exactly three layers")
        if self.m_layers[0]["in"] != self.k:
            raise ShapeMismatchError(
                f"m input width {self.m_layers[0]['in']} != k={self.k}")
        for a, b in zip(self.m_layers, self.m_layers[1:]):
            if a["out"] != b["in"]:
                raise ShapeMismatchError("m layers do not chain")
        expected_in = self.d * self.n_sort * self.c_in
        if self.r_layer["in"] != expected_in or self.r_layer["out"] != 2 * self.c_in:
            raise ShapeMismatchError(
                f"r must map {expected_in} -> {2 * self.c_in}, got "
                f"{self.r_layer['in']} -> {self.r_layer['out']}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def d(self) -> int:
        return self.m_layers[-1]["out"]

    @classmethod
    def build(cls, k: int, c_in: int, n_sort: int, d: int = config.MIXER_HIDDEN_D,
              hidden: Optional[Tuple[int, int]] = None,
              norm: NormKind = NormKind.LAYER_NORM,
              dropout_rate: float = config.MIXER_DROPOUT) -> "MixerParams":
        h1, h2 = hidden or (k, k)
        return cls(
            k=k, c_in=c_in, n_sort=n_sort,
            m_layers=(_fc_spec(k, h1, "relu"), _fc_spec(h1, h2, "relu"),
                      _fc_spec(h2, d, "relu")),
            r_layer=_fc_spec(d * n_sort * c_in, 2 * c_in, "none"),
            norm=norm, dropout_rate=dropout_rate)

    def to_dict(self) -> dict:
        return {"k": self.k, "c_in": self.c_in, "n_sort": self.n_sort,
                "m_layers": [dict(s) for s in self.m_layers],
                "r_layer": dict(self.r_layer), "norm": self.norm.value,
                "dropout_rate": self.dropout_rate}

    @classmethod
    def from_dict(cls, data: dict) -> "MixerParams":
        return cls(k=data["k"], c_in=data["c_in"], n_sort=data["n_sort"],
                   m_layers=tuple(data["m_layers"]), r_layer=data["r_layer"],
                   norm=data.get("norm", "layer_norm"),
                   dropout_rate=data.get("dropout_rate", config.MIXER_DROPOUT))


@dataclass(frozen=True)
class Aggregator:
    kind: AggregatorKind
    mixer: Optional[MixerParams] = None
    plan: Optional[SortPlan] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AggregatorKind(self.kind))
        if self.kind.uses_mixer and self.mixer is None:
            raise ValueError(f"{self.kind.value} needs mixer parameters")
        if self.kind == AggregatorKind.SET_MIXER:
            if self.plan is None:
                raise ValueError("set_mixer needs a sort plan")
            if self.plan.n_sort != self.mixer.n_sort:
                raise ShapeMismatchError(
                    f"plan has {self.plan.n_sort} strategies, mixer expects "
                    f"{self.mixer.n_sort}")
        if self.kind == AggregatorKind.MIXER_NO_SORT and self.mixer.n_sort != 1:
            raise ShapeMismatchError("mixer_no_sort uses a single feature block")

    def to_dict(self) -> dict:
        return {"kind": self.kind.value,
                "mixer": None if self.mixer is None else self.mixer.to_dict(),
                "plan": None if self.plan is None else self.plan.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Aggregator":
        mixer = data.get("mixer")
        plan = data.get("plan")
        return cls(kind=data["kind"],
                   mixer=None if mixer is None else MixerParams.from_dict(mixer),
                   plan=None if plan is None else SortPlan.from_dict(plan))


@dataclass(frozen=True)
class SaLayerConfig:
    """One set-abstraction level: SA(m_sets, k, t_channels, aggregator)."""
    m_sets: int
    k: int
    t_channels: Tuple[int, ...]
    aggregator: Aggregator
    center_mode: CenterMode = CenterMode.SPATIAL_CENTER
    legacy_centering: bool = False

    def __post_init__(self):
        object.__setattr__(self, "t_channels", tuple(int(c) for c in self.t_channels))
        object.__setattr__(self, "center_mode", CenterMode(self.center_mode))
        if self.m_sets < 1 or self.k < 1:
            raise BadCountError("m_sets and k must be >= 1")
        if not self.t_channels or min(self.t_channels) < 1:
            raise ValueError("t_channels needs at least one positive width")
        mixer = self.aggregator.mixer
        if mixer is not None and (mixer.k != self.k or mixer.c_in != self.t_channels[-1]):
            raise ShapeMismatchError(
                f"mixer built for k={mixer.k}, c_in={mixer.c_in}; layer has "
                f"k={self.k}, c={self.t_channels[-1]}")

    @property
    def out_channels(self) -> int:
        c = self.t_channels[-1]
        return 2 * c if self.aggregator.kind.uses_mixer else c

    def to_dict(self) -> dict:
        return {"m_sets": self.m_sets, "k": self.k,
                "t_channels": list(self.t_channels),
                "aggregator": self.aggregator.to_dict(),
                "center_mode": self.center_mode.value,
                "legacy_centering": self.legacy_centering}

    @classmethod
    def from_dict(cls, data: dict) -> "SaLayerConfig":
        return cls(m_sets=data["m_sets"], k=data["k"],
                   t_channels=tuple(data["t_channels"]),
                   aggregator=Aggregator.from_dict(data["aggregator"]),
                   center_mode=data.get("center_mode", "spatial_center"),
                   legacy_centering=bool(data.get("legacy_centering", False)))


@dataclass(frozen=True)
class HeadConfig:
    widths: Tuple[int, ...] = (512, 256)
    dropout: Tuple[float, ...] = (config.HEAD_DROPOUT, config.HEAD_DROPOUT)
    num_classes: int = 40

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "dropout", tuple(float(p) for p in self.dropout))
        if len(self.widths) != len(self.dropout):
            raise ValueError("one dropout rate per hidden head layer")
        if self.num_classes < 2:
            raise ValueError("a classifier needs at least two classes")

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "dropout": list(self.dropout),
                "num_classes": self.num_classes}

    @classmethod
    def from_dict(cls, data: dict) -> "HeadConfig":
        return cls(widths=tuple(data["widths"]), dropout=tuple(data["dropout"]),
                   num_classes=data["num_classes"])


@dataclass(frozen=True)
class ModelConfig:
    sa_layers: Tuple[SaLayerConfig, ...]
    head: HeadConfig
    input_feature_channels: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sa_layers", tuple(self.sa_layers))
        if not self.sa_layers:
            raise ValueError("a model needs at least one SA layer")
        for prev, layer in zip(self.sa_layers, self.sa_layers[1:]):
            if layer.k > prev.m_sets:
                raise BadCountError(
                    f"k={layer.k} exceeds the {prev.m_sets} sets of the level below")

    def in_channels(self, level: int) -> int:
        """Input width of the shared mapping at a level (0-based)."""
        layer = self.sa_layers[level]
        if level == 0:
            return 3 + self.input_feature_channels
        extra = 3 if layer.legacy_centering else 0
        return self.sa_layers[level - 1].out_channels + extra

    @property
    def global_channels(self) -> int:
        return self.sa_layers[-1].out_channels

    def to_dict(self) -> dict:
        return {"sa_layers": [layer.to_dict() for layer in self.sa_layers],
                "head": self.head.to_dict(),
                "input_feature_channels": self.input_feature_channels}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(sa_layers=tuple(SaLayerConfig.from_dict(s) for s in data["sa_layers"]),
                   head=HeadConfig.from_dict(data["head"]),
                   input_feature_channels=data.get("input_feature_channels", 0))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


# (m_sets, k, t_channels), head widths
PRESETS = {
    "canonical": {
        "sa": [(512, 32, (64, 64, 64)), (128, 64, (128, 128, 128)),
               (1, 128, (256, 512, 512))],
        "head": (512, 256),
        "num_classes": 40,
        "mixer_d": config.MIXER_HIDDEN_D,
    },
    "desk": {
        "sa": [(64, 16, (16, 16, 16)), (16, 16, (32, 32, 32)),
               (1, 16, (64, 64, 64))],
        "head": (64, 32),
        "num_classes": 8,
        "mixer_d": config.DESK_MIXER_HIDDEN_D,
    },
}


def build_config(preset: str = "desk", aggregator: str = "set_mixer",
                 plan: str = "aps",
                 center_mode: str = "spatial_center",
                 dropout: float = config.MIXER_DROPOUT,
                 layer_norm: bool = True,
                 legacy_centering: bool = False,
                 num_classes: Optional[int] = None,
                 mixer_d: Optional[int] = None) -> ModelConfig:
    """Preset backbone with the aggregation and ablation switches applied.

    Args:
        preset: "canonical" or "desk".
        aggregator: set_mixer, max_pool, mean_pool or mixer_no_sort.
        plan: sort plan description, see sorting.parse_plan.
        center_mode: spatial_center or query_point.
        dropout: mixer dropout rate.
        layer_norm: layer norm inside the mixer.
        legacy_centering: prepend member coordinates relative to the query point.
        num_classes: overrides the preset class count.
        mixer_d: overrides the preset point-dimension output width.

    Returns:
        ModelConfig
    """
    if preset not in PRESETS:
        raise ValueError(f"unknown preset '{preset}'")
    spec = PRESETS[preset]
    kind = AggregatorKind(aggregator)
    sort_plan = parse_plan(plan) if kind == AggregatorKind.SET_MIXER else None
    d = mixer_d or spec["mixer_d"]
    norm = NormKind.LAYER_NORM if layer_norm else NormKind.NONE

    layers = []
    for m_sets, k, t_channels in spec["sa"]:
        mixer = None
        if kind.uses_mixer:
            n_sort = sort_plan.n_sort if sort_plan is not None else 1
            mixer = MixerParams.build(k, t_channels[-1], n_sort, d=d, norm=norm,
                                      dropout_rate=dropout)
        layers.append(SaLayerConfig(
            m_sets=m_sets, k=k, t_channels=t_channels,
            aggregator=Aggregator(kind, mixer, sort_plan),
            center_mode=CenterMode(center_mode),
            legacy_centering=legacy_centering))
    head = HeadConfig(widths=spec["head"],
                      dropout=(config.HEAD_DROPOUT,) * len(spec["head"]),
                      num_classes=num_classes or spec["num_classes"])
    return ModelConfig(sa_layers=tuple(layers), head=head)


def canonical_config(num_classes: int = 40) -> ModelConfig:
    return build_config("canonical", plan="aps", num_classes=num_classes)


def desk_config(num_classes: int = 8) -> ModelConfig:
    return build_config("desk", plan="aps", num_classes=num_classes)


# ---------------------------
# Geometry planning
# ---------------------------

@dataclass(frozen=True)
class LevelGeometry:
    """Coordinate-only structure of one SA level for one cloud.

    Attributes:
        group: sets of the level, rows into the level's input points.
        member_coords: (M, K, 3) coordinates of the members.
        orders: (M, n_sort, K) positions within each set per feature block,
            or None for pooling.
        relative_coords: (M, K, 3) members minus query point (legacy only).
    """
    group: GroupIndex
    member_coords: np.ndarray
    orders: Optional[np.ndarray] = None
    relative_coords: Optional[np.ndarray] = None

    @property
    def centers_out(self) -> np.ndarray:
        return self.group.output_centers


@dataclass(frozen=True)
class GeometryPlan:
    point_count: int
    levels: Tuple[LevelGeometry, ...]


def plan_level(points: np.ndarray, layer: SaLayerConfig,
               frozen: Optional[GroupIndex] = None) -> LevelGeometry:
    """Group the level's input points and precompute member orders."""
    points = np.asarray(points, dtype=np.float64)
    if frozen is None:
        g = group(points, layer.m_sets, layer.k, layer.center_mode)
    else:
        g = regroup(points, frozen)
    members = points[g.indices]

    kind = layer.aggregator.kind
    orders = None
    if kind == AggregatorKind.SET_MIXER:
        orders = plan_orders(members, layer.aggregator.plan, g.spatial_centers)
    elif kind == AggregatorKind.MIXER_NO_SORT:
        orders = np.argsort(g.indices, axis=1, kind="stable")[:, None, :]

    relative = members - g.centers[:, None, :] if layer.legacy_centering else None
    return LevelGeometry(group=g, member_coords=members, orders=orders,
                         relative_coords=relative)


def plan_geometry(coords: np.ndarray, cfg: ModelConfig,
                  frozen: Optional[GeometryPlan] = None) -> GeometryPlan:
    """Plan every level; with frozen, reuse its groupings on new coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    if frozen is not None and frozen.point_count != len(coords):
        raise BadCountError(
            f"frozen plan covers {frozen.point_count} points, got {len(coords)}")
    levels = []
    points = coords
    for i, layer in enumerate(cfg.sa_layers):
        level = plan_level(points, layer,
                           None if frozen is None else frozen.levels[i].group)
        levels.append(level)
        points = level.centers_out
    return GeometryPlan(point_count=len(coords), levels=tuple(levels))


# ---------------------------
# Layers
# ---------------------------

class MixerLayer:
    """Norm, token mixing across the point dimension, channel reduction r."""

    def __init__(self, name: str, params: MixerParams, rng: np.random.Generator):
        self.params = params
        self.norm = NormLayer.create(f"{name}.norm", params.norm,
                                     params.n_sort * params.c_in)
        self.m = [FcLayer.create(f"{name}.m{i}", s["in"], s["out"],
                                 Activation(s["activation"]), rng)
                  for i, s in enumerate(params.m_layers)]
        r = params.r_layer
        self.r = FcLayer.create(f"{name}.r", r["in"], r["out"],
                                Activation(r["activation"]), rng)

    def parameters(self) -> List[Parameter]:
        params = self.norm.parameters()
        for layer in self.m:
            params.extend(layer.parameters())
        return params + self.r.parameters()

    def forward(self, tape: Tape, ordered: Node, dropout: DropoutSpec) -> Node:
        """(..., k, n_sort * c_in) ordered features -> (..., 2 * c_in)."""
        expected = (self.params.k, self.params.n_sort * self.params.c_in)
        if ordered.shape[-2:] != expected:
            raise ShapeMismatchError(
                f"mixer expects (..., {expected[0]}, {expected[1]}), "
                f"got {ordered.shape}")
        h = tape.norm(ordered, self.norm, dropout.training)
        h = tape.swap_last(h)
        for i, layer in enumerate(self.m):
            h = tape.linear(h, layer)
            if i < 2:
                h = tape.dropout(h, dropout)
        h = tape.swap_last(h)
        h = tape.reshape(h, h.shape[:-2] + (h.shape[-2] * h.shape[-1],))
        return tape.linear(h, self.r)


class SaLayer:
    def __init__(self, name: str, cfg: SaLayerConfig, level: int, in_channels: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.level = level
        self.in_channels = in_channels
        self.t_layers: List[Tuple[FcLayer, NormLayer]] = []
        width = in_channels
        for i, out in enumerate(cfg.t_channels):
            fc = FcLayer.create(f"{name}.t{i}", width, out, Activation.NONE, rng)
            bn = NormLayer.create(f"{name}.t{i}_bn", NormKind.BATCH_NORM, out)
            self.t_layers.append((fc, bn))
            width = out
        self.mixer = (MixerLayer(f"{name}.mixer", cfg.aggregator.mixer, rng)
                      if cfg.aggregator.kind.uses_mixer else None)

    @property
    def uses_coordinates(self) -> bool:
        return self.level == 0 or self.cfg.legacy_centering

    def parameters(self) -> List[Parameter]:
        params = []
        for fc, bn in self.t_layers:
            params.extend(fc.parameters() + bn.parameters())
        if self.mixer is not None:
            params.extend(self.mixer.parameters())
        return params

    def norm_layers(self) -> List[NormLayer]:
        layers = [bn for _, bn in self.t_layers]
        if self.mixer is not None:
            layers.append(self.mixer.norm)
        return layers

    def forward(self, tape: Tape, x: Optional[Node],
                geometry: Sequence[LevelGeometry], training: bool,
                dropout: DropoutSpec) -> Node:
        """Group, map and aggregate a batch.

        Args:
            x: (B, P, C) features of the level's input points, or None when
                the level has no input features besides coordinates.
            geometry: this level's geometry for every batch item.

        Returns:
            Node: (B, M, out_channels)
        """
        batch = len(geometry)
        m, k = geometry[0].group.indices.shape
        parts = []
        if self.level == 0:
            coords = [g.relative_coords if self.cfg.legacy_centering else g.member_coords
                      for g in geometry]
            parts.append(tape.constant(np.stack(coords)))
        elif self.cfg.legacy_centering:
            parts.append(tape.constant(np.stack([g.relative_coords for g in geometry])))
        if x is not None:
            index = np.stack([g.group.indices for g in geometry]).reshape(batch, m * k)
            members = tape.gather_rows(x, index)
            parts.append(tape.reshape(members, (batch, m, k, x.shape[-1])))
        h = tape.concat(parts, axis=-1)
        if h.shape[-1] != self.in_channels:
            raise ShapeMismatchError(
                f"level {self.level + 1} expects {self.in_channels} input "
                f"channels, got {h.shape[-1]}")

        for fc, bn in self.t_layers:
            h = tape.relu(tape.norm(tape.linear(h, fc), bn, training))

        kind = self.cfg.aggregator.kind
        if kind == AggregatorKind.MAX_POOL:
            return tape.reduce_max(h, axis=-2)
        if kind == AggregatorKind.MEAN_POOL:
            return tape.reduce_mean(h, axis=-2)

        c = h.shape[-1]
        orders = np.stack([g.orders for g in geometry])
        n_sort = orders.shape[-2]
        flat = tape.reshape(h, (batch * m, k, c))
        ordered = tape.gather_rows(flat, orders.reshape(batch * m, n_sort * k))
        ordered = tape.reshape(ordered, (batch * m, n_sort, k, c))
        ordered = tape.transpose(ordered, (0, 2, 1, 3))
        ordered = tape.reshape(ordered, (batch * m, k, n_sort * c))
        out = self.mixer.forward(tape, ordered, dropout)
        return tape.reshape(out, (batch, m, out.shape[-1]))


@dataclass
class ForwardResult:
    logits: Node
    level_features: List[Node] = field(default_factory=list)
    global_feature: Optional[Node] = None


class SetMixerClassifier:
    """Hierarchical point-cloud classifier built from a ModelConfig."""

    def __init__(self, cfg: ModelConfig, seed: int = config.DEFAULT_SEED):
        self.cfg = cfg
        self.seed = seed
        rng = make_rng(seed)
        self.sa_layers = [SaLayer(f"sa{i + 1}", layer, i, cfg.in_channels(i), rng)
                          for i, layer in enumerate(cfg.sa_layers)]
        self.head: List[FcLayer] = []
        width = cfg.global_channels
        for i, out in enumerate(cfg.head.widths):
            self.head.append(FcLayer.create(f"head.fc{i}", width, out,
                                            Activation.RELU, rng))
            width = out
        self.head.append(FcLayer.create("head.out", width, cfg.head.num_classes,
                                        Activation.NONE, rng))

    def parameters(self) -> List[Parameter]:
        params = []
        for layer in self.sa_layers:
            params.extend(layer.parameters())
        for layer in self.head:
            params.extend(layer.parameters())
        return params

    def norm_layers(self) -> List[NormLayer]:
        return [n for layer in self.sa_layers for n in layer.norm_layers()]

    def buffers(self) -> Dict[str, np.ndarray]:
        buffers = {}
        for norm in self.norm_layers():
            buffers.update(norm.buffers())
        return buffers

    def load_buffers(self, buffers: Dict[str, np.ndarray]) -> None:
        for norm in self.norm_layers():
            if norm.kind != NormKind.BATCH_NORM:
                continue
            norm.running_mean = np.array(buffers[f"{norm.name}.running_mean"])
            norm.running_var = np.array(buffers[f"{norm.name}.running_var"])

    def load_parameters(self, values: Dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in values:
                raise KeyError(f"missing parameter '{p.name}'")
            if values[p.name].shape != p.value.shape:
                raise ShapeMismatchError(
                    f"{p.name}: stored shape {values[p.name].shape} != "
                    f"{p.value.shape}")
            p.value = np.array(values[p.name], dtype=np.float64)

    @property
    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def plan(self, cloud: PointCloud,
             frozen: Optional[GeometryPlan] = None) -> GeometryPlan:
        return plan_geometry(cloud.coords, self.cfg, frozen)

    def forward(self, tape: Tape, clouds: Sequence[PointCloud],
                plans: Optional[Sequence[GeometryPlan]] = None,
                training: bool = False, dropout: Optional[bool] = None,
                rng: Optional[np.random.Generator] = None) -> ForwardResult:
        """Run a batch of clouds with equal point counts.

        Args:
            tape: records the pass.
            clouds: the batch.
            plans: precomputed geometry; planned here when None.
            training: batch statistics in batch norm.
            dropout: dropout switch; follows training when None.
            rng: dropout generator.

        Returns:
            ForwardResult
        """
        clouds = list(clouds)
        if len({len(c) for c in clouds}) != 1:
            raise ShapeMismatchError("a batch needs clouds with equal point counts")
        if plans is None:
            plans = [self.plan(c) for c in clouds]
        spec = DropoutSpec(
            rate=0.0, training=training if dropout is None else dropout, rng=rng)

        x = None
        if self.cfg.input_feature_channels:
            x = tape.constant(np.stack([c.feats for c in clouds]))
        level_features = []
        for layer in self.sa_layers:
            mixer_spec = spec
            if layer.mixer is not None:
                mixer_spec = replace(spec, rate=layer.mixer.params.dropout_rate)
            x = layer.forward(tape, x, [p.levels[layer.level] for p in plans],
                              training, mixer_spec)
            level_features.append(x)

        if x.shape[1] != 1:
            raise ShapeMismatchError(
                f"the last SA layer must emit one set, got {x.shape[1]}")
        h = tape.reshape(x, (len(clouds), x.shape[-1]))
        global_feature = h
        for layer, rate in zip(self.head[:-1], self.cfg.head.dropout):
            h = tape.dropout(tape.linear(h, layer), replace(spec, rate=rate))
        logits = tape.linear(h, self.head[-1])
        return ForwardResult(logits=logits, level_features=level_features,
                             global_feature=global_feature)

    def logits(self, clouds: Sequence[PointCloud],
               plans: Optional[Sequence[GeometryPlan]] = None) -> np.ndarray:
        """Evaluation-mode logits, (B, num_classes)."""
        return self.forward(Tape(), clouds, plans).logits.value


# ---------------------------
# Functional forms
# ---------------------------

def mixer_aggregate(ordered: np.ndarray, mixer: MixerLayer, training: bool = False,
                    rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Aggregate one (k, n_sort * c_in) ordered matrix into 2 * c_in channels."""
    spec = DropoutSpec(mixer.params.dropout_rate if training else 0.0, training, rng)
    tape = Tape()
    return mixer.forward(tape, tape.constant(ordered), spec).value


def pool_aggregate(feats: np.ndarray, kind: str) -> np.ndarray:
    """Channel-wise max or mean over the rows of a (k, c) matrix."""
    kind = AggregatorKind(kind)
    feats = np.asarray(feats, dtype=np.float64)
    if kind == AggregatorKind.MAX_POOL:
        return feats.max(axis=0)
    if kind == AggregatorKind.MEAN_POOL:
        return feats.mean(axis=0)
    raise ValueError(f"{kind.value} is not a pooling aggregator")


def sa_forward(points: np.ndarray, feats: Optional[np.ndarray], layer: SaLayer,
               training: bool = False,
               rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Run one SA layer on a single point set.

    Args:
        points: (P, 3) input coordinates of the level.
        feats: (P, C) input features, or None (level 1 without extra channels).
        layer: the layer.

    Returns:
        (centers_out, feats_out): (M, 3) and (M, out_channels).
    """
    geometry = plan_level(points, layer.cfg)
    tape = Tape()
    x = None if feats is None else tape.constant(np.asarray(feats)[None])
    rate = layer.mixer.params.dropout_rate if layer.mixer is not None else 0.0
    out = layer.forward(tape, x, [geometry], training, DropoutSpec(rate, training, rng))
    return geometry.centers_out, out.value[0]


def model_forward(cloud: PointCloud, model: SetMixerClassifier) -> np.ndarray:
    """Evaluation-mode logits of one cloud."""
    return model.logits([cloud])[0]


def count_parameters(model: SetMixerClassifier) -> int:
    return model.num_parameters


def gradcheck_model(model: SetMixerClassifier, clouds: Sequence[PointCloud],
                    labels: Sequence[int],
                    tolerance: float = config.GRADCHECK_TOLERANCE,
                    max_entries: Optional[int] = config.GRADCHECK_MAX_ENTRIES,
                    seed: int = 0):
    """Finite-difference check of the full classifier loss.

    Batch norm runs on batch statistics and dropout is off, so the loss is a
    deterministic function of the parameters.
    """
    plans = [model.plan(c) for c in clouds]

    def loss_fn(tape: Tape) -> Node:
        result = model.forward(tape, clouds, plans, training=True, dropout=False)
        return tape.softmax_xent(result.logits, labels)

    return gradcheck(loss_fn, model.parameters(), tolerance=tolerance,
                     max_entries=max_entries, seed=seed)


def loss_and_gradients(model: SetMixerClassifier, clouds: Sequence[PointCloud],
                       labels: Sequence[int], plans: Sequence[GeometryPlan],
                       rng: np.random.Generator) -> Tuple[float, np.ndarray, Tape]:
    """One training-mode pass: loss, logits and the tape holding stat updates."""
    for p in model.parameters():
        p.grad = None
    tape = Tape()
    result = model.forward(tape, clouds, plans, training=True, rng=rng)
    loss = tape.softmax_xent(result.logits, labels)
    backward(tape, loss)
    return float(loss.value), result.logits.value, tape

"""
Error-rate metrics, the RmCE robustness score, corruption benchmarks,
published-rate replay and feature-change analysis under frozen grouping.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from corrupt import KINDS, CorruptionKind
from errors import (ChecksumMismatchError, CountMismatchError,
                    DegenerateBaselineError)
from geom import PointCloud
from report_utils import render_frame
from setmixer_model import SetMixerClassifier
from storage import load_json, load_json_resource, read_pcf
from tensor_nn import Tape, make_rng
from training import predict

logger = logging.getLogger(__name__)

TABLE_COLUMNS = {
    CorruptionKind.UNIFORM: "Uniform",
    CorruptionKind.GAUSSIAN: "Gaus.",
    CorruptionKind.IMPULSE: "Impulse",
    CorruptionKind.UPSAMPLING: "Upsamp.",
    CorruptionKind.BACKGROUND: "Bg.",
}

Cells = Dict[Tuple[CorruptionKind, int], List[PointCloud]]


# ---------------------------
# Metrics
# ---------------------------

def error_rate(predictions, labels) -> float:
    """Fraction of misclassified samples."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape or labels.size == 0:
        raise ValueError("predictions and labels must be non-empty and aligned")
    return float(np.mean(predictions != labels))


def class_mean_error(predictions, labels) -> float:
    """Unweighted mean of the per-class error rates over classes present."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    rates = [float(np.mean(predictions[labels == c] != c)) for c in np.unique(labels)]
    return float(np.mean(rates))


def rmce(er_noise: float, er_clean: float,
         bm_noise: float = config.BASELINE_NOISE,
         bm_clean: float = config.BASELINE_CLEAN) -> float:
    """Corruption-induced error increase relative to a baseline model's."""
    denominator = bm_noise - bm_clean
    if denominator == 0:
        raise DegenerateBaselineError("baseline clean and noise error rates are equal")
    return (er_noise - er_clean) / denominator


def _cell_key(kind, severity) -> str:
    return f"{CorruptionKind(kind).value}/{severity}"


@dataclass
class MetricsReport:
    """
    Aggregated benchmark result.

    er_noise is the mean over every (kind, severity) cell, er_5 over the
    severity-5 cells, mer the mean class-wise error over the same cells as
    er_noise.
    """
    er_clean: float
    er_by: Dict[str, Dict[int, float]]
    er_noise: float
    er_5: float
    mer: float
    mer_clean: float
    rmce: float
    baseline_constants: Dict[str, float]
    counts: Dict[str, int] = field(default_factory=dict)
    config_hash: str = ""
    run_manifest: str = ""

    @staticmethod
    def _cell_values(er_by) -> List[Tuple[str, int, float]]:
        return [(kind.value, s, er_by[kind.value][s])
                for kind in KINDS if kind.value in er_by
                for s in sorted(er_by[kind.value])]

    @classmethod
    def from_cells(cls, er_clean: float, er_by: Dict[str, Dict[int, float]],
                   mer_clean: float, mer_by: Dict[str, Dict[int, float]],
                   bm_noise: float = config.BASELINE_NOISE,
                   bm_clean: float = config.BASELINE_CLEAN,
                   counts: Optional[Dict[str, int]] = None,
                   config_hash: str = "") -> "MetricsReport":
        cells = cls._cell_values(er_by)
        if not cells:
            raise ValueError("a report needs at least one corruption cell")
        er_noise = float(np.mean([v for _, _, v in cells]))
        severe = [v for _, s, v in cells if s == max(config.SEVERITIES)]
        er_5 = float(np.mean(severe)) if severe else float("nan")
        mer = float(np.mean([v for _, _, v in cls._cell_values(mer_by)]))
        return cls(
            er_clean=er_clean, er_by=er_by, er_noise=er_noise, er_5=er_5,
            mer=mer, mer_clean=mer_clean,
            rmce=rmce(er_noise, er_clean, bm_noise, bm_clean),
            baseline_constants={"bm_noise": bm_noise, "bm_clean": bm_clean},
            counts=dict(counts or {}), config_hash=config_hash)

    def audit(self) -> bool:
        """Recompute the aggregates from the cells; exact equality required."""
        cells = self._cell_values(self.er_by)
        er_noise = float(np.mean([v for _, _, v in cells]))
        severe = [v for _, s, v in cells if s == max(config.SEVERITIES)]
        er_5 = float(np.mean(severe)) if severe else float("nan")
        bm = self.baseline_constants
        ok = (er_noise == self.er_noise
              and (er_5 == self.er_5 or (np.isnan(er_5) and np.isnan(self.er_5)))
              and rmce(er_noise, self.er_clean, bm["bm_noise"], bm["bm_clean"]) == self.rmce)
        if not ok:
            logger.warning("Metrics report aggregates do not match its cells")
        return ok

    def kind_means(self) -> Dict[str, float]:
        return {kind: float(np.mean([self.er_by[kind][s] for s in sorted(self.er_by[kind])]))
                for kind in self.er_by}

    def to_dict(self) -> dict:
        return {
            "schema": config.METRICS_SCHEMA,
            "er_clean": self.er_clean,
            "er_by": {k: {str(s): v for s, v in cells.items()}
                      for k, cells in self.er_by.items()},
            "er_noise": self.er_noise,
            "er_5": self.er_5,
            "mer": self.mer,
            "mer_clean": self.mer_clean,
            "rmce": self.rmce,
            "baseline_constants": dict(self.baseline_constants),
            "counts": dict(self.counts),
            "config_hash": self.config_hash,
            "run_manifest": self.run_manifest,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        if data.get("schema") != config.METRICS_SCHEMA:
            raise ValueError(f"unsupported metrics schema {data.get('schema')!r}")
        return cls(
            er_clean=data["er_clean"],
            er_by={k: {int(s): v for s, v in cells.items()}
                   for k, cells in data["er_by"].items()},
            er_noise=data["er_noise"], er_5=data["er_5"], mer=data["mer"],
            mer_clean=data["mer_clean"], rmce=data["rmce"],
            baseline_constants=data["baseline_constants"],
            counts=data.get("counts", {}), config_hash=data.get("config_hash", ""),
            run_manifest=data.get("run_manifest", ""))


# ---------------------------
# Benchmark
# ---------------------------

def _labels(clouds: Sequence[PointCloud]) -> np.ndarray:
    if any(c.label is None for c in clouds):
        raise ValueError("benchmark clouds must carry labels")
    return np.array([c.label for c in clouds], dtype=np.int64)


def load_corruption_cells(manifest_path) -> Cells:
    """Read a corruption manifest and the clouds it lists, grouped by cell."""
    manifest = load_json(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    cells: Cells = {}
    for entry in manifest["entries"]:
        key = (CorruptionKind(entry["kind"]), int(entry["severity"]))
        cells.setdefault(key, []).append(read_pcf(os.path.join(base, entry["output_path"])))
    logger.info(f"Loaded {sum(len(v) for v in cells.values())} corrupted clouds "
                f"in {len(cells)} cells from {manifest_path}")
    return cells


def benchmark(model: SetMixerClassifier, clean: Sequence[PointCloud], cells: Cells,
              bm_noise: float = config.BASELINE_NOISE,
              bm_clean: float = config.BASELINE_CLEAN,
              expected_hash: Optional[str] = None,
              batch_size: int = config.BATCH_SIZE) -> MetricsReport:
    """
    Evaluate a model on the clean set and every corruption cell

    Args:
        model: the classifier, evaluation mode.
        clean: labeled clean test clouds.
        cells: (kind, severity) -> labeled corrupted clouds.
        bm_noise: baseline model noise error rate.
        bm_clean: baseline model clean error rate.
        expected_hash: config hash the caller asked for.

    Returns:
        MetricsReport

    Raises:
        ChecksumMismatchError: the model config differs from expected_hash.
    """
    if expected_hash is not None and expected_hash != model.cfg.config_hash:
        raise ChecksumMismatchError(
            f"model config {model.cfg.config_hash[:12]} != requested {expected_hash[:12]}")

    labels = _labels(clean)
    predictions = predict(model, clean, batch_size)
    er_clean = error_rate(predictions, labels)
    mer_clean = class_mean_error(predictions, labels)
    counts = {"clean": len(clean)}
    logger.info(f"Clean error rate {er_clean:.4f} over {len(clean)} clouds")

    er_by: Dict[str, Dict[int, float]] = {}
    mer_by: Dict[str, Dict[int, float]] = {}
    for (kind, severity) in tqdm(sorted(cells, key=lambda k: (KINDS.index(k[0]), k[1])),
                                 desc="Cells", leave=False):
        clouds = cells[(kind, severity)]
        cell_labels = _labels(clouds)
        cell_predictions = predict(model, clouds, batch_size)
        er_by.setdefault(kind.value, {})[severity] = error_rate(cell_predictions, cell_labels)
        mer_by.setdefault(kind.value, {})[severity] = class_mean_error(
            cell_predictions, cell_labels)
        counts[_cell_key(kind, severity)] = len(clouds)

    report = MetricsReport.from_cells(er_clean, er_by, mer_clean, mer_by,
                                      bm_noise, bm_clean, counts,
                                      model.cfg.config_hash)
    logger.info(f"ER_noise {report.er_noise:.4f}, ER_5 {report.er_5:.4f}, "
                f"RmCE {report.rmce:.3f}")
    return report


def report_frame(reports: Dict[str, MetricsReport]) -> pd.DataFrame:
    rows = []
    for name, report in reports.items():
        means = report.kind_means()
        row = {"Model": name, "ER_clean": 100 * report.er_clean,
               "mER": 100 * report.mer, "ER_noise": 100 * report.er_noise,
               "ER_5": 100 * report.er_5, "RmCE": report.rmce}
        for kind, title in TABLE_COLUMNS.items():
            row[title] = 100 * means.get(kind.value, float("nan"))
        rows.append(row)
    return pd.DataFrame(rows)


def render_table(reports: Dict[str, MetricsReport]) -> str:
    """Aligned text table: error rates in percent, RmCE as a ratio."""
    frame = report_frame(reports)
    decimals = {c: 1 for c in frame.columns if c not in ("Model", "RmCE")}
    decimals["RmCE"] = 2
    return render_frame(frame, decimals)


# ---------------------------
# Published-rate replay
# ---------------------------

def replay_table(reference: Optional[dict] = None) -> pd.DataFrame:
    """
    Recompute RmCE and ER_noise from published error rates

    Args:
        reference: rows in the layout of data/published_error_rates.json;
            loaded from there when None.

    Returns:
        pd.DataFrame: one row per model with the published and replayed
        RmCE and ER_noise (mean of the per-kind columns).
    """
    if reference is None:
        reference = load_json_resource(
            config.PUBLISHED_RATES_FILE, "data/published_error_rates.json was not found.")
    frame = pd.DataFrame(reference["rows"])
    base = frame[frame["model"] == reference["baseline"]].iloc[0]
    kinds = [k.value for k in KINDS]
    frame["rmce_replayed"] = [
        rmce(n, c, base["er_noise"], base["er_clean"])
        for n, c in zip(frame["er_noise"], frame["er_clean"])]
    frame["rmce_delta"] = (frame["rmce_replayed"] - frame["rmce"]).abs()
    frame["er_noise_replayed"] = frame[kinds].mean(axis=1)
    frame["er_noise_delta"] = (frame["er_noise_replayed"] - frame["er_noise"]).abs()
    return frame


# ---------------------------
# Feature change under frozen grouping
# ---------------------------

@dataclass
class FeatureDiff:
    level: int
    magnitudes: np.ndarray
    centers: np.ndarray
    members: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "set": np.arange(len(self.magnitudes)),
            "magnitude": self.magnitudes,
            "center_x": self.centers[:, 0],
            "center_y": self.centers[:, 1],
            "center_z": self.centers[:, 2],
        })


def _level_features(model, cloud, plan, level) -> np.ndarray:
    result = model.forward(Tape(), [cloud], [plan])
    return result.level_features[level - 1].value[0]


def feature_diff(model: SetMixerClassifier, clean: PointCloud, corrupted: PointCloud,
                 level: int = 1) -> FeatureDiff:
    """
    Per-set feature change between a clean cloud and its corrupted copy

    The corrupted run reuses the clean run's sampling and grouping at every
    level, so set i means the same members in both runs.

    Args:
        model: the classifier, evaluation mode.
        clean: the clean cloud.
        corrupted: count-preserving corruption of it.
        level: SA level, 1-based.

    Returns:
        FeatureDiff: L2 norm of the feature change per set, the clean set
        centers and the member rows (into the level's input points).
    """
    if len(clean) != len(corrupted):
        raise CountMismatchError(
            f"clean has {len(clean)} points, corrupted has {len(corrupted)}")
    if not 1 <= level <= len(model.sa_layers):
        raise ValueError(f"level must be in 1..{len(model.sa_layers)}")
    clean_plan = model.plan(clean)
    corrupt_plan = model.plan(corrupted, frozen=clean_plan)
    before = _level_features(model, clean, clean_plan, level)
    after = _level_features(model, corrupted, corrupt_plan, level)
    geometry = clean_plan.levels[level - 1]
    return FeatureDiff(level=level,
                       magnitudes=np.sqrt(((after - before) ** 2).sum(axis=-1)),
                       centers=geometry.centers_out,
                       members=geometry.group.indices)


def impulse_sensitivity(model: SetMixerClassifier, clouds: Sequence[PointCloud],
                        seed: int = config.DEFAULT_SEED,
                        magnitude: float = 0.3) -> np.ndarray:
    """L2 change of the global feature when one point is moved by an impulse.

    Grouping is frozen to the clean cloud's, as in feature_diff.
    """
    rng = make_rng(seed, 2)
    changes = []
    for cloud in clouds:
        coords = cloud.coords.copy()
        row = rng.integers(0, len(cloud))
        coords[row] += rng.choice(np.array([-magnitude, magnitude]), size=3)
        moved = cloud.with_coords(coords)
        clean_plan = model.plan(cloud)
        before = model.forward(Tape(), [cloud], [clean_plan]).global_feature.value[0]
        after = model.forward(Tape(), [moved], [model.plan(moved, frozen=clean_plan)]
                              ).global_feature.value[0]
        changes.append(float(np.sqrt(((after - before) ** 2).sum())))
    return np.asarray(changes)


# ---------------------------
# Seed-averaged comparison
# ---------------------------

@dataclass
class Comparison:
    table: pd.DataFrame
    checks: List[dict]

    @property
    def failed(self) -> bool:
        return any(c["status"] == "fail" for c in self.checks)


def _mean_report(reports: Sequence[MetricsReport]) -> dict:
    kinds = reports[0].er_by.keys()
    return {
        "er_clean": float(np.mean([r.er_clean for r in reports])),
        "er_noise": float(np.mean([r.er_noise for r in reports])),
        "rmce": float(np.mean([r.rmce for r in reports])),
        "er_by": {k: {s: float(np.mean([r.er_by[k][s] for r in reports]))
                      for s in reports[0].er_by[k]} for k in kinds},
        "seeds": len(reports),
    }


def _check(name, status, detail) -> dict:
    return {"check": name, "status": status, "detail": detail}


def compare_reports(groups: Dict[str, Sequence[MetricsReport]],
                    reference: str = "set_mixer", baseline: str = "max_pool",
                    no_sort: str = "mixer_no_sort", query: str = "query_point",
                    max_clean_error: float = 0.10, severe_gap: float = 0.05,
                    tie_band: float = 0.005) -> Comparison:
    """
    Average per-seed reports per group and test the robustness orderings

    Checks whose groups are missing are reported as skipped.

    Args:
        groups: group name -> reports of its seeds.
        reference: the Set-Mixer group.
        baseline: the max-pool group.
        no_sort: the unsorted-mixer group.
        query: the Set-Mixer group using query-point centers.
        max_clean_error: bound on every group's mean clean error.
        severe_gap: required advantage at severity 5 for impulse and background.
        tie_band: ER_noise differences within this band are inconclusive.

    Returns:
        Comparison
    """
    means = {name: _mean_report(list(reports)) for name, reports in groups.items()}
    table = pd.DataFrame([
        {"group": name, "seeds": m["seeds"], "er_clean": m["er_clean"],
         "er_noise": m["er_noise"], "rmce": m["rmce"]}
        for name, m in means.items()])
    checks = []

    for name, m in means.items():
        ok = m["er_clean"] <= max_clean_error
        checks.append(_check(f"clean_error[{name}]", "pass" if ok else "fail",
                             f"{m['er_clean']:.4f} <= {max_clean_error}"))

    if reference in means and baseline in means:
        ref, base = means[reference], means[baseline]
        for kind in (CorruptionKind.IMPULSE.value, CorruptionKind.BACKGROUND.value):
            for severity in (3, 4, 5):
                try:
                    ref_delta = ref["er_by"][kind][severity] - ref["er_clean"]
                    base_delta = base["er_by"][kind][severity] - base["er_clean"]
                except KeyError:
                    checks.append(_check(f"{kind}/{severity}", "skipped", "cell missing"))
                    continue
                gap = base_delta - ref_delta
                ok = gap >= severe_gap if severity == 5 else gap > 0.0
                checks.append(_check(
                    f"{kind}/{severity}", "pass" if ok else "fail",
                    f"{reference} +{ref_delta:.4f} vs {baseline} +{base_delta:.4f}"))
    else:
        checks.append(_check("robustness_gap", "skipped",
                             f"needs groups '{reference}' and '{baseline}'"))

    if reference in means and no_sort in means:
        ref, other = means[reference]["er_noise"], means[no_sort]["er_noise"]
        checks.append(_check("sorting_helps", "pass" if ref < other else "fail",
                             f"{ref:.4f} vs {other:.4f}"))
    else:
        checks.append(_check("sorting_helps", "skipped",
                             f"needs groups '{reference}' and '{no_sort}'"))

    if reference in means and query in means:
        ref, other = means[reference]["er_noise"], means[query]["er_noise"]
        if abs(ref - other) <= tie_band:
            status = "inconclusive"
        else:
            status = "pass" if ref <= other else "fail"
        checks.append(_check("spatial_center", status, f"{ref:.4f} vs {other:.4f}"))
    else:
        checks.append(_check("spatial_center", "skipped",
                             f"needs groups '{reference}' and '{query}'"))

    return Comparison(table=table, checks=checks)

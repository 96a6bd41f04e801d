import datetime
import hashlib
import io
import json
import logging
import os
import struct
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

import config
from errors import ChecksumMismatchError, DataFormatError
from geom import PointCloud
from setmixer_model import ModelConfig, SetMixerClassifier
from tensor_nn import Adam, AdamState

logger = logging.getLogger(__name__)

INDEX_COLUMNS = ["path", "label", "family", "seed"]
_PCF_HEADER = struct.Struct("<4sIIi")


# ---------------------------
# Static resources and JSON
# ---------------------------

def load_json_resource(relative_path, error_message=None):
    """
    Load a JSON resource shipped under data/

    Tries the path relative to the working directory, then relative to the
    parent directory, then relative to the repository root.

    Args:
        relative_path (str): e.g. "data/corruption_params.json"
        error_message (str, optional): message of the FileNotFoundError

    Returns:
        dict: parsed document
    """
    candidates = [
        relative_path,
        os.path.join("..", relative_path),
        os.path.join(config.BASE_DIR, "..", relative_path),
    ]
    for path in candidates:
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as f:
                return json.load(f)
    raise FileNotFoundError(
        error_message or f"None of {', '.join(candidates)} were found.")


def _jsonable(value):
    """Convert datetimes, enums and numpy values into JSON-friendly types."""
    if isinstance(value, datetime.datetime):
        return value.isoformat()
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def atomic_write_bytes(path, data: bytes):
    """Write to a temporary file in the target directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def save_json(document, path):
    """
    Save a document as indented JSON, atomically

    Args:
        document (dict): the document; datetimes become ISO strings
        path (str): target file

    Returns:
        bool: True if successful, False otherwise
    """
    try:
        text = json.dumps(_jsonable(document), indent=4, sort_keys=True)
        atomic_write_bytes(path, (text + "\n").encode("utf-8"))
        logger.info(f"Saved {path}")
        return True
    except (OSError, TypeError, ValueError) as e:
        logger.error(f"Failed to save {path}: {e}")
        return False


def load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path} is not valid JSON: {e}") from e


# ---------------------------
# Point-cloud files (PCF1)
# ---------------------------

def encode_pcf(cloud: PointCloud) -> bytes:
    channels = cloud.feature_channels
    label = -1 if cloud.label is None else cloud.label
    header = _PCF_HEADER.pack(config.PCF_MAGIC, len(cloud), channels, label)
    rows = cloud.coords if cloud.feats is None else np.hstack([cloud.coords, cloud.feats])
    return header + np.ascontiguousarray(rows, dtype="<f8").tobytes()


def decode_pcf(data: bytes, source: str = "<bytes>") -> PointCloud:
    if len(data) < _PCF_HEADER.size:
        raise DataFormatError(f"{source}: truncated header")
    magic, n, channels, label = _PCF_HEADER.unpack_from(data)
    if magic != config.PCF_MAGIC:
        raise DataFormatError(f"{source}: bad magic {magic!r}")
    expected = _PCF_HEADER.size + n * (3 + channels) * 8
    if len(data) != expected:
        raise DataFormatError(
            f"{source}: expected {expected} bytes for N={n}, C={channels}, "
            f"got {len(data)}")
    rows = np.frombuffer(data, dtype="<f8", offset=_PCF_HEADER.size)
    rows = rows.reshape(n, 3 + channels).astype(np.float64)
    return PointCloud(coords=rows[:, :3],
                      feats=rows[:, 3:] if channels else None,
                      label=None if label < 0 else label)


def write_pcf(cloud: PointCloud, path):
    atomic_write_bytes(path, encode_pcf(cloud))


def read_pcf(path) -> PointCloud:
    with open(path, "rb") as f:
        return decode_pcf(f.read(), source=str(path))


# ---------------------------
# Dataset directories
# ---------------------------

def write_index(rows: List[dict], directory, name=config.DATASET_INDEX):
    """Write a CSV manifest with columns path,label,family,seed."""
    frame = pd.DataFrame(rows, columns=INDEX_COLUMNS)
    path = os.path.join(directory, name)
    atomic_write_bytes(path, frame.to_csv(index=False).encode("utf-8"))
    logger.info(f"Wrote {len(frame)} entries to {path}")
    return path


def read_index(directory, name=config.DATASET_INDEX) -> pd.DataFrame:
    path = os.path.join(directory, name)
    if not os.path.exists(path):
        raise FileNotFoundError(f"No dataset index at {path}")
    frame = pd.read_csv(path)
    missing = [c for c in INDEX_COLUMNS if c not in frame.columns]
    if missing:
        raise DataFormatError(f"{path}: missing columns {missing}")
    return frame


def load_split(directory, split=None) -> Tuple[List[PointCloud], pd.DataFrame]:
    """
    Load the clouds listed in a dataset index

    Args:
        directory (str): dataset directory holding index.csv
        split (str, optional): keep only rows whose path starts with
            "<split>/"; all rows when None

    Returns:
        tuple: (clouds, index rows)
    """
    frame = read_index(directory)
    if split is not None:
        frame = frame[frame["path"].str.startswith(f"{split}/")].reset_index(drop=True)
    clouds = [read_pcf(os.path.join(directory, p)) for p in frame["path"]]
    logger.info(f"Loaded {len(clouds)} clouds from {directory}"
                + (f" ({split})" if split else ""))
    return clouds, frame


def dataset_hash(directory) -> str:
    """SHA-256 over the index and every file it lists, in index order."""
    digest = hashlib.sha256()
    frame = read_index(directory)
    digest.update(frame.to_csv(index=False).encode("utf-8"))
    for path in frame["path"]:
        with open(os.path.join(directory, path), "rb") as f:
            digest.update(f.read())
    return digest.hexdigest()


def git_describe() -> str:
    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=config.BASE_DIR, capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError) as e:
        logger.warning(f"git describe failed: {e}")
        return "unknown"
    if result.returncode != 0:
        return "unknown"
    return result.stdout.strip() or "unknown"


@dataclass
class RunManifest:
    command: str
    config_hash: str
    dataset_hash: str
    seeds: Dict[str, int]
    hyperparameters: dict
    wall_clock_seconds: float
    git_describe: str = field(default_factory=git_describe)
    metrics_paths: List[str] = field(default_factory=list)
    timestamp: datetime.datetime = field(default_factory=datetime.datetime.now)


def write_run_manifest(manifest: RunManifest, path):
    return save_json(asdict(manifest), path)


# ---------------------------
# Checkpoints
# ---------------------------

@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    meta: dict

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.meta["config"])


def _record(name: str, array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype="<f8")
    shape = "x".join(str(d) for d in array.shape) or "scalar"
    return f"PARAM {name} {shape}\n".encode("ascii") + array.tobytes()


def save_checkpoint(path, model: SetMixerClassifier, optimizer: Optional[Adam] = None,
                    epoch: int = 0, extra: Optional[dict] = None):
    """
    Write parameters, batch-norm buffers and optimizer state

    Args:
        path (str): checkpoint file
        model (SetMixerClassifier): the model
        optimizer (Adam, optional): its moments are stored as extra records
        epoch (int): completed epochs
        extra (dict, optional): merged into the trailing JSON block
    """
    out = io.BytesIO()
    out.write(f"{config.CHECKPOINT_HEADER}\n".encode("ascii"))
    for p in model.parameters():
        out.write(_record(p.name, p.value))
    for name, value in model.buffers().items():
        out.write(_record(name, value))
    meta = {
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.config_hash,
        "epoch": epoch,
        "seed": model.seed,
        "timestamp": datetime.datetime.now(),
    }
    if optimizer is not None:
        for name, value in optimizer.state.m.items():
            out.write(_record(f"adam.m/{name}", value))
        for name, value in optimizer.state.v.items():
            out.write(_record(f"adam.v/{name}", value))
        meta["optimizer"] = optimizer.hyperparameters()
    meta.update(extra or {})
    out.write(b"END\n")
    out.write(json.dumps(_jsonable(meta), sort_keys=True).encode("utf-8") + b"\n")
    atomic_write_bytes(path, out.getvalue())
    logger.info(f"Saved checkpoint {path} (epoch {epoch}, "
                f"{model.num_parameters} parameters)")
    return path


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        stream = io.BytesIO(f.read())
    header = stream.readline().decode("ascii", errors="replace").strip()
    if header != config.CHECKPOINT_HEADER:
        raise DataFormatError(f"{path}: unexpected header '{header}'")

    records = {}
    while True:
        line = stream.readline()
        if not line:
            raise DataFormatError(f"{path}: missing END marker")
        line = line.decode("ascii", errors="replace").strip()
        if line == "END":
            break
        parts = line.split(" ")
        if len(parts) != 3 or parts[0] != "PARAM":
            raise DataFormatError(f"{path}: malformed record line '{line}'")
        _, name, shape_text = parts
        shape = () if shape_text == "scalar" else tuple(
            int(d) for d in shape_text.split("x"))
        size = int(np.prod(shape, dtype=np.int64)) * 8
        payload = stream.read(size)
        if len(payload) != size:
            raise DataFormatError(f"{path}: truncated payload for {name}")
        records[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)

    try:
        meta = json.loads(stream.readline().decode("utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: bad trailing JSON block: {e}") from e

    params, buffers, adam_m, adam_v = {}, {}, {}, {}
    for name, value in records.items():
        if name.startswith("adam.m/"):
            adam_m[name[len("adam.m/"):]] = value
        elif name.startswith("adam.v/"):
            adam_v[name[len("adam.v/"):]] = value
        elif name.endswith(".running_mean") or name.endswith(".running_var"):
            buffers[name] = value
        else:
            params[name] = value
    return Checkpoint(params=params, buffers=buffers, adam_m=adam_m,
                      adam_v=adam_v, meta=meta)


def restore_model(checkpoint: Checkpoint,
                  expected_hash: Optional[str] = None) -> SetMixerClassifier:
    """
    Rebuild the model stored in a checkpoint

    Args:
        checkpoint (Checkpoint): loaded checkpoint
        expected_hash (str, optional): config hash the caller asked for

    Returns:
        SetMixerClassifier

    Raises:
        ChecksumMismatchError: the stored config differs from the request
    """
    cfg = checkpoint.config
    if cfg.config_hash != checkpoint.meta.get("config_hash"):
        raise ChecksumMismatchError("checkpoint config does not match its stored hash")
    if expected_hash is not None and expected_hash != cfg.config_hash:
        raise ChecksumMismatchError(
            f"checkpoint config {cfg.config_hash[:12]} != requested "
            f"{expected_hash[:12]}")
    model = SetMixerClassifier(cfg, seed=checkpoint.meta.get("seed", config.DEFAULT_SEED))
    model.load_parameters(checkpoint.params)
    model.load_buffers(checkpoint.buffers)
    return model


def restore_optimizer(checkpoint: Checkpoint, model: SetMixerClassifier) -> Adam:
    settings = checkpoint.meta.get("optimizer", {})
    optimizer = Adam(model.parameters(),
                     lr=settings.get("lr", config.LEARNING_RATE),
                     betas=tuple(settings.get("betas", config.ADAM_BETAS)),
                     eps=settings.get("eps", config.ADAM_EPSILON))
    optimizer.state = AdamState(step=settings.get("step", 0),
                                m=dict(checkpoint.adam_m), v=dict(checkpoint.adam_v))
    return optimizer

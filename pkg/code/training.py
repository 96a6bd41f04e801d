"""Mini-batch training and batched prediction for SetMixerClassifier."""

import logging
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

import config
from errors import ShapeMismatchError
from geom import PointCloud
from setmixer_model import GeometryPlan, SetMixerClassifier, loss_and_gradients
from storage import atomic_write_bytes
from tensor_nn import Adam, make_rng, step_decay_lr

logger = logging.getLogger(__name__)


@dataclass
class TrainingParams:
    epochs: int = 30
    batch_size: int = config.BATCH_SIZE
    learning_rate: float = config.LEARNING_RATE
    lr_decay: float = config.LR_DECAY
    lr_decay_every: int = config.LR_DECAY_EVERY
    seed: int = config.DEFAULT_SEED

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size,
                "learning_rate": self.learning_rate, "lr_decay": self.lr_decay,
                "lr_decay_every": self.lr_decay_every, "seed": self.seed,
                "betas": list(config.ADAM_BETAS), "eps": config.ADAM_EPSILON}


@dataclass
class TrainingResult:
    optimizer: Adam
    history: pd.DataFrame
    wall_clock_seconds: float
    epochs: int = 0

    @property
    def final_accuracy(self) -> Optional[float]:
        if self.history.empty:
            return None
        return float(self.history["train_accuracy"].iloc[-1])


def plan_all(model: SetMixerClassifier, clouds: Sequence[PointCloud],
             desc: str = "Geometry") -> List[GeometryPlan]:
    """Geometry of every cloud; it does not change during training."""
    return [model.plan(c) for c in tqdm(clouds, desc=desc, leave=False)]


def train(model: SetMixerClassifier, clouds: Sequence[PointCloud],
          labels: Sequence[int], params: TrainingParams,
          optimizer: Optional[Adam] = None, start_epoch: int = 0,
          log_path: Optional[str] = None) -> TrainingResult:
    """Train with Adam and step-decayed learning rate.

    Args:
        model: the classifier, updated in place.
        clouds: training clouds, all with the same point count.
        labels: class per cloud.
        params: epochs, batch size, learning rate schedule and seed.
        optimizer: resumes from an existing optimizer when given.
        start_epoch: epoch number of the first epoch run. Shuffles and dropout
            masks are keyed by epoch number, so a resumed run repeats the
            uninterrupted one.
        log_path: per-epoch CSV (epoch, lr, loss, train_accuracy, seconds),
            rewritten after every epoch.

    Returns:
        TrainingResult
    """
    clouds = list(clouds)
    labels = np.asarray(labels, dtype=np.int64)
    if len(clouds) != len(labels):
        raise ShapeMismatchError(f"{len(clouds)} clouds but {len(labels)} labels")
    if len({len(c) for c in clouds}) > 1:
        raise ShapeMismatchError("training clouds must share one point count")

    optimizer = optimizer or Adam(model.parameters(), lr=params.learning_rate)
    start = time.perf_counter()
    plans = plan_all(model, clouds) if params.epochs > 0 else []
    rows = []

    for epoch in range(start_epoch, start_epoch + params.epochs):
        optimizer.lr = step_decay_lr(params.learning_rate, epoch,
                                     params.lr_decay, params.lr_decay_every)
        rng = make_rng(params.seed, 1, epoch)
        order = rng.permutation(len(clouds))
        epoch_start = time.perf_counter()
        total_loss, correct = 0.0, 0
        batches = range(0, len(order), params.batch_size)
        for offset in tqdm(batches, desc=f"Epoch {epoch + 1}", leave=False):
            idx = order[offset:offset + params.batch_size]
            loss, logits, tape = loss_and_gradients(
                model, [clouds[i] for i in idx], labels[idx],
                [plans[i] for i in idx], rng)
            optimizer.step()
            tape.commit_norm_updates()
            total_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == labels[idx]).sum())

        row = {
            "epoch": epoch + 1,
            "lr": optimizer.lr,
            "loss": total_loss / len(clouds),
            "train_accuracy": correct / len(clouds),
            "seconds": time.perf_counter() - epoch_start,
        }
        rows.append(row)
        logger.info(f"Epoch {row['epoch']}: loss {row['loss']:.4f}, "
                    f"train accuracy {row['train_accuracy']:.3f}, lr {row['lr']:.2e}")
        if log_path is not None:
            frame = pd.DataFrame(rows)
            atomic_write_bytes(log_path, frame.to_csv(index=False).encode("utf-8"))

    return TrainingResult(optimizer=optimizer, history=pd.DataFrame(rows),
                          wall_clock_seconds=time.perf_counter() - start,
                          epochs=params.epochs)


def predict_logits(model: SetMixerClassifier, clouds: Sequence[PointCloud],
                   batch_size: int = config.BATCH_SIZE,
                   plans: Optional[Sequence[GeometryPlan]] = None) -> np.ndarray:
    """Evaluation-mode logits; clouds are batched by point count."""
    clouds = list(clouds)
    logits = np.zeros((len(clouds), model.cfg.head.num_classes))
    counts = np.array([len(c) for c in clouds])
    for count in np.unique(counts):
        members = np.flatnonzero(counts == count)
        for offset in range(0, len(members), batch_size):
            idx = members[offset:offset + batch_size]
            batch_plans = None if plans is None else [plans[i] for i in idx]
            logits[idx] = model.logits([clouds[i] for i in idx], batch_plans)
    return logits


def predict(model: SetMixerClassifier, clouds: Sequence[PointCloud],
            batch_size: int = config.BATCH_SIZE) -> np.ndarray:
    return predict_logits(model, clouds, batch_size).argmax(axis=1)

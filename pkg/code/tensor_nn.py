"""
Minimal dense-array neural network engine with reverse-mode gradients.

Everything runs on float64 NumPy arrays. A Tape records every operation of a
forward pass in creation order (a Wengert list); backward() walks it in
reverse and accumulates gradients into the Parameters that were read.

It includes:

- Layers: `FcLayer` (affine + optional ReLU), `NormLayer` (layer norm,
  batch norm or none), `DropoutSpec` (inverted dropout).
- Functional forward passes: `fc_forward`, `dropout`, `layer_norm_forward`,
  `batch_norm_forward`, `softmax_xent`.
- Tape operations: linear, relu, dropout, layer/batch norm, transpose,
  reshape, concat, row gather, max/mean reduction, losses.
- Optimization: `adam_step`, `Adam`, `step_decay_lr`.
- Verification: `gradcheck` by central finite differences.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

import config
from errors import GraphCycleError, ShapeMismatchError

logger = logging.getLogger(__name__)

Matrix = np.ndarray


def make_rng(*keys: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by non-negative integers."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(keys))))


# ---------------------------
# Parameters and layer specs
# ---------------------------

@dataclass
class Parameter:
    """A named trainable array and its accumulated gradient."""
    name: str
    value: np.ndarray
    grad: Optional[np.ndarray] = None

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return int(self.value.size)


class Activation(str, Enum):
    RELU = "relu"
    NONE = "none"


class NormKind(str, Enum):
    LAYER_NORM = "layer_norm"
    BATCH_NORM = "batch_norm"
    NONE = "none"


@dataclass
class FcLayer:
    """Fully connected layer y = act(x W^T + b).

    Attributes:
        weight: (out, in) parameter.
        bias: (out,) parameter.
        activation: relu or none.
    """
    weight: Parameter
    bias: Parameter
    activation: Activation = Activation.NONE

    @classmethod
    def create(cls, name: str, in_dim: int, out_dim: int,
               activation: Activation, rng: np.random.Generator) -> "FcLayer":
        limit = 1.0 / math.sqrt(in_dim)
        weight = rng.uniform(-limit, limit, size=(out_dim, in_dim))
        return cls(
            weight=Parameter(f"{name}.weight", weight),
            bias=Parameter(f"{name}.bias", np.zeros(out_dim)),
            activation=Activation(activation),
        )

    @property
    def in_dim(self) -> int:
        return self.weight.value.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.value.shape[0]

    def parameters(self) -> List[Parameter]:
        return [self.weight, self.bias]


@dataclass
class NormLayer:
    """Per-channel normalization with affine gain and shift.

    Batch norm keeps running statistics for evaluation; they are buffers,
    not parameters.
    """
    kind: NormKind
    name: str = ""
    gain: Optional[Parameter] = None
    shift: Optional[Parameter] = None
    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None
    epsilon: float = config.NORM_EPSILON
    momentum: float = config.BATCH_NORM_MOMENTUM

    @classmethod
    def create(cls, name: str, kind: NormKind, channels: int) -> "NormLayer":
        kind = NormKind(kind)
        if kind == NormKind.NONE:
            return cls(kind=kind, name=name)
        layer = cls(
            kind=kind,
            name=name,
            gain=Parameter(f"{name}.gain", np.ones(channels)),
            shift=Parameter(f"{name}.shift", np.zeros(channels)),
        )
        if kind == NormKind.BATCH_NORM:
            layer.running_mean = np.zeros(channels)
            layer.running_var = np.ones(channels)
        return layer

    def parameters(self) -> List[Parameter]:
        if self.kind == NormKind.NONE:
            return []
        return [self.gain, self.shift]

    def buffers(self) -> Dict[str, np.ndarray]:
        if self.kind != NormKind.BATCH_NORM:
            return {}
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def update_running(self, mean: np.ndarray, var: np.ndarray) -> None:
        self.running_mean = (self.momentum * self.running_mean
                             + (1.0 - self.momentum) * mean)
        self.running_var = (self.momentum * self.running_var
                            + (1.0 - self.momentum) * var)


@dataclass
class DropoutSpec:
    """Inverted dropout: rate in [0, 1), identity outside training."""
    rate: float
    training: bool
    rng: Optional[np.random.Generator] = None

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")

    @property
    def active(self) -> bool:
        return self.training and self.rate > 0.0


# ---------------------------
# Functional forward passes
# ---------------------------

def fc_forward(layer: FcLayer, x: Matrix) -> Matrix:
    """Row-wise act(x W^T + b) over the last axis of x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_dim:
        raise ShapeMismatchError(
            f"{layer.weight.name}: expects {layer.in_dim} input channels, "
            f"got {x.shape[-1]}")
    y = x @ layer.weight.value.T + layer.bias.value
    if layer.activation == Activation.RELU:
        y = np.maximum(y, 0.0)
    return y


def dropout_mask(shape: Tuple[int, ...], spec: DropoutSpec) -> Optional[np.ndarray]:
    if not spec.active:
        return None
    if spec.rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    keep = spec.rng.random(shape) >= spec.rate
    return keep / (1.0 - spec.rate)


def dropout(x: Matrix, spec: DropoutSpec) -> Matrix:
    """Zero elements with probability rate and rescale the survivors."""
    mask = dropout_mask(np.shape(x), spec)
    return x if mask is None else x * mask


def _standardize(x: np.ndarray, axes, epsilon: float):
    mean = x.mean(axis=axes, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    return (x - mean) * inv_std, mean, var, inv_std


def layer_norm_forward(x: Matrix, gain: np.ndarray, shift: np.ndarray,
                       epsilon: float = config.NORM_EPSILON) -> Matrix:
    """Standardize every row over its channels, then apply gain and shift."""
    x_hat, _, _, _ = _standardize(np.asarray(x, dtype=np.float64), -1, epsilon)
    return x_hat * gain + shift


def batch_norm_forward(x: Matrix, gain: np.ndarray, shift: np.ndarray,
                       mean: np.ndarray, var: np.ndarray,
                       epsilon: float = config.NORM_EPSILON) -> Matrix:
    """Normalize channels with given statistics (evaluation mode)."""
    return (x - mean) / np.sqrt(var + epsilon) * gain + shift


def softmax_xent(logits: Matrix, labels: Sequence[int]) -> Tuple[float, Matrix]:
    """Mean softmax cross-entropy and its gradient with respect to logits.

    Args:
        logits: (n, K) scores.
        labels: n class indices.

    Returns:
        (loss, grad) with grad = (softmax - onehot) / n.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeMismatchError(f"{labels.shape} labels for {n} logit rows")
    log_norm = logsumexp(logits, axis=1)
    loss = float(np.mean(log_norm - logits[np.arange(n), labels]))
    grad = np.exp(logits - log_norm[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------
# Tape
# ---------------------------

class Node:
    """One recorded value; parents always precede it on the tape."""
    __slots__ = ("index", "value", "parents", "backward_fn", "param")

    def __init__(self, index, value, parents, backward_fn, param):
        self.index = index
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param

    @property
    def shape(self):
        return self.value.shape


class Tape:
    """Records a forward pass for reverse-mode differentiation."""

    def __init__(self):
        self.nodes: List[Node] = []
        self.norm_updates: List[Tuple[NormLayer, np.ndarray, np.ndarray]] = []
        self._param_nodes: Dict[int, Node] = {}

    def _record(self, value, parents=(), backward_fn=None, param=None) -> Node:
        node = Node(len(self.nodes), value, tuple(parents), backward_fn, param)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._record(np.asarray(value, dtype=np.float64))

    def param(self, parameter: Parameter) -> Node:
        node = self._param_nodes.get(id(parameter))
        if node is None:
            node = self._record(parameter.value, param=parameter)
            self._param_nodes[id(parameter)] = node
        return node

    def commit_norm_updates(self) -> None:
        """Fold the batch statistics seen in training mode into running stats."""
        for layer, mean, var in self.norm_updates:
            layer.update_running(mean, var)
        self.norm_updates.clear()

    # Layers

    def linear(self, x: Node, layer: FcLayer) -> Node:
        if x.shape[-1] != layer.in_dim:
            raise ShapeMismatchError(
                f"{layer.weight.name}: expects {layer.in_dim} input channels, "
                f"got {x.shape[-1]}")
        w = self.param(layer.weight)
        b = self.param(layer.bias)
        x_value = x.value

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            x2 = x_value.reshape(-1, x_value.shape[-1])
            return g @ w.value, g2.T @ x2, g2.sum(axis=0)

        out = self._record(x_value @ w.value.T + b.value, (x, w, b), backward)
        if layer.activation == Activation.RELU:
            out = self.relu(out)
        return out

    def relu(self, x: Node) -> Node:
        mask = x.value > 0.0
        return self._record(np.where(mask, x.value, 0.0), (x,),
                            lambda g: (g * mask,))

    def dropout(self, x: Node, spec: DropoutSpec) -> Node:
        mask = dropout_mask(x.shape, spec)
        if mask is None:
            return x
        return self._record(x.value * mask, (x,), lambda g: (g * mask,))

    def norm(self, x: Node, layer: NormLayer, training: bool) -> Node:
        if layer.kind == NormKind.LAYER_NORM:
            return self._normalize(x, layer, axes=(x.value.ndim - 1,))
        if layer.kind == NormKind.BATCH_NORM:
            axes = tuple(range(x.value.ndim - 1))
            if training:
                return self._normalize(x, layer, axes=axes, track=True)
            return self._batch_norm_eval(x, layer)
        return x

    def _normalize(self, x: Node, layer: NormLayer, axes, track=False) -> Node:
        x_hat, mean, var, inv_std = _standardize(x.value, axes, layer.epsilon)
        gain = self.param(layer.gain)
        shift = self.param(layer.shift)
        if track:
            self.norm_updates.append((layer, mean.reshape(-1), var.reshape(-1)))
        lead = tuple(range(x.value.ndim - 1))

        def backward(g):
            d_hat = g * gain.value
            dx = inv_std * (d_hat - d_hat.mean(axis=axes, keepdims=True)
                            - x_hat * (d_hat * x_hat).mean(axis=axes, keepdims=True))
            return dx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

        return self._record(x_hat * gain.value + shift.value,
                            (x, gain, shift), backward)

    def _batch_norm_eval(self, x: Node, layer: NormLayer) -> Node:
        gain = self.param(layer.gain)
        shift = self.param(layer.shift)
        inv_std = 1.0 / np.sqrt(layer.running_var + layer.epsilon)
        x_hat = (x.value - layer.running_mean) * inv_std
        lead = tuple(range(x.value.ndim - 1))

        def backward(g):
            return (g * gain.value * inv_std, (g * x_hat).sum(axis=lead),
                    g.sum(axis=lead))

        return self._record(x_hat * gain.value + shift.value,
                            (x, gain, shift), backward)

    # Structure

    def transpose(self, x: Node, axes: Sequence[int]) -> Node:
        axes = tuple(axes)
        inverse = tuple(np.argsort(axes))
        return self._record(np.transpose(x.value, axes), (x,),
                            lambda g: (np.transpose(g, inverse),))

    def swap_last(self, x: Node) -> Node:
        """Transpose the last two axes."""
        return self._record(np.swapaxes(x.value, -1, -2), (x,),
                            lambda g: (np.swapaxes(g, -1, -2),))

    def reshape(self, x: Node, shape) -> Node:
        original = x.shape
        return self._record(x.value.reshape(shape), (x,),
                            lambda g: (g.reshape(original),))

    def concat(self, xs: Sequence[Node], axis: int = -1) -> Node:
        xs = list(xs)
        if len(xs) == 1:
            return xs[0]
        sizes = [x.shape[axis] for x in xs]
        splits = np.cumsum(sizes)[:-1]
        return self._record(np.concatenate([x.value for x in xs], axis=axis),
                            xs, lambda g: tuple(np.split(g, splits, axis=axis)))

    def gather_rows(self, x: Node, index: np.ndarray) -> Node:
        """Select rows along the second-to-last axis.

        Args:
            x: (..., P, C) values.
            index: (..., Q) integer rows, same leading shape as x.

        Returns:
            Node: (..., Q, C); gradients are routed back to the source rows.
        """
        lead = x.shape[:-2]
        rows, channels = x.shape[-2:]
        index = np.asarray(index)
        if index.shape[:-1] != lead:
            raise ShapeMismatchError(
                f"index leading shape {index.shape[:-1]} != {lead}")
        flat_x = x.value.reshape(-1, rows, channels)
        flat_index = index.reshape(flat_x.shape[0], -1)
        batch = np.arange(flat_x.shape[0])[:, None]
        out = flat_x[batch, flat_index]

        def backward(g):
            grad = np.zeros_like(flat_x)
            np.add.at(grad, (batch, flat_index), g.reshape(out.shape))
            return (grad.reshape(x.shape),)

        return self._record(out.reshape(lead + (index.shape[-1], channels)),
                            (x,), backward)

    def reduce_max(self, x: Node, axis: int = -2) -> Node:
        arg = np.argmax(x.value, axis=axis)
        arg = np.expand_dims(arg, axis)
        out = np.take_along_axis(x.value, arg, axis=axis)

        def backward(g):
            grad = np.zeros_like(x.value)
            np.put_along_axis(grad, arg, np.expand_dims(g, axis), axis=axis)
            return (grad,)

        return self._record(np.squeeze(out, axis=axis), (x,), backward)

    def reduce_mean(self, x: Node, axis: int = -2) -> Node:
        count = x.shape[axis]
        shape = x.shape

        def backward(g):
            return (np.broadcast_to(np.expand_dims(g, axis) / count, shape).copy(),)

        return self._record(x.value.mean(axis=axis), (x,), backward)

    # Losses

    def softmax_xent(self, logits: Node, labels: Sequence[int]) -> Node:
        loss, grad = softmax_xent(logits.value, labels)
        return self._record(np.asarray(loss), (logits,), lambda g: (g * grad,))

    def squared_error(self, x: Node, target: np.ndarray) -> Node:
        diff = x.value - target
        return self._record(np.asarray((diff ** 2).sum()), (x,),
                            lambda g: (2.0 * g * diff,))

    def weighted_sum(self, x: Node, weights: np.ndarray) -> Node:
        return self._record(np.asarray((x.value * weights).sum()), (x,),
                            lambda g: (g * weights,))


def backward(tape: Tape, loss: Optional[Node] = None) -> Dict[str, np.ndarray]:
    """Reverse-mode accumulation over a recorded tape.

    Args:
        tape: the recorded forward pass.
        loss: scalar node to differentiate; defaults to the last node.

    Returns:
        dict: parameter name -> gradient. Gradients are also accumulated
        into each Parameter's grad attribute.
    """
    if loss is None:
        loss = tape.nodes[-1]
    if loss.value.size != 1:
        raise ShapeMismatchError("backward needs a scalar loss")

    grads: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
    for node in reversed(tape.nodes[:loss.index + 1]):
        g = grads.pop(node.index, None)
        if g is None:
            continue
        if node.param is not None:
            if node.param.grad is None:
                node.param.zero_grad()
            node.param.grad = node.param.grad + g
            continue
        if node.backward_fn is None:
            continue
        for parent, parent_grad in zip(node.parents, node.backward_fn(g)):
            if parent.index >= node.index:
                raise GraphCycleError(
                    f"node {node.index} depends on later node {parent.index}")
            if parent_grad is None:
                continue
            if parent.index in grads:
                grads[parent.index] = grads[parent.index] + parent_grad
            else:
                grads[parent.index] = parent_grad

    return {p.name: p.grad for p in
            (n.param for n in tape._param_nodes.values()) if p.grad is not None}


# ---------------------------
# Optimization
# ---------------------------

@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Iterable[Parameter], grads: Dict[str, np.ndarray],
              state: AdamState, lr: float = config.LEARNING_RATE,
              beta1: float = config.ADAM_BETAS[0],
              beta2: float = config.ADAM_BETAS[1],
              eps: float = config.ADAM_EPSILON) -> AdamState:
    """One bias-corrected Adam update, applied to the parameters in place."""
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for p in params:
        g = grads.get(p.name)
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m.get(p.name, np.zeros_like(p.value))
        v = state.v.get(p.name, np.zeros_like(p.value))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g ** 2
        state.m[p.name] = m
        state.v[p.name] = v
        p.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return state


def step_decay_lr(base_lr: float, epoch: int, decay: float = config.LR_DECAY,
                  every: int = config.LR_DECAY_EVERY) -> float:
    return base_lr * decay ** (epoch // every)


class Adam:
    """Adam over a fixed parameter list."""

    def __init__(self, params: List[Parameter], lr: float = config.LEARNING_RATE,
                 betas: Tuple[float, float] = config.ADAM_BETAS,
                 eps: float = config.ADAM_EPSILON):
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Optional[Dict[str, np.ndarray]] = None) -> None:
        if grads is None:
            grads = {p.name: p.grad for p in self.params if p.grad is not None}
        adam_step(self.params, grads, self.state, self.lr,
                  self.betas[0], self.betas[1], self.eps)

    def hyperparameters(self) -> dict:
        return {"step": self.state.step, "lr": self.lr,
                "betas": list(self.betas), "eps": self.eps}


# ---------------------------
# Gradient verification
# ---------------------------

@dataclass
class GradcheckReport:
    max_rel_error: float
    mean_rel_error: float
    checked: int
    worst_parameter: str
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float,
                   floor: float = config.GRADCHECK_ABS_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(loss_fn: Callable[[Tape], Node], params: Sequence[Parameter],
              tolerance: float = config.GRADCHECK_TOLERANCE,
              step: float = config.GRADCHECK_STEP,
              max_entries: Optional[int] = None,
              seed: int = 0) -> GradcheckReport:
    """Compare tape gradients with central finite differences.

    Args:
        loss_fn: builds the forward pass on the given tape and returns the
            scalar loss node; it must be deterministic.
        params: parameters to check.
        tolerance: pass threshold on the maximum relative error.
        step: finite-difference half step.
        max_entries: coordinates sampled per parameter; every coordinate when
            None or 0.
        seed: sampling seed.

    Returns:
        GradcheckReport
    """
    for p in params:
        p.grad = None
    tape = Tape()
    backward(tape, loss_fn(tape))
    analytic = {p.name: (p.grad if p.grad is not None else np.zeros_like(p.value))
                for p in params}

    rng = np.random.default_rng(seed)
    errors: List[float] = []
    worst = ("", -1.0)
    for p in params:
        flat = p.value.reshape(-1)
        if not max_entries or max_entries >= flat.size:
            entries = np.arange(flat.size)
        else:
            entries = rng.choice(flat.size, size=max_entries, replace=False)
        for i in entries:
            original = flat[i]
            flat[i] = original + step
            plus = float(loss_fn(Tape()).value)
            flat[i] = original - step
            minus = float(loss_fn(Tape()).value)
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            err = relative_error(float(analytic[p.name].reshape(-1)[i]), numeric)
            errors.append(err)
            if err > worst[1]:
                worst = (p.name, err)

    report = GradcheckReport(
        max_rel_error=max(errors) if errors else 0.0,
        mean_rel_error=float(np.mean(errors)) if errors else 0.0,
        checked=len(errors),
        worst_parameter=worst[0],
        tolerance=tolerance,
    )
    logger.info(
        f"Gradcheck over {report.checked} entries: max rel. error "
        f"{report.max_rel_error:.3e} ({report.worst_parameter})")
    return report

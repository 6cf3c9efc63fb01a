"""
Dense float64 tensors with a per-batch reverse-mode gradient tape.
"""
import itertools
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_EPS = 1e-12
DEFAULT_GRAD_CHECK_STEP = 1e-5
GRAD_CHECK_STEP_RANGE = (1e-7, 1e-3)


class TensorError(Exception):
    """Base class for all tensor-related exceptions."""


class DimensionError(TensorError):
    """Raised when operand shapes do not agree."""


class NumericError(TensorError):
    """Raised when an operation receives or produces NaN/Inf."""


class ContractError(TensorError):
    """Raised when a caller breaks an operation contract."""


class Tensor:
    """Immutable row-major float64 array, optionally recorded on a GradTape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Optional[GradTape]" = None, node_id=None):
        array = np.array(data, dtype=np.float64)
        array.setflags(write=False)
        self.data = array
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> list:
        return list(self.data.shape)

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


@dataclass(frozen=True)
class _Record:
    output_id: int
    input_ids: tuple
    vjp: Callable


class GradTape:
    """
    Records operations on watched tensors for one forward pass.

    Records are appended in creation order, so walking them backwards visits
    nodes in reverse topological order exactly once.
    """

    def __init__(self):
        self._records: list = []
        self._ids = itertools.count()

    def __len__(self):
        return len(self._records)

    def watch(self, tensor) -> Tensor:
        data = tensor.data if isinstance(tensor, Tensor) else tensor
        return Tensor(data, tape=self, node_id=next(self._ids))

    def record(self, data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
        output = Tensor(data, tape=self, node_id=next(self._ids))
        input_ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self._records.append(_Record(output.node_id, input_ids, vjp))
        return output

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list:
        """Return d(sum target)/d(source) for every source, zeros when unreached."""
        if target.tape is not self:
            return [np.zeros_like(s.data) for s in sources]
        adjoints = {target.node_id: np.ones_like(target.data)}
        for record in reversed(self._records):
            upstream = adjoints.get(record.output_id)
            if upstream is None:
                continue
            for input_id, grad in zip(record.input_ids, record.vjp(upstream)):
                if input_id is None or grad is None:
                    continue
                if input_id in adjoints:
                    adjoints[input_id] = adjoints[input_id] + grad
                else:
                    adjoints[input_id] = grad
        return [
            adjoints.get(s.node_id, np.zeros_like(s.data))
            if s.tape is self
            else np.zeros_like(s.data)
            for s in sources
        ]


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _tape_of(inputs: Sequence[Tensor]) -> Optional[GradTape]:
    tapes = {id(t.tape): t.tape for t in inputs if t.tape is not None}
    if len(tapes) > 1:
        raise ContractError("Operands are recorded on different tapes.")
    return next(iter(tapes.values()), None)


def _emit(data, inputs: Sequence[Tensor], vjp: Callable, name: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{name} produced non-finite values.")
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(data)
    return tape.record(data, inputs, vjp)


def _require_matrix(t: Tensor, name: str):
    if t.data.ndim != 2:
        raise DimensionError(f"{name} expects a matrix, got shape {t.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_matrix(a, "matmul")
    _require_matrix(b, "matmul")
    if a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    return _emit(a_data @ b_data, (a, b), vjp, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a bias vector to every row of x."""
    x, bias = as_tensor(x), as_tensor(bias)
    _require_matrix(x, "add_bias")
    if bias.data.ndim != 1 or bias.data.shape[0] != x.data.shape[1]:
        raise DimensionError(f"bias {bias.shape} does not fit rows of {x.shape}")
    return _emit(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return _emit(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def tanh(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def tsum(x: Tensor) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    return _emit(np.array(x.data.sum()), (x,), lambda g: (np.full(shape, g),), "sum")


def sum_squares(x: Tensor) -> Tensor:
    x = as_tensor(x)
    data = x.data
    return _emit(np.array(np.sum(data * data)), (x,), lambda g: (2.0 * data * g,), "sum_squares")


def concat_columns(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_matrix(a, "concat_columns")
    _require_matrix(b, "concat_columns")
    if a.data.shape[0] != b.data.shape[0]:
        raise DimensionError(f"concat row counts differ: {a.shape} vs {b.shape}")
    split = a.data.shape[1]

    def vjp(g):
        return g[:, :split], g[:, split:]

    return _emit(np.concatenate([a.data, b.data], axis=1), (a, b), vjp, "concat_columns")


def segment(flat: Tensor, start: int, shape: Sequence[int]) -> Tensor:
    """Slice a contiguous block out of a 1-D tensor and reshape it."""
    flat = as_tensor(flat)
    if flat.data.ndim != 1:
        raise DimensionError(f"segment expects a vector, got shape {flat.shape}")
    size = int(np.prod(shape, dtype=np.int64))
    stop = start + size
    if start < 0 or stop > flat.data.shape[0]:
        raise DimensionError(f"segment [{start}:{stop}] outside vector of {flat.shape[0]}")
    length = flat.data.shape[0]

    def vjp(g):
        full = np.zeros(length)
        full[start:stop] = g.reshape(-1)
        return (full,)

    return _emit(flat.data[start:stop].reshape(tuple(shape)), (flat,), vjp, "segment")


def _guarded_norms(x: np.ndarray, eps: float):
    norms = np.linalg.norm(x, axis=1)
    return np.maximum(norms, eps), norms > eps


def cosine_distance_matrix(a: Tensor, b: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Entry (i, j) = 1 - cos(a_i, b_j) with eps-guarded norms."""
    a, b = as_tensor(a), as_tensor(b)
    _require_matrix(a, "cosine_distance_matrix")
    _require_matrix(b, "cosine_distance_matrix")
    if a.data.shape[1] != b.data.shape[1]:
        raise DimensionError(f"cosine operands differ in width: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data
    a_norm, a_live = _guarded_norms(a_data, eps)
    b_norm, b_live = _guarded_norms(b_data, eps)
    cos = (a_data @ b_data.T) / np.outer(a_norm, b_norm)

    def vjp(g):
        upstream = -g
        weighted = upstream * cos
        grad_a = (upstream @ (b_data / b_norm[:, None])) / a_norm[:, None]
        grad_a -= (weighted.sum(axis=1) * a_live / a_norm**2)[:, None] * a_data
        grad_b = (upstream.T @ (a_data / a_norm[:, None])) / b_norm[:, None]
        grad_b -= (weighted.sum(axis=0) * b_live / b_norm**2)[:, None] * b_data
        return grad_a, grad_b

    return _emit(1.0 - cos, (a, b), vjp, "cosine_distance_matrix")


def row_cosine_distance(a: Tensor, b: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Vector of 1 - cos(a_i, b_i) over paired rows."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape or a.data.ndim != 2:
        raise DimensionError(f"row cosine needs equal matrices: {a.shape} vs {b.shape}")
    a_data, b_data = a.data, b.data
    a_norm, a_live = _guarded_norms(a_data, eps)
    b_norm, b_live = _guarded_norms(b_data, eps)
    cos = np.sum(a_data * b_data, axis=1) / (a_norm * b_norm)

    def vjp(g):
        upstream = -g
        grad_a = b_data / (a_norm * b_norm)[:, None]
        grad_a -= (cos * a_live / a_norm**2)[:, None] * a_data
        grad_b = a_data / (a_norm * b_norm)[:, None]
        grad_b -= (cos * b_live / b_norm**2)[:, None] * b_data
        return upstream[:, None] * grad_a, upstream[:, None] * grad_b

    return _emit(1.0 - cos, (a, b), vjp, "row_cosine_distance")


def log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def soft_cross_entropy(logits: Tensor, targets) -> Tensor:
    """
    Mean over rows of the cross entropy between target rows and the row
    softmax of logits. Targets are constants; no gradient flows into them.
    """
    logits = as_tensor(logits)
    target_data = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    _require_matrix(logits, "soft_cross_entropy")
    if list(target_data.shape) != logits.shape:
        raise DimensionError(f"targets {list(target_data.shape)} do not match logits {logits.shape}")
    rows = logits.data.shape[0]
    log_probs = log_softmax_rows(logits.data)
    loss = -np.sum(target_data * log_probs) / rows

    def vjp(g):
        probs = np.exp(log_probs)
        mass = target_data.sum(axis=1, keepdims=True)
        return (g * (probs * mass - target_data) / rows,)

    return _emit(np.array(loss), (logits,), vjp, "soft_cross_entropy")


def cosine_similarity(a, b, eps: float = DEFAULT_EPS) -> float:
    a_data = as_tensor(a).data.reshape(-1)
    b_data = as_tensor(b).data.reshape(-1)
    if a_data.shape != b_data.shape or a_data.size == 0:
        raise DimensionError(f"cosine_similarity needs equal non-empty vectors: {a_data.shape} vs {b_data.shape}")
    denominator = max(np.linalg.norm(a_data), eps) * max(np.linalg.norm(b_data), eps)
    return float(np.dot(a_data, b_data) / denominator)


def softmax(v) -> Tensor:
    data = as_tensor(v).data.reshape(-1)
    if data.size == 0:
        raise DimensionError("softmax of an empty vector.")
    if not np.all(np.isfinite(data)):
        raise NumericError("softmax received non-finite input.")
    exps = np.exp(data - data.max())
    return Tensor(exps / exps.sum())


def grad_check(f: Callable, x, h: float = DEFAULT_GRAD_CHECK_STEP) -> float:
    """
    Compare tape gradients of scalar f at x with central differences.

    Returns max over coordinates of |g_tape - g_fd| / max(1, |g_fd|).
    """
    low, high = GRAD_CHECK_STEP_RANGE
    if not low < h < high:
        raise ContractError(f"grad_check step {h} outside ({low}, {high})")
    x = as_tensor(x)
    tape = GradTape()
    watched = tape.watch(x)
    output = as_tensor(f(watched))
    if output.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {output.shape}")
    (tape_grad,) = tape.gradient(output, [watched])

    base = x.data.reshape(-1)
    finite_diff = np.zeros(base.size)
    for i in range(base.size):
        step = np.zeros(base.size)
        step[i] = h
        forward = as_tensor(f(Tensor((base + step).reshape(x.data.shape)))).item()
        backward = as_tensor(f(Tensor((base - step).reshape(x.data.shape)))).item()
        finite_diff[i] = (forward - backward) / (2.0 * h)

    errors = np.abs(tape_grad.reshape(-1) - finite_diff) / np.maximum(1.0, np.abs(finite_diff))
    return float(errors.max()) if errors.size else 0.0

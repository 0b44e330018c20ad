"""
Reverse-mode gradients over dense float64 arrays.

Tensors wrap read-only numpy arrays. While a GradientTape is active, every
operation whose inputs depend on a watched tensor records a backward function
on that tape; `backward` replays the records in reverse creation order, so the
accumulation order is fixed and results are bitwise reproducible.
"""

import contextvars
import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from utils.error_handlers import InvalidArgumentError, NumericError

logger = logging.getLogger(__name__)

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """Immutable float64 array value"""

    __slots__ = ("data",)

    def __init__(self, data: ArrayLike):
        if isinstance(data, Tensor):
            arr = data.data
        else:
            arr = np.array(data, dtype=np.float64)
            arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        arr = np.asarray(arr, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("operation produced a non-finite value")
        if arr.flags.writeable:
            arr.setflags(write=False)
        out = cls.__new__(cls)
        out.data = arr
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Writable copy of the underlying values"""
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidArgumentError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Record:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradientTape:
    """
    Records differentiable operations for one training context.

    Use as a context manager; tensors registered with `watch` are the
    parameters whose gradients `backward` reports. A tape is owned by a
    single training step and is not thread-safe.
    """

    def __init__(self):
        self._records: List[_Record] = []
        self._watched: Dict[str, Tensor] = {}
        self._stopped: Dict[str, Tensor] = {}
        self._tracked: set = set()
        # outputs of stop_gradient, keyed by id; the tensors are held so ids stay unique
        self._cuts: Dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "GradientTape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def watch(self, value: ArrayLike, name: str, stop_gradient: bool = False) -> Tensor:
        """Register a parameter; stop-gradient parameters are registered but never tracked"""
        if name in self._watched or name in self._stopped:
            raise InvalidArgumentError(f"parameter '{name}' is already registered on this tape")
        tensor = Tensor(value) if not isinstance(value, Tensor) else Tensor._wrap(value.data)
        if stop_gradient:
            self._stopped[name] = tensor
        else:
            self._watched[name] = tensor
            self._tracked.add(id(tensor))
        return tensor

    @property
    def parameter_names(self) -> List[str]:
        return list(self._watched) + list(self._stopped)

    def is_tracked(self, tensor: Tensor) -> bool:
        return id(tensor) in self._tracked

    def mark_stopped(self, tensor: Tensor) -> None:
        """Record `tensor` as a gradient cut: operations on it never reach the tensors it was cut from"""
        self._cuts[id(tensor)] = tensor
        self._tracked.discard(id(tensor))

    def is_stopped(self, tensor: Tensor) -> bool:
        return id(tensor) in self._cuts

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], backward_fn: Callable) -> None:
        self._records.append(_Record(output, inputs, backward_fn))
        self._tracked.add(id(output))

    def gradient(self, loss: Tensor) -> Dict[str, np.ndarray]:
        if not isinstance(loss, Tensor) or loss.size != 1 or loss.ndim > 1:
            shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
            raise InvalidArgumentError(f"backward needs a scalar loss, got {shape}")

        grads: Dict[int, np.ndarray] = {}
        if self.is_tracked(loss):
            grads[id(loss)] = np.ones_like(loss.data)
            for rec in reversed(self._records):
                g = grads.get(id(rec.output))
                if g is None:
                    continue
                input_grads = rec.backward_fn(g)
                for tensor, ig in zip(rec.inputs, input_grads):
                    if ig is None or id(tensor) not in self._tracked:
                        continue
                    key = id(tensor)
                    grads[key] = grads[key] + ig if key in grads else ig

        result: Dict[str, np.ndarray] = {}
        for name, tensor in self._watched.items():
            g = grads.get(id(tensor))
            result[name] = np.zeros_like(tensor.data) if g is None else np.array(g, dtype=np.float64)
        for name, tensor in self._stopped.items():
            result[name] = np.zeros_like(tensor.data)
        return result


def active_tape() -> Optional[GradientTape]:
    return _ACTIVE_TAPE.get()


def as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(out: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    result = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None and any(tape.is_tracked(t) for t in inputs):
        tape.record(result, inputs, backward_fn)
    return result


def backward(loss: Tensor, tape: GradientTape) -> Dict[str, np.ndarray]:
    """Gradient of a scalar loss w.r.t. every parameter registered on `tape`"""
    return tape.gradient(loss)


def stop_gradient(value: ArrayLike) -> Tensor:
    """Same values, cut from the tape: nothing upstream receives gradient through it"""
    t = as_tensor(value)
    out = Tensor.__new__(Tensor)
    out.data = t.data
    tape = active_tape()
    if tape is not None:
        tape.mark_stopped(out)
    return out


# --------------------------------------------------------------------------- #
# Elementwise and linear-algebra operations
# --------------------------------------------------------------------------- #
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Sum of equal shapes, or a row vector broadcast over the rows of a matrix"""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g))
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        return _emit(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0)))
    raise InvalidArgumentError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _emit(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: ArrayLike, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def transpose(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise InvalidArgumentError(f"transpose needs a matrix, got shape {a.shape}")
    return _emit(a.data.T.copy(), (a,), lambda g: (g.T,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def total(a: ArrayLike) -> Tensor:
    """Sum of all entries as a scalar"""
    a = as_tensor(a)
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: ArrayLike) -> Tensor:
    """Mean of all entries as a scalar"""
    a = as_tensor(a)
    if a.size == 0:
        raise InvalidArgumentError("mean of an empty tensor")
    shape, n = a.shape, a.size
    return _emit(np.array(a.data.sum() / n), (a,), lambda g: (np.full(shape, float(g) / n),))


def concat(parts: Sequence[ArrayLike], axis: int = 1) -> Tensor:
    """Concatenate matrices along columns (axis=1) or rows (axis=0)"""
    tensors = tuple(as_tensor(p) for p in parts)
    if not tensors:
        raise InvalidArgumentError("concat needs at least one tensor")
    if any(t.ndim != 2 for t in tensors):
        raise InvalidArgumentError("concat supports matrices only")
    other = 1 - axis
    if len({t.shape[other] for t in tensors}) != 1:
        raise InvalidArgumentError(f"concat: ragged shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward_fn(g):
        if axis == 1:
            return tuple(g[:, bounds[k]:bounds[k + 1]] for k in range(len(tensors)))
        return tuple(g[bounds[k]:bounds[k + 1], :] for k in range(len(tensors)))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def take_columns(a: ArrayLike, columns: Sequence[int]) -> Tensor:
    """Sub-matrix of the given (distinct) column indices, in the given order"""
    a = as_tensor(a)
    idx = np.asarray(list(columns), dtype=np.int64)
    if a.ndim != 2:
        raise InvalidArgumentError(f"take_columns needs a matrix, got shape {a.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise InvalidArgumentError(f"column index out of range for width {a.shape[1]}")
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[:, idx] = g
        return (full,)

    return _emit(a.data[:, idx], (a,), backward_fn)


def pick(a: ArrayLike, columns: Sequence[int]) -> Tensor:
    """Row-wise gather: out[r] = a[r, columns[r]]"""
    a = as_tensor(a)
    idx = np.asarray(columns, dtype=np.int64)
    if a.ndim != 2 or idx.shape != (a.shape[0],):
        raise InvalidArgumentError(f"pick: shape {a.shape} with {idx.shape} indices")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward_fn(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _emit(a.data[rows, idx], (a,), backward_fn)


# --------------------------------------------------------------------------- #
# Normalizers and distances
# --------------------------------------------------------------------------- #
def _check_logits(z: Tensor, op: str) -> None:
    if z.size == 0 or z.shape[-1] == 0:
        raise InvalidArgumentError(f"{op} of an empty tensor")
    if z.ndim not in (1, 2):
        raise InvalidArgumentError(f"{op} supports vectors and matrices, got shape {z.shape}")
    if not np.all(np.isfinite(z.data)):
        raise NumericError(f"{op} received non-finite logits")


def _softmax_values(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(logits: ArrayLike) -> Tensor:
    """Row-wise softmax with max-subtraction"""
    z = as_tensor(logits)
    _check_logits(z, "softmax")
    s = _softmax_values(z.data)
    return _emit(s, (z,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def log_softmax(logits: ArrayLike) -> Tensor:
    """Row-wise log-softmax via the log-sum-exp shift"""
    z = as_tensor(logits)
    _check_logits(z, "log_softmax")
    shifted = z.data - z.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    s = np.exp(out)
    return _emit(out, (z,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def pairwise_distance(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Euclidean distances: out[i, j] = ||a_i - b_j||; the subgradient at zero distance is 0"""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidArgumentError(f"pairwise_distance: incompatible shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))

    def backward_fn(g):
        safe = np.where(dist > 0, dist, 1.0)
        coef = np.where(dist > 0, g / safe, 0.0)[:, :, None] * diff
        return (coef.sum(axis=1), -coef.sum(axis=0))

    return _emit(dist, (a, b), backward_fn)


# --------------------------------------------------------------------------- #
# Verification
# --------------------------------------------------------------------------- #
ScalarFn = Callable[[Mapping[str, Tensor]], Tensor]


def analytic_gradient(fn: ScalarFn, params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    with GradientTape() as tape:
        bound = {name: tape.watch(value, name) for name, value in params.items()}
        loss = fn(bound)
    return backward(loss, tape)


def numeric_gradient(fn: ScalarFn, params: Mapping[str, np.ndarray], eps: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central differences, one entry at a time, evaluated without a tape"""
    if eps <= 0:
        raise InvalidArgumentError(f"eps must be positive, got {eps}")
    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    result: Dict[str, np.ndarray] = {}

    def evaluate(values):
        out = fn({n: Tensor(v) for n, v in values.items()}).item()
        if not np.isfinite(out):
            raise NumericError("finite-difference probe produced a non-finite value")
        return out

    for name, value in base.items():
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + eps
            f_plus = evaluate(base)
            flat[k] = original - eps
            f_minus = evaluate(base)
            flat[k] = original
            grad.reshape(-1)[k] = (f_plus - f_minus) / (2 * eps)
        result[name] = grad
    return result


def finite_difference_check(fn: ScalarFn, params: Mapping[str, np.ndarray], eps: float = 1e-5) -> float:
    """
    Compare tape gradients against central differences.

    Returns:
        max over all parameter entries of |analytic - numeric| / max(1, |analytic|)
    """
    analytic = analytic_gradient(fn, params)
    numeric = numeric_gradient(fn, params, eps)
    worst = 0.0
    for name in params:
        a, n = analytic[name], numeric[name]
        if a.size == 0:
            continue
        err = np.abs(a - n) / np.maximum(1.0, np.abs(a))
        worst = max(worst, float(err.max()))
    logger.debug(f"finite-difference check over {len(params)} parameters: max relative error {worst:.3e}")
    return worst

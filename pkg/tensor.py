# tensor.py
#
# Мінімальний рушій щільних тензорів зі зворотним автодиференціюванням.
# Дані: numpy float64, C-порядок (рядковий); останні дві осі утворюють матрицю,
# провідні осі відповідають батчу. Порядок редукцій фіксований, тому повтор
# обчислення з тим самим seed дає побітово однакові значення і градієнти.

import logging
import threading
from contextlib import contextmanager
from typing import Any, Callable, Iterator, Optional, Sequence, Union

import numpy as np

from exceptions import ContractError, DimensionError, NumericError

logger = logging.getLogger(__name__)

DTYPE = np.float64

# окремий прапорець на потік: семплінг у eval іде паралельно через to_thread
_grad_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Вимикає запис операцій на стрічку (семплінг, заморожені передбачення)."""
    previous = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Сумує градієнт по осях, які були розмножені броадкастом."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """
    Базовий клас примітиву. forward отримує масиви батьків,
    backward повертає по одному градієнту на кожного батька.
    """

    def __init__(self, *parents: "Tensor"):
        self.parents = parents

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *parents: "Tensor", **kwargs: Any) -> "Tensor":
        func = cls(*parents)
        out_data = func.forward(*(p.data for p in parents), **kwargs)
        requires_grad = grad_enabled() and any(p.requires_grad for p in parents)
        return Tensor(out_data, requires_grad=requires_grad, _creator=func if requires_grad else None)


class Tensor:
    """Щільний тензор float64, що бере участь у зворотному диференціюванні."""

    __slots__ = ("data", "requires_grad", "grad", "_creator", "name")
    __array_priority__ = 1000.0

    def __init__(
        self,
        data: Union[np.ndarray, float, Sequence],
        requires_grad: bool = False,
        name: Optional[str] = None,
        _creator: Optional[Function] = None,
    ):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=DTYPE))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._creator = _creator
        self.name = name

    # --- Властивості ---
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._creator is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() очікує скаляр, отримано форму {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # --- Оператори ---
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(as_tensor(other), self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(as_tensor(other), self)
    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)
    def __rmul__(self, other): return self.__mul__(other)
    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return Mean.apply(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape: int) -> "Tensor":
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes: int) -> "Tensor":
        return Transpose.apply(self, axes=axes)

    @property
    def mT(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return Transpose.apply(self, axes=tuple(axes))

    def detach(self) -> "Tensor":
        return detach(self)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> "ComputationTape":
        """Заповнює grad для всіх предків з requires_grad; градієнти накопичуються."""
        if self.data.size != 1:
            raise ContractError(f"backward() вимагає скалярний корінь, отримано форму {self.shape}")
        tape = ComputationTape.from_root(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(tape.entries):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.requires_grad:
                node.grad = grad.copy() if node.grad is None else node.grad + grad
            creator = node._creator
            if creator is None:
                continue
            parent_grads = creator.backward(grad)
            for parent, parent_grad in zip(creator.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = parent_grad if key not in pending else pending[key] + parent_grad
        return tape


class ComputationTape:
    """Записи у топологічному порядку: батьки завжди передують нащадкам."""

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_root(cls, root: Tensor) -> "ComputationTape":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        # ітеративний DFS, бо глибина графа трансформера перевищує ліміт рекурсії
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._creator is not None:
                for parent in reversed(node._creator.parents):
                    if id(parent) not in visited and parent.requires_grad:
                        stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def as_tensor(value: Union[Tensor, np.ndarray, float]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# --- ПРИМІТИВИ ---

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return _unbroadcast(grad * self.b, self.a.shape), _unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Scale(Function):
    def forward(self, a, factor: float):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class MatMul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, np.swapaxes(self.b, -1, -2))
        grad_b = np.matmul(np.swapaxes(self.a, -1, -2), grad)
        return _unbroadcast(grad_a, self.a.shape), _unbroadcast(grad_b, self.b.shape)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        self.count = a.size if axis is None else a.shape[axis]
        return np.asarray(a.mean(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class SquaredNorm(Function):
    def forward(self, a):
        self.a = a
        return np.asarray(np.sum(a * a))

    def backward(self, grad):
        return (2.0 * grad * self.a,)


class SoftmaxRows(Function):
    def forward(self, a):
        if np.isnan(a).any():
            raise NumericError("softmax_rows: вхід містить NaN")
        shifted = a - a.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        self.out = exp / exp.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class SiLU(Function):
    """x·σ(x). Обрана нелінійність блоку прямого поширення."""

    def forward(self, a):
        self.a = a
        self.sig = 1.0 / (1.0 + np.exp(-a))
        return a * self.sig

    def backward(self, grad):
        sig = self.sig
        return (grad * sig * (1.0 + self.a * (1.0 - sig)),)


class RMSNorm(Function):
    """Нормалізація кожного рядка на його середньоквадратичне значення."""

    def forward(self, a, eps: float = 1e-6):
        self.a = a
        self.rms = np.sqrt(np.mean(a * a, axis=-1, keepdims=True) + eps)
        return a / self.rms

    def backward(self, grad):
        n = self.a.shape[-1]
        r = self.rms
        dot = np.sum(grad * self.a, axis=-1, keepdims=True)
        return (grad / r - self.a * dot / (n * r ** 3),)


class Slice(Function):
    def forward(self, a, axis: int, start: int, stop: int):
        self.shape, self.axis = a.shape, axis
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, stop)
        self.index = tuple(index)
        return a[self.index].copy()

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=DTYPE)
        out[self.index] = grad
        return (out,)


class Concat(Function):
    def forward(self, *arrays, axis: int):
        self.axis = axis
        self.sizes = [arr.shape[axis] for arr in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Reshape(Function):
    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes):
        self.axes = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, grad):
        return (np.ascontiguousarray(np.transpose(grad, np.argsort(self.axes))),)


class TakeRows(Function):
    """Вибір рядків таблиці ембеддінгів за цілими індексами."""

    def forward(self, table, indices: np.ndarray):
        self.shape, self.indices = table.shape, indices
        return table[indices]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=DTYPE)
        np.add.at(out, self.indices, grad)
        return (out,)


# --- ФУНКЦІОНАЛЬНИЙ ІНТЕРФЕЙС ---

def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a, b) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def div(a, b) -> Tensor:
    return Div.apply(as_tensor(a), as_tensor(b))


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=float(factor))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: несумісні форми {a.shape} та {b.shape}")
    return MatMul.apply(a, b)


def squared_norm(a: Tensor) -> Tensor:
    return SquaredNorm.apply(a)


def softmax_rows(a: Tensor) -> Tensor:
    return SoftmaxRows.apply(a)


def silu(a: Tensor) -> Tensor:
    return SiLU.apply(a)


def rms_norm(a: Tensor, eps: float = 1e-6) -> Tensor:
    return RMSNorm.apply(a, eps=eps)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return Slice.apply(a, axis=axis % a.ndim, start=start, stop=stop)


def slice_tokens(a: Tensor, start: int, stop: int) -> Tensor:
    """Зріз уздовж осі токенів (передостання вісь)."""
    return slice_axis(a, -2, start, stop)


def concat_tokens(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_tokens: порожній список")
    axis = parts[0].ndim - 2
    for part in parts[1:]:
        if part.ndim != parts[0].ndim or part.shape[-1] != parts[0].shape[-1]:
            raise DimensionError(f"concat_tokens: несумісні форми {parts[0].shape} та {part.shape}")
    return Concat.apply(*parts, axis=axis)


def take_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    return TakeRows.apply(table, indices=np.asarray(indices, dtype=np.int64))


def detach(a: Tensor) -> Tensor:
    """Копія значень без зв'язку зі стрічкою: внесок у градієнт рівно нульовий."""
    return Tensor(a.data.copy(), requires_grad=False)


def mse(a: Tensor, b: Union[Tensor, np.ndarray]) -> Tensor:
    diff = a - as_tensor(b)
    return (diff * diff).mean()


# --- ОРАКУЛ СКІНЧЕННИХ РІЗНИЦЬ ---

def fd_gradient(f: Callable[[Tensor], Union[Tensor, float]], theta: Tensor, step: float = 1e-6) -> Tensor:
    """
    Центральна різниця (f(θ+s·e_i) − f(θ−s·e_i)) / (2s) по кожній координаті.
    θ змінюється на місці й відновлюється після кожної координати.
    """
    if step <= 0:
        raise ContractError(f"fd_gradient: крок має бути > 0, отримано {step}")

    def _value(result) -> float:
        return result.item() if isinstance(result, Tensor) else float(result)

    flat = theta.data.reshape(-1)
    grad = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = _value(f(theta))
            flat[i] = original - step
            minus = _value(f(theta))
            flat[i] = original
            grad[i] = (plus - minus) / (2.0 * step)
    return Tensor(grad.reshape(theta.shape))


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a−b| / max(max|a|, max|b|, 1e-12)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / denom)


def flatten_grads(params: Sequence[Tensor]) -> np.ndarray:
    return np.concatenate([
        (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1) for p in params
    ])


def assign_grads(params: Sequence[Tensor], flat: np.ndarray) -> None:
    offset = 0
    for p in params:
        p.grad = flat[offset:offset + p.size].reshape(p.shape).copy()
        offset += p.size

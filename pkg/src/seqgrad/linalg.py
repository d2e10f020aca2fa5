"""Dense array kernels and the scalar nonlinearities used by every cell.

Matrices and vectors are plain ``numpy.ndarray`` objects (row-major,
float64 by default).  The helpers here add shape checking and the
numerically stable forms of sigmoid and softmax; the rest of the package
calls them on either single vectors or batches whose last axis is the
feature axis.
"""

from __future__ import annotations

import numpy as np

Matrix = np.ndarray
Vector = np.ndarray

DTYPE = np.float64

# When set, constructors and matmul reject NaN/Inf.
CHECKED = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def _check_finite(a: np.ndarray, what: str) -> None:
    if CHECKED and not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{what} contains non-finite entries")


def matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Build a 2-D float array, optionally from flat row-major ``data``."""
    a = np.asarray(data, dtype=DTYPE)
    if rows is not None and cols is not None:
        if a.size != rows * cols:
            raise ShapeError(f"data length {a.size} != {rows}x{cols}")
        a = a.reshape(rows, cols)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    _check_finite(a, "matrix")
    return np.ascontiguousarray(a)


def vector(data) -> Vector:
    a = np.asarray(data, dtype=DTYPE)
    if a.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {a.shape}")
    _check_finite(a, "vector")
    return a


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    _check_finite(out, "matmul result")
    return out


def hadamard(a: Vector, b: Vector) -> Vector:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard of {a.shape} and {b.shape}")
    return a * b


def as_float(x) -> np.ndarray:
    """As an array, keeping any floating dtype (extended precision included)."""
    a = np.asarray(x)
    return a if a.dtype.kind == "f" else a.astype(DTYPE)


def sigmoid(x) -> np.ndarray:
    """Logistic function, split on sign so ``exp`` never overflows."""
    x = as_float(x)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_grad(s) -> np.ndarray:
    """Derivative of sigmoid expressed through its output ``s``."""
    return s * (1.0 - s)


def tanh_act(x) -> np.ndarray:
    return np.tanh(as_float(x))


def tanh_grad(t) -> np.ndarray:
    """Derivative of tanh expressed through its output ``t``."""
    return 1.0 - t * t


def softmax(z) -> np.ndarray:
    """Softmax over the last axis with max-subtraction."""
    z = as_float(z)
    if z.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Rng:
    """Seeded random stream backed by the Philox-4x64 counter-based generator.

    Two instances built from the same seed yield identical draws.  The full
    generator state is a JSON-serializable dict, which is what checkpoints
    store.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, p) -> int:
        return int(self._gen.choice(n, p=p))

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return _jsonable(st)

    def set_state(self, state: dict) -> None:
        st = _from_jsonable(state)
        self._gen.bit_generator.state = st


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj

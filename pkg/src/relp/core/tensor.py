"""Immutable dense tensor backed by a numpy buffer."""

from __future__ import annotations

import itertools
import threading

import numpy as np

_next_id = itertools.count()
_id_lock = threading.Lock()

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Raised when an op receives operands whose shapes it cannot combine."""

    def __init__(self, op: str, shapes, detail: str = ""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        msg = f"{op}: incompatible shapes {', '.join(str(s) for s in self.shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    """Raised in debug mode when an op produces NaN or Inf."""


def _new_id() -> int:
    with _id_lock:
        return next(_next_id)


class Tensor:
    """A read-only n-dimensional float array with a process-unique id.

    The id is what a :class:`~relp.core.tape.Tape` uses to refer to the
    tensor, so two tensors holding equal values are still distinct nodes.
    """

    __slots__ = ("data", "id", "requires_record")

    def __init__(self, data, dtype=None, requires_record: bool = True):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if arr.dtype not in FLOAT_DTYPES:
            raise TypeError(f"Tensor dtype must be float32 or float64, got {arr.dtype}")
        arr.flags.writeable = False
        self.data = arr
        self.id = _new_id()
        self.requires_record = requires_record

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: take ownership of a freshly computed array without copying
        t = object.__new__(cls)
        arr.flags.writeable = False
        t.data = arr
        t.id = _new_id()
        t.requires_record = True
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        return f"Tensor(id={self.id}, shape={self.shape}, dtype={self.dtype})"

    # operator sugar; the ops module is imported lazily to avoid a cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from . import ops
        return ops.index(self, key)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

"""Recording of primitive applications."""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

LAYER_KINDS = (
    "normalization",
    "activation_fn",
    "linear",
    "attention_mixing",
    "multiplicative_gate",
)


@dataclass
class Node:
    """One recorded primitive application.

    ``kind`` is the layer-kind tag a propagation rule may attach to; untagged
    nodes are always differentiated plainly.
    """

    op: str
    inputs: tuple[int, ...]
    output: int
    attrs: dict[str, Any] = field(default_factory=dict)
    saved: dict[str, Any] = field(default_factory=dict)
    kind: str | None = None
    label: str | None = None


class Tape:
    """Ordered list of nodes plus the values of every tensor they touch.

    Nodes are appended in execution order, so the list is topologically
    sorted by construction.  Values are stored by tensor id; since tensors
    are immutable the stored arrays are shared, not copied.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.values: dict[int, np.ndarray] = {}
        self.leaves: list[int] = []
        self.inputs: list[int] = []
        self.outputs: list[int] = []
        self.sites: dict[Any, int] = {}
        self._produced: set[int] = set()
        self._closed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _stack().pop()
        assert popped is self

    @contextmanager
    def resume(self) -> Iterator["Tape"]:
        """Re-activate the tape to append more nodes (e.g. a metric head)."""
        with self:
            yield self

    def _see(self, tensor) -> None:
        if tensor.id not in self.values:
            self.values[tensor.id] = tensor.data
            if tensor.id not in self._produced:
                self.leaves.append(tensor.id)

    def record(self, node: Node, inputs, output) -> None:
        for t in inputs:
            self._see(t)
        self._produced.add(output.id)
        self.values[output.id] = output.data
        self.nodes.append(node)

    def mark_site(self, key, tensor) -> None:
        self._see(tensor)
        self.sites[key] = tensor.id

    def kinds(self) -> set[str]:
        return {n.kind for n in self.nodes if n.kind is not None}

    def __contains__(self, tensor_id: int) -> bool:
        return tensor_id in self.values


_local = threading.local()


def _stack() -> list[Tape]:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


@contextmanager
def no_record() -> Iterator[None]:
    """Suspend recording on this thread."""
    s = _stack()
    saved = list(s)
    s.clear()
    try:
        yield
    finally:
        s.extend(saved)

"""Reverse-mode differentiation over a recorded tape."""

from __future__ import annotations

import threading
from collections import ChainMap
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .ops import PRIMITIVES, evaluate
from .tape import Node, Tape
from .tensor import ShapeError, Tensor


class TapeError(KeyError):
    """A requested tensor id is not on the tape."""


class Counters:
    """Process-wide forward/backward pass counters (thread-safe)."""

    def __init__(self):
        self._lock = threading.Lock()
        self.forward = 0
        self.backward = 0

    def bump(self, name: str, n: int = 1) -> None:
        with self._lock:
            setattr(self, name, getattr(self, name) + n)

    def snapshot(self) -> dict[str, int]:
        with self._lock:
            return {"forward": self.forward, "backward": self.backward}


counters = Counters()


@contextmanager
def count_passes():
    """Yield a dict that is filled with the passes run inside the block."""
    before = counters.snapshot()
    delta: dict[str, int] = {}
    try:
        yield delta
    finally:
        after = counters.snapshot()
        delta.update({k: after[k] - before[k] for k in after})


class TapeRewriter(Protocol):
    def rewrite_tape(self, tape: Tape) -> tuple[list[Node], Mapping[int, np.ndarray]]: ...


@dataclass(frozen=True)
class Gradient:
    """Plain reverse-mode derivative."""


@dataclass(frozen=True)
class Coefficients:
    """Propagation coefficients: differentiate the rule-rewritten tape."""

    rule_config: Any


BackwardMode = Gradient | Coefficients


def record_forward(program: Callable[..., Any], inputs: Sequence[Tensor]):
    """Run ``program(*inputs)`` under a fresh tape.

    Returns ``(outputs, tape)`` where ``outputs`` is always a list.
    """
    inputs = [t if isinstance(t, Tensor) else Tensor(t) for t in inputs]
    with Tape() as tape:
        for t in inputs:
            tape._see(t)
        out = program(*inputs)
    outs = list(out) if isinstance(out, (list, tuple)) else [out]
    tape.inputs = [t.id for t in inputs]
    tape.outputs = [t.id for t in outs]
    return outs, tape


def replay(tape: Tape, inputs: Sequence[np.ndarray | Tensor]) -> list[np.ndarray]:
    """Re-execute the tape's nodes with new values for ``tape.inputs``."""
    if len(inputs) != len(tape.inputs):
        raise ValueError(f"replay expects {len(tape.inputs)} inputs, got {len(inputs)}")
    env: dict[int, np.ndarray] = {}
    for tid, x in zip(tape.inputs, inputs):
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        if arr.shape != tape.values[tid].shape:
            raise ShapeError("replay", [arr.shape, tape.values[tid].shape], "input shape changed")
        env[tid] = arr
    vals = ChainMap(env, tape.values)
    for node in tape.nodes:
        out, _ = evaluate(node.op, [vals[i] for i in node.inputs], node.attrs)
        env[node.output] = out
    return [vals[i] for i in tape.outputs]


def backward(
    tape: Tape,
    seed,
    mode: BackwardMode = Gradient(),
    wrt: Iterable[int] | None = None,
    output: int | None = None,
) -> dict[int, np.ndarray]:
    """Propagate ``seed`` from ``output`` back through the tape.

    Returns a cotangent for each id in ``wrt`` (default: every leaf and
    every registered site).  Ids that the output does not depend on get
    zeros.
    """
    if output is None:
        if not tape.outputs:
            raise TapeError("tape has no outputs; pass output=")
        output = tape.outputs[-1]
    if output not in tape.values:
        raise TapeError(f"output id {output} is not on the tape")
    out_val = tape.values[output]
    seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=out_val.dtype)
    if seed.shape != out_val.shape:
        if seed.size == 1 and out_val.size == 1:
            seed = seed.reshape(out_val.shape)
        else:
            raise ShapeError("backward", [seed.shape, out_val.shape], "seed must match output")

    if wrt is None:
        wanted = list(dict.fromkeys([*tape.leaves, *tape.sites.values()]))
    else:
        wanted = list(wrt)
        missing = [i for i in wanted if i not in tape.values]
        if missing:
            raise TapeError(f"ids not on tape: {missing}")

    if isinstance(mode, Coefficients):
        nodes, extra = mode.rule_config.rewrite_tape(tape)
        values = ChainMap(dict(extra), tape.values)
    elif isinstance(mode, Gradient):
        nodes, values = tape.nodes, tape.values
    else:
        raise TypeError(f"unknown backward mode {mode!r}")

    counters.bump("backward")
    cot: dict[int, np.ndarray] = {output: seed}
    for node in reversed(nodes):
        g = cot.get(node.output)
        if g is None:
            continue
        ins = [values[i] for i in node.inputs]
        grads = PRIMITIVES[node.op].vjp(g, *ins, values[node.output], node.saved, **node.attrs)
        for tid, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            prev = cot.get(tid)
            cot[tid] = gi if prev is None else prev + gi
    return {i: cot[i] if i in cot else np.zeros_like(values[i]) for i in wanted}

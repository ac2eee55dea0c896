"""LRP propagation rules realized as tape rewrites.

Each rule replaces one recorded primitive by a short chain of primitives that
computes the same forward value but detaches some factors.  Differentiating
the rewritten tape with ordinary reverse mode then yields the propagation
coefficients; relevance at a site is activation times coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, ClassVar, Mapping

import numpy as np

from .core import Coefficients, LAYER_KINDS, Node, Tape, backward
from .core.ops import evaluate, gaussian_cdf, sigmoid
from .core.tensor import _new_id


class RuleError(ValueError):
    """A rule cannot be applied to the node it was assigned to."""


class UncoveredLayerError(RuleError):
    """The tape contains a layer kind the rule config has no entry for."""


def _sign0(z: np.ndarray) -> np.ndarray:
    # sign with sign(0) := +1
    return np.where(z >= 0, 1.0, -1.0).astype(z.dtype)


class _Builder:
    """Emits replacement nodes, evaluating each one as it goes."""

    def __init__(self, values: Mapping[int, np.ndarray], extra: dict[int, np.ndarray]):
        self.values = values
        self.extra = extra
        self.nodes: list[Node] = []

    def get(self, tid: int) -> np.ndarray:
        return self.extra[tid] if tid in self.extra else self.values[tid]

    def leaf(self, array: np.ndarray) -> int:
        tid = _new_id()
        self.extra[tid] = array
        return tid

    def op(self, name: str, inputs, out: int | None = None, **attrs) -> int:
        arrays = [self.get(i) for i in inputs]
        value, saved = evaluate(name, arrays, attrs)
        tid = _new_id() if out is None else out
        if out is None:
            self.extra[tid] = value
        else:
            # the original output value stays authoritative for downstream vjps
            self.last_value = value
        self.nodes.append(Node(name, tuple(inputs), tid, attrs, saved))
        return tid


@dataclass(frozen=True)
class Rule:
    """Base class; subclasses override :meth:`_rewrite`."""

    ops: ClassVar[frozenset[str]] = frozenset()
    name: ClassVar[str] = "rule"

    def rewrite(self, node: Node, values: Mapping[int, np.ndarray]) -> tuple[list[Node], dict[int, np.ndarray]]:
        """Return replacement nodes and the values of any new tensors.

        The last replacement node writes ``node.output``.  Its recomputed
        forward value is available as ``builder.last_value`` for checks but
        is not stored, so consumers keep reading the recorded value.
        """
        if self.ops and node.op not in self.ops:
            where = node.label or f"node {node.output}"
            raise RuleError(f"{type(self).__name__} cannot rewrite {node.op!r} at {where}")
        b = _Builder(values, {})
        if self._is_identity():
            return [node], {}
        self._rewrite(node, b)
        return b.nodes, b.extra

    def rewritten_forward(self, node: Node, values: Mapping[int, np.ndarray]) -> np.ndarray:
        """Forward value of the rewritten chain (for preservation checks)."""
        if self._is_identity():
            return values[node.output]
        b = _Builder(values, {})
        self._rewrite(node, b)
        return b.last_value

    def _is_identity(self) -> bool:
        return False

    def _rewrite(self, node: Node, b: _Builder) -> None:  # pragma: no cover - abstract
        raise NotImplementedError

    def to_dict(self) -> dict[str, Any]:
        d = {"rule": self.name}
        d.update({k: v for k, v in self.__dict__.items()})
        return d


@dataclass(frozen=True)
class PlainGradient(Rule):
    name: ClassVar[str] = "gradient"

    def _is_identity(self) -> bool:
        return True


@dataclass(frozen=True)
class ZeroRule(Rule):
    """LRP-0 on a linear map: identical to the gradient."""

    ops: ClassVar[frozenset[str]] = frozenset({"matmul"})
    name: ClassVar[str] = "zero"

    def _is_identity(self) -> bool:
        return True


@dataclass(frozen=True)
class EpsilonRule(Rule):
    epsilon: float = 1e-6
    ops: ClassVar[frozenset[str]] = frozenset({"matmul"})
    name: ClassVar[str] = "epsilon"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")

    def _is_identity(self) -> bool:
        return self.epsilon == 0

    def _rewrite(self, node, b):
        z = b.op("matmul", node.inputs, **node.attrs)
        zv = b.get(z)
        denom = zv + self.epsilon * _sign0(zv)
        if np.any(denom == 0):
            raise RuleError(f"epsilon stabilizer underflowed to zero at {node.label or f'node {node.output}'}")
        r = zv / denom
        scaled = b.op("mul", (z, b.leaf(r)))
        # constant correction: forward stays z, backward is scaled by r
        b.op("add", (scaled, b.leaf(zv - zv * r)), out=node.output)


@dataclass(frozen=True)
class GammaRule(Rule):
    gamma: float = 0.25
    ops: ClassVar[frozenset[str]] = frozenset({"matmul"})
    name: ClassVar[str] = "gamma"

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")

    def _is_identity(self) -> bool:
        return self.gamma == 0

    def _rewrite(self, node, b):
        x, w = node.inputs
        wv = b.get(w)
        w_gamma = b.leaf(wv + self.gamma * np.maximum(wv, 0))
        z_gamma = b.op("matmul", (x, w_gamma))
        zg = b.get(z_gamma)
        z = b.values[node.output]
        safe = np.where(zg == 0, 1.0, zg)
        r = np.where(zg == 0, 0.0, z / safe).astype(z.dtype)
        scaled = b.op("mul", (z_gamma, b.leaf(r)))
        # correction keeps the forward equal to z wherever z_gamma vanished
        b.op("add", (scaled, b.leaf(z - zg * r)), out=node.output)


@dataclass(frozen=True)
class LNRule(Rule):
    """Normalization with the inverse standard deviation held constant."""

    ops: ClassVar[frozenset[str]] = frozenset({"layernorm", "rmsnorm"})
    name: ClassVar[str] = "ln"

    def _rewrite(self, node, b):
        (x,) = node.inputs
        rstd = b.leaf(node.saved["rstd"])
        if node.op == "layernorm":
            xv = b.get(x)
            total = b.op("sum", (x,), axis=-1, keepdims=True)
            mean = b.op("scale", (total,), factor=1.0 / xv.shape[-1])
            centered = b.op("sub", (x, mean))
            b.op("mul", (centered, rstd), out=node.output)
        else:
            b.op("mul", (x, rstd), out=node.output)


@dataclass(frozen=True)
class IdentityRule(Rule):
    """Elementwise activation ``x * g(x)`` with the gate ``g(x)`` held constant."""

    ops: ClassVar[frozenset[str]] = frozenset({"gelu", "silu"})
    name: ClassVar[str] = "identity"

    def _rewrite(self, node, b):
        (x,) = node.inputs
        xv = b.get(x)
        gate = gaussian_cdf(xv) if node.op == "gelu" else sigmoid(xv)
        b.op("mul", (x, b.leaf(gate.astype(xv.dtype))), out=node.output)


@dataclass(frozen=True)
class AHRule(Rule):
    """Attention mixing ``A @ V`` with the attention weights held constant."""

    ops: ClassVar[frozenset[str]] = frozenset({"matmul"})
    name: ClassVar[str] = "ah"

    def _rewrite(self, node, b):
        a, v = node.inputs
        frozen = b.op("detach", (a,))
        b.op("matmul", (frozen, v), out=node.output)


@dataclass(frozen=True)
class HalfRule(Rule):
    """Multiplicative gate: half the output is detached."""

    ops: ClassVar[frozenset[str]] = frozenset({"mul"})
    name: ClassVar[str] = "half"

    def _rewrite(self, node, b):
        y = b.op("mul", node.inputs)
        live = b.op("scale", (y,), factor=0.5)
        frozen = b.op("scale", (b.op("detach", (y,)),), factor=0.5)
        b.op("add", (live, frozen), out=node.output)


RULES: dict[str, type[Rule]] = {
    cls.name: cls
    for cls in (PlainGradient, ZeroRule, EpsilonRule, GammaRule, LNRule, IdentityRule, AHRule, HalfRule)
}


def rule_from_dict(d: Mapping[str, Any] | str) -> Rule:
    if isinstance(d, str):
        d = {"rule": d}
    d = dict(d)
    name = d.pop("rule")
    try:
        cls = RULES[name]
    except KeyError:
        raise RuleError(f"unknown rule {name!r}; expected one of {sorted(RULES)}") from None
    return cls(**d)


def rewrite(node: Node, rule: Rule, values: Mapping[int, np.ndarray]) -> tuple[list[Node], dict[int, np.ndarray]]:
    """Rewrite a single tape node under ``rule``."""
    return rule.rewrite(node, values)


_GPT2_RULES = {
    "normalization": LNRule(),
    "activation_fn": IdentityRule(),
    "linear": ZeroRule(),
    "attention_mixing": PlainGradient(),
    "multiplicative_gate": PlainGradient(),
}
_GATED_RULES = {**_GPT2_RULES, "multiplicative_gate": HalfRule()}
PRESETS: dict[str, dict[str, Rule]] = {
    "gpt2": _GPT2_RULES,
    "pythia": _GPT2_RULES,
    "qwen2": _GATED_RULES,
    "gemma2": _GATED_RULES,
    "gradient": {k: PlainGradient() for k in LAYER_KINDS},
}


@dataclass(frozen=True)
class RuleConfig:
    """Assignment of one rule per layer kind."""

    rules: Mapping[str, Rule] = field(default_factory=lambda: dict(PRESETS["gradient"]))
    preset: str | None = None

    def __post_init__(self):
        unknown = set(self.rules) - set(LAYER_KINDS)
        if unknown:
            raise RuleError(f"unknown layer kinds {sorted(unknown)}")
        object.__setattr__(self, "rules", MappingProxyType(dict(self.rules)))

    @classmethod
    def from_preset(cls, name: str) -> "RuleConfig":
        try:
            return cls(PRESETS[name], preset=name)
        except KeyError:
            raise RuleError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None

    @classmethod
    def gradient(cls) -> "RuleConfig":
        return cls.from_preset("gradient")

    def with_rule(self, kind: str, rule: Rule) -> "RuleConfig":
        return RuleConfig({**self.rules, kind: rule}, preset=None)

    def is_plain(self) -> bool:
        return all(r._is_identity() for r in self.rules.values())

    def to_dict(self) -> dict[str, Any]:
        return {"preset": self.preset, "rules": {k: v.to_dict() for k, v in self.rules.items()}}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RuleConfig":
        base = dict(PRESETS[d["preset"]]) if d.get("preset") else {}
        for kind, spec in (d.get("rules") or {}).items():
            base[kind] = rule_from_dict(spec)
        preset = d.get("preset") if not d.get("rules") else None
        if d.get("preset") and d.get("rules"):
            # explicit rules identical to the preset keep its name
            if all(base[k] == PRESETS[d["preset"]].get(k) for k in base):
                preset = d["preset"]
        return cls(base, preset=preset)

    def rewrite_tape(self, tape: Tape) -> tuple[list[Node], dict[int, np.ndarray]]:
        missing = tape.kinds() - set(self.rules)
        if missing:
            raise UncoveredLayerError(f"no rule configured for layer kinds {sorted(missing)}")
        nodes: list[Node] = []
        extra: dict[int, np.ndarray] = {}
        for node in tape.nodes:
            if node.kind is None:
                nodes.append(node)
                continue
            new, vals = self.rules[node.kind].rewrite(node, tape.values)
            nodes.extend(new)
            extra.update(vals)
        return nodes, extra


@dataclass
class RelevanceMap:
    """Coefficients and relevance (activation times coefficient) per site."""

    coefficients: dict[Any, np.ndarray]
    relevance: dict[Any, np.ndarray]
    activations: dict[Any, np.ndarray]


def propagation_coefficients(
    tape: Tape,
    metric_seed,
    config: RuleConfig,
    sites: Mapping[Any, int] | None = None,
) -> RelevanceMap:
    """Run one rule-rewritten backward pass and collect coefficients at sites.

    ``sites`` maps caller keys to tensor ids; it defaults to the sites the
    model registered on the tape.
    """
    sites = dict(tape.sites if sites is None else sites)
    grads = backward(tape, metric_seed, Coefficients(config), wrt=list(sites.values()))
    coeff = {k: grads[tid] for k, tid in sites.items()}
    acts = {k: tape.values[tid] for k, tid in sites.items()}
    rel = {k: acts[k] * coeff[k] for k in sites}
    return RelevanceMap(coeff, rel, acts)


def forward_preserved(tape: Tape, config: RuleConfig) -> float:
    """Largest relative deviation between recorded and rewritten node outputs."""
    worst = 0.0
    for node in tape.nodes:
        if node.kind is None:
            continue
        rule = config.rules[node.kind]
        ref = tape.values[node.output]
        got = rule.rewritten_forward(node, tape.values)
        if ref.size == 0:
            continue
        scale = max(float(np.max(np.abs(ref))), float(np.finfo(ref.dtype).tiny))
        worst = max(worst, float(np.max(np.abs(got - ref))) / scale)
    return worst


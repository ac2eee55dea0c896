"""Prompt pairs and scalar metrics over final-position logits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..core import Tensor, ops

METRIC_VARIANTS = ("logit_diff", "prob_diff")


class PairError(ValueError):
    pass


@dataclass(frozen=True)
class Metric:
    """``score(target) - score(foil)`` at the last position.

    ``logit_diff`` scores raw logits, ``prob_diff`` scores softmax
    probabilities.
    """

    variant: str
    target: int
    foil: int

    def __post_init__(self):
        if self.variant not in METRIC_VARIANTS:
            raise ValueError(f"metric variant must be one of {METRIC_VARIANTS}, got {self.variant!r}")

    def value(self, logits: np.ndarray) -> float:
        last = np.asarray(logits)[-1]
        if self.variant == "prob_diff":
            z = np.exp(last - last.max())
            last = z / z.sum()
        return float(last[self.target] - last[self.foil])

    def record(self, logits: Tensor) -> Tensor:
        last = ops.index(logits, -1)
        if self.variant == "prob_diff":
            last = ops.softmax(last)
        return ops.sub(ops.index(last, self.target), ops.index(last, self.foil))

    def swapped(self) -> "Metric":
        return Metric(self.variant, self.foil, self.target)

    def to_dict(self) -> dict[str, Any]:
        return {"variant": self.variant, "target": self.target, "foil": self.foil}

    @classmethod
    def from_dict(cls, d) -> "Metric":
        return cls(d["variant"], int(d["target"]), int(d["foil"]))


def LogitDiff(answer_original: int, answer_patch: int) -> Metric:  # noqa: N802
    return Metric("logit_diff", answer_original, answer_patch)


def ProbDiff(answer_a: int, answer_b: int) -> Metric:  # noqa: N802
    return Metric("prob_diff", answer_a, answer_b)


@dataclass(frozen=True)
class PromptPair:
    """An original prompt and its counterfactual, aligned token for token."""

    tokens_original: tuple[int, ...]
    tokens_patch: tuple[int, ...]
    answer_original: int
    answer_patch: int
    metric: Metric | None = None
    task: str = ""
    template_id: Any = None
    text_original: str = ""
    text_patch: str = ""
    extras: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "tokens_original", tuple(int(t) for t in self.tokens_original))
        object.__setattr__(self, "tokens_patch", tuple(int(t) for t in self.tokens_patch))
        if not self.tokens_original:
            raise PairError("empty prompt")
        if len(self.tokens_original) != len(self.tokens_patch):
            raise PairError(
                f"original and patch lengths differ ({len(self.tokens_original)} vs {len(self.tokens_patch)})"
            )

    def __len__(self) -> int:
        return len(self.tokens_original)

    def differing_positions(self) -> list[int]:
        return [i for i, (a, b) in enumerate(zip(self.tokens_original, self.tokens_patch)) if a != b]

    def swapped(self) -> "PromptPair":
        return PromptPair(
            self.tokens_patch, self.tokens_original, self.answer_patch, self.answer_original,
            None if self.metric is None else self.metric.swapped(), self.task, self.template_id,
            self.text_patch, self.text_original,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "template_id": self.template_id,
            "text_original": self.text_original,
            "text_patch": self.text_patch,
            "tokens_original": list(self.tokens_original),
            "tokens_patch": list(self.tokens_patch),
            "answer_original": self.answer_original,
            "answer_patch": self.answer_patch,
            "metric": None if self.metric is None else self.metric.to_dict(),
        }

    @classmethod
    def from_dict(cls, d) -> "PromptPair":
        return cls(
            d["tokens_original"], d["tokens_patch"], int(d["answer_original"]), int(d["answer_patch"]),
            Metric.from_dict(d["metric"]) if d.get("metric") else None,
            d.get("task", ""), d.get("template_id"), d.get("text_original", ""), d.get("text_patch", ""),
        )


def resolve_metric(pair: PromptPair, metric) -> Metric:
    """Metric for ``pair``: an explicit Metric, a variant name, or the pair's own."""
    if isinstance(metric, Metric):
        return metric
    if callable(metric):
        return metric(pair)
    if metric is None:
        return pair.metric if pair.metric is not None else LogitDiff(pair.answer_original, pair.answer_patch)
    if metric == "logit_diff":
        return LogitDiff(pair.answer_original, pair.answer_patch)
    if metric == "prob_diff":
        return ProbDiff(pair.answer_original, pair.answer_patch)
    raise ValueError(f"unknown metric {metric!r}")

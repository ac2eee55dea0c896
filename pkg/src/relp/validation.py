"""Input checks shared by the estimator front-ends."""

from __future__ import annotations

from typing import Iterable, Sequence

from .model.hooks import ComponentId, HookedModel
from .patching.pairs import PairError, PromptPair
from .rules import RuleConfig


def check_pairs(pairs: Iterable[PromptPair], model: HookedModel | None = None) -> list[PromptPair]:
    pairs = list(pairs)
    if not pairs:
        raise PairError("need at least one prompt pair")
    for p in pairs:
        if not isinstance(p, PromptPair):
            raise TypeError(f"expected PromptPair, got {type(p).__name__}")
        if model is not None:
            v = model.vocab_size
            for t in (*p.tokens_original, *p.tokens_patch, p.answer_original, p.answer_patch):
                if not 0 <= t < v:
                    raise PairError(f"token {t} outside model vocabulary of size {v}")
    return pairs


def check_components(model: HookedModel, components: Sequence[ComponentId] | None, seq_len: int) -> list[ComponentId]:
    if components is None:
        return model.components(seq_len)
    components = list(components)
    if not components:
        raise ValueError("need at least one component")
    for c in components:
        model.validate_component(c, seq_len)
    return components


def check_rule_config(rules) -> RuleConfig:
    if isinstance(rules, RuleConfig):
        return rules
    if isinstance(rules, str):
        return RuleConfig.from_preset(rules)
    if isinstance(rules, dict):
        return RuleConfig.from_dict(rules)
    raise TypeError(f"cannot build a RuleConfig from {type(rules).__name__}")

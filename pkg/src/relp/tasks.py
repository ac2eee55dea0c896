"""Templated prompt-pair generators: indirect object identification and
subject-verb agreement."""

from __future__ import annotations

import json
import re
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model.tokenizer import WordTokenizer, split_words
from .model.train import TrainExample
from .patching.pairs import LogitDiff, Metric, PairError, ProbDiff, PromptPair

IOI_TEMPLATES = {
    1: "Then, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A].",
    2: "When, [B] and [A] went to the [PLACE]. [B] gave a [OBJECT] to [A].",
    3: "After [B] and [A] went to the [PLACE], [B] gave a [OBJECT] to [A].",
}
_IOI_TAIL = " [A]."

AGREEMENT_STRUCTURES = ("within_RC", "across_RC", "across_PP")
AGREEMENT_TEMPLATES = {
    "within_RC": "The [NOUN] that the [RC_NOUN]",
    "across_RC": "The [NOUN] that the [RC_NOUN] [RC_VERB]",
    "across_PP": "The [NOUN] [PREP] the [PP_NOUN]",
}


_SLOT = re.compile(r"\[[A-Z_]+\]")


class PoolError(ValueError):
    pass


@lru_cache(maxsize=1)
def load_pools() -> dict:
    text = resources.files("relp.data").joinpath("pools.json").read_text(encoding="utf-8")
    pools = json.loads(text)
    check_pools(pools)
    return pools


def check_pools(pools: dict) -> None:
    for key, minimum in (("names", 20), ("places", 10), ("objects", 10)):
        if len(pools.get(key, ())) < minimum:
            raise PoolError(f"pool {key!r} needs at least {minimum} entries")
    seen: set[str] = set()
    for key in ("names", "places", "objects"):
        words = set(pools[key])
        if words & seen:
            raise PoolError(f"pool {key!r} overlaps another pool: {sorted(words & seen)}")
        seen |= words
        for w in words:
            if len(split_words(w)) != 1:
                raise PoolError(f"{w!r} is not a single token")


def vocabulary(pools: dict | None = None) -> WordTokenizer:
    """Closed vocabulary over every template word, pool entry and answer."""
    pools = pools or load_pools()
    texts = list(IOI_TEMPLATES.values()) + list(AGREEMENT_TEMPLATES.values())
    words = list(pools["names"]) + list(pools["places"]) + list(pools["objects"])
    for key in ("subjects", "pp_nouns", "rc_verbs"):
        words += [w for pair in pools[key] for w in pair]
    words += list(pools["prepositions"])
    words += [w for pair in pools["answer_verbs"].values() for w in pair]
    template_words = [w for t in texts for w in split_words(_SLOT.sub(" ", t))]
    return WordTokenizer.from_texts(template_words + words)


def _fill(template: str, slots: dict[str, str]) -> str:
    out = template
    for k, v in slots.items():
        out = out.replace(f"[{k}]", v)
    return out


# ---------------------------------------------------------------------------
# IOI


def ioi_prompt_template(template_id: int) -> str:
    t = IOI_TEMPLATES[template_id]
    assert t.endswith(_IOI_TAIL)
    return t[: -len(_IOI_TAIL)]


def ioi_slot_positions(template_id: int) -> list[int]:
    """Token positions of the [A]/[B] slots in the prompt (answer excluded)."""
    filled = _fill(ioi_prompt_template(template_id), {"A": "AAA", "B": "BBB", "PLACE": "PPP", "OBJECT": "OOO"})
    return [i for i, w in enumerate(split_words(filled)) if w in ("AAA", "BBB")]


def gen_ioi(
    n: int,
    rng_seed: int = 0,
    tokenizer: WordTokenizer | None = None,
    pools: dict | None = None,
    exclude: Iterable[tuple] = (),
    templates: Sequence[int] = (1, 2, 3),
) -> list[PromptPair]:
    """``n`` distinct IOI pairs; the patch prompt swaps the two names."""
    if n < 1:
        raise ValueError("n must be >= 1")
    pools = pools or load_pools()
    names, places, objects = pools["names"], pools["places"], pools["objects"]
    if len(names) < 2 or not places or not objects:
        raise PoolError("IOI needs at least two names, one place and one object")
    tok = tokenizer or vocabulary(pools)
    rng = np.random.default_rng(rng_seed)
    seen = set(exclude)
    capacity = len(templates) * len(names) * (len(names) - 1) * len(places) * len(objects) - len(seen)
    if n > capacity:
        raise ValueError(f"cannot draw {n} distinct IOI samples (capacity {capacity})")
    out = []
    while len(out) < n:
        tid = int(templates[rng.integers(len(templates))])
        a, b = rng.choice(len(names), size=2, replace=False)
        key = (tid, names[a], names[b], places[rng.integers(len(places))], objects[rng.integers(len(objects))])
        if key in seen:
            continue
        seen.add(key)
        out.append(_ioi_pair(key, tok))
    return out


def _ioi_pair(key, tok: WordTokenizer) -> PromptPair:
    tid, a, b, place, obj = key
    prompt = ioi_prompt_template(tid)
    orig = _fill(prompt, {"A": a, "B": b, "PLACE": place, "OBJECT": obj})
    patch = _fill(prompt, {"A": b, "B": a, "PLACE": place, "OBJECT": obj})
    ans_o, ans_p = tok.token_id(a), tok.token_id(b)
    return PromptPair(
        tok.encode(orig), tok.encode(patch), ans_o, ans_p,
        metric=LogitDiff(ans_o, ans_p), task="ioi", template_id=tid,
        text_original=orig, text_patch=patch, extras={"key": key},
    )


# ---------------------------------------------------------------------------
# subject-verb agreement


def agreement_slot_positions(structure: str) -> list[int]:
    """Position of the noun whose number differs within a pair."""
    words = split_words(AGREEMENT_TEMPLATES[structure].replace("[", "").replace("]", ""))
    slot = "RC_NOUN" if structure == "within_RC" else "NOUN"
    return [words.index(slot)]


def gen_agreement(
    structure: str,
    n: int,
    rng_seed: int = 0,
    tokenizer: WordTokenizer | None = None,
    pools: dict | None = None,
    exclude: Iterable[tuple] = (),
) -> list[PromptPair]:
    """``n`` distinct agreement pairs differing only in one noun's number.

    The attached metric follows the orientation of the reference table:
    probability of the verb that agrees with the patch prompt minus the
    probability of the verb that agrees with the original.
    """
    if structure not in AGREEMENT_STRUCTURES:
        raise ValueError(f"structure must be one of {AGREEMENT_STRUCTURES}, got {structure!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    pools = pools or load_pools()
    tok = tokenizer or vocabulary(pools)
    subj, pp, rcv, preps = pools["subjects"], pools["pp_nouns"], pools["rc_verbs"], pools["prepositions"]
    if not subj:
        raise PoolError("agreement needs subject nouns")
    rng = np.random.default_rng(rng_seed)
    seen = set(exclude)
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 1000 * n:
            raise ValueError(f"cannot draw {n} distinct {structure} samples")
        noun, num = int(rng.integers(len(subj))), int(rng.integers(2))
        if structure == "within_RC":
            key = (structure, noun, num, int(rng.integers(len(subj))), int(rng.integers(2)))
        elif structure == "across_RC":
            key = (structure, noun, num, int(rng.integers(len(subj))), int(rng.integers(2)), int(rng.integers(len(rcv))))
        else:
            key = (structure, noun, num, int(rng.integers(len(preps))), int(rng.integers(len(pp))), int(rng.integers(2)))
        if key in seen:
            continue
        seen.add(key)
        out.append(_agreement_pair(key, tok, pools))
    return out


def _agreement_pair(key, tok: WordTokenizer, pools: dict) -> PromptPair:
    structure, noun, num = key[0], key[1], key[2]
    subj = pools["subjects"]
    sing_verb, plur_verb = pools["answer_verbs"][structure]
    template = AGREEMENT_TEMPLATES[structure]
    if structure == "within_RC":
        rc, rc_num = key[3], key[4]
        base = {"NOUN": subj[noun][num]}
        orig = _fill(template, {**base, "RC_NOUN": subj[rc][rc_num]})
        patch = _fill(template, {**base, "RC_NOUN": subj[rc][1 - rc_num]})
        contrast_num = rc_num
    elif structure == "across_RC":
        rc, rc_num, verb = key[3], key[4], key[5]
        rest = {"RC_NOUN": subj[rc][rc_num], "RC_VERB": pools["rc_verbs"][verb][rc_num]}
        orig = _fill(template, {"NOUN": subj[noun][num], **rest})
        patch = _fill(template, {"NOUN": subj[noun][1 - num], **rest})
        contrast_num = num
    else:
        prep, ppn, pp_num = key[3], key[4], key[5]
        rest = {"PREP": pools["prepositions"][prep], "PP_NOUN": pools["pp_nouns"][ppn][pp_num]}
        orig = _fill(template, {"NOUN": subj[noun][num], **rest})
        patch = _fill(template, {"NOUN": subj[noun][1 - num], **rest})
        contrast_num = num
    # number 0 is singular, 1 plural
    ans_o = tok.token_id(sing_verb if contrast_num == 0 else plur_verb)
    ans_p = tok.token_id(plur_verb if contrast_num == 0 else sing_verb)
    return PromptPair(
        tok.encode(orig), tok.encode(patch), ans_o, ans_p,
        metric=ProbDiff(ans_p, ans_o), task=structure, template_id=structure,
        text_original=orig, text_patch=patch, extras={"key": key},
    )


def agreement_splits(
    structure: str,
    rng_seed: int = 0,
    n_discovery: int = 300,
    n_heldout: int = 100,
    tokenizer: WordTokenizer | None = None,
) -> tuple[list[PromptPair], list[PromptPair]]:
    """Disjoint discovery and held-out sets (default 300 / 100)."""
    pairs = gen_agreement(structure, n_discovery + n_heldout, rng_seed, tokenizer)
    return pairs[:n_discovery], pairs[n_discovery:]


# ---------------------------------------------------------------------------
# metrics, validation, I/O


def make_metric(pair: PromptPair, variant: str = "logit_diff", vocab_size: int | None = None) -> Metric:
    """``score(answer_original) - score(answer_patch)`` at the last position."""
    for a in (pair.answer_original, pair.answer_patch):
        if a < 0 or (vocab_size is not None and a >= vocab_size):
            raise PairError(f"answer id {a} outside vocabulary")
    if variant == "logit_diff":
        return LogitDiff(pair.answer_original, pair.answer_patch)
    if variant == "prob_diff":
        return ProbDiff(pair.answer_original, pair.answer_patch)
    raise ValueError(f"unknown metric variant {variant!r}")


def validate_pair(pair: PromptPair, slots: Sequence[int], vocab_size: int | None = None) -> None:
    """Raise unless the pair is aligned and differs exactly at ``slots``."""
    if len(pair.tokens_original) != len(pair.tokens_patch):
        raise PairError("length mismatch")
    diff = pair.differing_positions()
    if sorted(diff) != sorted(slots):
        raise PairError(f"pair differs at {diff}, expected {sorted(slots)}")
    if vocab_size is not None:
        for t in (*pair.tokens_original, *pair.tokens_patch, pair.answer_original, pair.answer_patch):
            if not 0 <= t < vocab_size:
                raise PairError(f"token {t} outside vocabulary")


def expected_slots(pair: PromptPair) -> list[int]:
    if pair.task == "ioi":
        return ioi_slot_positions(int(pair.template_id))
    return agreement_slot_positions(pair.task)


def training_examples(pairs: Iterable[PromptPair]) -> list[TrainExample]:
    """Both prompts of every pair, each with its own correct answer."""
    out = []
    for p in pairs:
        out.append(TrainExample(p.tokens_original, p.answer_original))
        out.append(TrainExample(p.tokens_patch, p.answer_patch))
    return out


def write_pairs(path, pairs: Iterable[PromptPair]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")


def read_pairs(path) -> list[PromptPair]:
    with Path(path).open(encoding="utf-8") as fh:
        return [PromptPair.from_dict(json.loads(line)) for line in fh if line.strip()]

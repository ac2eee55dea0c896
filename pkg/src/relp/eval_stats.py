"""Agreement between linear estimators and activation patching."""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .model.hooks import HookedModel
from .patching.estimators import activation_patch, atp, integrated_gradients, relp
from .patching.pairs import PromptPair
from .validation import check_pairs, check_rule_config

METHODS = ("ap", "atp", "relp", "ig")
METHOD_LABELS = {"ap": "AP", "atp": "AtP", "relp": "RelP", "ig": "IG"}


class UndefinedCorrelationError(ArithmeticError):
    pass


def pearson(x, y) -> float:
    """Sample Pearson correlation; raises on constant input."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least two points")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise UndefinedCorrelationError("non-finite input")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("zero variance")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


@dataclass
class AgreementReport:
    """Per-kind score grids of shape ``(n_layers, n_positions)`` and PCCs vs AP.

    Columns are right-aligned: column ``j`` holds token position
    ``len(prompt) - n_positions + j``, so prompts of different length share
    their final tokens.  Cells are means over the pairs that reach them.
    """

    methods: tuple[str, ...]
    kinds: tuple[str, ...]
    grids: dict[str, dict[str, np.ndarray]]
    counts: np.ndarray
    pcc: dict[str, dict[str, float]]
    n_pairs: int
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return next(iter(next(iter(self.grids.values())).values())).shape

    def flat(self, method: str, kind: str) -> np.ndarray:
        """Layer-major then position flattening used for the PCC."""
        return self.grids[method][kind].ravel(order="C")

    def to_dict(self) -> dict[str, Any]:
        return {
            "methods": list(self.methods),
            "kinds": list(self.kinds),
            "n_pairs": self.n_pairs,
            "pcc": self.pcc,
            "counts": self.counts.tolist(),
            "grids": {m: {k: g.tolist() for k, g in kg.items()} for m, kg in self.grids.items()},
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d) -> "AgreementReport":
        return cls(
            tuple(d["methods"]),
            tuple(d["kinds"]),
            {m: {k: np.array(g) for k, g in kg.items()} for m, kg in d["grids"].items()},
            np.array(d["counts"]),
            {k: dict(v) for k, v in d["pcc"].items()},
            d["n_pairs"],
            dict(d.get("meta", {})),
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "position", *self.methods])
        L, T = self.shape
        for kind in self.kinds:
            for layer in range(L):
                for pos in range(T):
                    w.writerow([layer, kind, pos, *(repr(float(self.grids[m][kind][layer, pos])) for m in self.methods)])
        return buf.getvalue()

    def pcc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        others = [m for m in self.methods if m != "ap"]
        w.writerow(["kind", *others])
        for kind in self.kinds:
            w.writerow([kind, *(repr(self.pcc[kind][m]) for m in others)])
        return buf.getvalue()

    def grid_csv(self, method: str, kind: str) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        g = self.grids[method][kind]
        w.writerow(["layer", *range(g.shape[1])])
        for layer, row in enumerate(g):
            w.writerow([layer, *(repr(float(v)) for v in row)])
        return buf.getvalue()

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {"report.json": self.to_json(), "scores.csv": self.to_csv(), "pcc.csv": self.pcc_csv()}
        for m in self.methods:
            for k in self.kinds:
                files[f"grid_{m}_{k}.csv"] = self.grid_csv(m, k)
        paths = []
        for name, text in files.items():
            p = out / name
            p.write_text(text)
            paths.append(p)
        return paths


def _per_pair(model, kinds, estimators, pair: PromptPair):
    comps = model.components(len(pair), kinds=kinds)
    return {name: fn(model, pair, comps) for name, fn in estimators.items()}


def compare_to_oracle(
    model: HookedModel,
    pairs: Sequence[PromptPair],
    kinds: Sequence[str] | None = None,
    metric=None,
    rule_config="gpt2",
    ig_steps: int = 10,
    methods: Sequence[str] = METHODS,
    n_jobs: int = 1,
) -> AgreementReport:
    """Run every method on every pair and correlate each with AP per site kind."""
    pairs = check_pairs(pairs, model)
    methods = tuple(m.lower() for m in methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {METHODS}")
    if not methods:
        raise ValueError("method list is empty")
    kinds = tuple(kinds) if kinds is not None else tuple(model.site_kinds)
    config = check_rule_config(rule_config)
    table = {
        "ap": partial(activation_patch, metric=metric),
        "atp": partial(atp, metric=metric),
        "relp": partial(relp, metric=metric, config=config),
        "ig": partial(integrated_gradients, metric=metric, steps=ig_steps),
    }
    estimators = {m: table[m] for m in methods}
    fn = partial(_per_pair, model, kinds, estimators)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(fn, pairs))
    else:
        results = [fn(p) for p in pairs]

    L = model.n_layers
    T = max(len(p) for p in pairs)
    if L * T < 2:
        raise ValueError("need at least two components per site kind")
    sums = {m: {k: np.zeros((L, T)) for k in kinds} for m in methods}
    counts = np.zeros(T, dtype=np.int64)
    for pair, res in zip(pairs, results):
        shift = T - len(pair)
        counts[shift:] += 1
        for m in methods:
            for c, v in res[m].scores.items():
                sums[m][c.kind][c.layer, c.position + shift] += v
    grids = {m: {k: sums[m][k] / counts for k in kinds} for m in methods}

    pcc: dict[str, dict[str, float]] = {}
    if "ap" in methods:
        for k in kinds:
            ref = grids["ap"][k].ravel()
            pcc[k] = {m: pearson(ref, grids[m][k].ravel()) for m in methods if m != "ap"}
    meta = {"rule_config": config.to_dict(), "ig_steps": ig_steps, "alignment": "right"}
    return AgreementReport(methods, kinds, grids, counts, pcc, len(pairs), meta)

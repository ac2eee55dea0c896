"""Thresholded circuits and their mean-ablation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from ..model.hooks import HookedModel
from ..patching.pairs import PromptPair, resolve_metric
from .nodes import NodeEffects, NodeId, Site, err_key, excluded_layers, feat_key, node_universe, sae_transforms
from .sae import SparseAutoencoder


class FaithfulnessUndefinedError(ArithmeticError):
    """The clean and fully ablated metrics coincide, so the ratio has no meaning."""


@dataclass
class Circuit:
    nodes: dict[NodeId, float]
    threshold: float
    universe: frozenset[NodeId]
    task: str = ""
    method: str = ""
    excluded: tuple[int, ...] = ()
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node: NodeId) -> bool:
        return node in self.nodes

    def complement(self) -> frozenset[NodeId]:
        return self.universe - set(self.nodes)

    def to_dict(self) -> dict[str, Any]:
        return {
            "task": self.task,
            "method": self.method,
            "threshold": self.threshold,
            "excluded_layers": list(self.excluded),
            "nodes": [{"node": str(n), "score": s} for n, s in sorted(self.nodes.items(), key=lambda kv: kv[0].sort_key())],
            "universe": [str(n) for n in sorted(self.universe, key=NodeId.sort_key)],
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Circuit":
        return cls(
            nodes={NodeId.parse(e["node"]): float(e["score"]) for e in d["nodes"]},
            threshold=float(d["threshold"]),
            universe=frozenset(NodeId.parse(s) for s in d["universe"]),
            task=d.get("task", ""),
            method=d.get("method", ""),
            excluded=tuple(d.get("excluded_layers", ())),
            meta=dict(d.get("meta", {})),
        )


def build_circuit(effects: NodeEffects, T_N: float, exclude_first_third: bool = True, task: str = "") -> Circuit:
    """Keep every node of the universe with ``|effect| >= T_N``."""
    universe = node_universe(effects, effects.n_layers, effects.seq_len, exclude_first_third)
    nodes = {}
    for node, score in effects.items():
        if not np.isfinite(score):
            raise ValueError(f"non-finite effect at {node}")
        if node in universe and abs(score) >= T_N:
            nodes[node] = score
    excluded = excluded_layers(effects.n_layers) if exclude_first_third else ()
    return Circuit(nodes, float(T_N), universe, task, effects.method, excluded)


def _batched(model, saes, pairs, edit):
    """Forward every pair (grouped by length) and return the per-pair results."""
    out = [None] * len(pairs)
    by_len: dict[int, list[int]] = {}
    for i, p in enumerate(pairs):
        by_len.setdefault(len(p), []).append(i)
    for _, idx in sorted(by_len.items()):
        toks = np.array([pairs[i].tokens_original for i in idx])
        res = model.forward(toks, transforms=sae_transforms(saes, edit))
        for j, i in enumerate(idx):
            out[i] = (res, j)
    return out


def compute_means(model: HookedModel, saes: Mapping[Site, SparseAutoencoder], pairs: Sequence[PromptPair]) -> dict:
    """Per-position mean feature and error values over the original prompts."""
    pairs = list(pairs)
    if not pairs or len({len(p) for p in pairs}) != 1:
        raise ValueError("means need a nonempty set of equal-length pairs")
    toks = np.array([p.tokens_original for p in pairs])
    res = model.forward(toks, transforms=sae_transforms(saes))
    return {
        site: {"feat": res.extra[feat_key(site)].mean(axis=0), "err": res.extra[err_key(site)].mean(axis=0)}
        for site in saes
    }


def _mask_edit(means, ablate: Iterable[NodeId]):
    masks: dict[Site, dict[str, np.ndarray]] = {}
    for site, m in means.items():
        masks[site] = {"feat": np.zeros(m["feat"].shape, bool), "err": np.zeros(m["err"].shape[0], bool)}
    for n in ablate:
        if n.is_error:
            masks[n.site]["err"][n.position] = True
        else:
            masks[n.site]["feat"][n.position, n.feature] = True

    def edit(site, part, arr):
        mask = masks[site][part]
        if not mask.any():
            return None
        if part == "err":
            mask = mask[:, None]
        return np.where(mask, means[site][part], arr)

    return edit


def _loop_edit(means, ablate: Iterable[NodeId]):
    ablate = sorted(ablate, key=NodeId.sort_key)

    def edit(site, part, arr):
        out = None
        for n in ablate:
            if n.site != site or n.is_error != (part == "err"):
                continue
            if out is None:
                out = np.array(arr)
            if n.is_error:
                out[..., n.position, :] = means[site]["err"][n.position]
            else:
                out[..., n.position, n.feature] = means[site]["feat"][n.position, n.feature]
        return out

    return edit


_IMPLS = {"mask": _mask_edit, "loop": _loop_edit}


def ablated_metric(
    model: HookedModel,
    saes: Mapping[Site, SparseAutoencoder],
    keep: Iterable[NodeId],
    universe: Iterable[NodeId],
    pairs: Sequence[PromptPair],
    means: Mapping,
    *,
    metric=None,
    impl: str = "mask",
) -> float:
    """Mean metric with every universe node outside ``keep`` set to its mean."""
    ablate = set(universe) - set(keep)
    edit = _IMPLS[impl](means, ablate)
    vals = []
    for p, (res, j) in zip(pairs, _batched(model, saes, list(pairs), edit)):
        vals.append(resolve_metric(p, metric).value(res.logits[j]))
    return float(np.mean(vals))


def _faithfulness_of(model, saes, keep, universe, pairs, means, metric, impl) -> float:
    full = ablated_metric(model, saes, universe, universe, pairs, means, metric=metric, impl=impl)
    empty = ablated_metric(model, saes, (), universe, pairs, means, metric=metric, impl=impl)
    if abs(full - empty) < 1e-9:
        raise FaithfulnessUndefinedError(f"L(M)={full!r} and L(empty)={empty!r} coincide")
    keep = frozenset(keep)
    if keep == universe:
        score = full
    elif not keep:
        score = empty
    else:
        score = ablated_metric(model, saes, keep, universe, pairs, means, metric=metric, impl=impl)
    return (score - empty) / (full - empty) + 0.0


def faithfulness(model, saes, circuit: Circuit, pairs, means, *, metric=None, impl: str = "mask") -> float:
    """``(L(C) - L(empty)) / (L(M) - L(empty))`` under mean ablation."""
    return _faithfulness_of(model, saes, set(circuit.nodes), circuit.universe, list(pairs), means, metric, impl)


def completeness(model, saes, circuit: Circuit, pairs, means, *, metric=None, impl: str = "mask") -> float:
    """Faithfulness of the circuit's complement within the node universe."""
    return _faithfulness_of(model, saes, circuit.complement(), circuit.universe, list(pairs), means, metric, impl)


def error_node_diagnostic(model, saes, universe: frozenset[NodeId], pairs, means, *, metric=None) -> dict[str, float]:
    """Faithfulness after dropping residual-stream vs attention/MLP error nodes."""
    pairs = list(pairs)
    resid = {n for n in universe if n.is_error and n.kind.startswith("resid")}
    block = {n for n in universe if n.is_error and n.kind in ("attn_out", "mlp_out")}
    return {
        "without_resid_errors": _faithfulness_of(model, saes, universe - resid, universe, pairs, means, metric, "mask"),
        "without_attn_mlp_errors": _faithfulness_of(model, saes, universe - block, universe, pairs, means, metric, "mask"),
        "without_all_errors": _faithfulness_of(
            model, saes, universe - resid - block, universe, pairs, means, metric, "mask"
        ),
    }


def threshold_sweep(model, saes, effects: NodeEffects, thresholds, pairs, means, *, metric=None, task="", exclude_first_third=True):
    """Rows of (T_N, n_nodes, faithfulness, completeness) for each threshold."""
    rows = []
    for t in thresholds:
        c = build_circuit(effects, t, exclude_first_third, task)
        rows.append(
            {
                "T_N": float(t),
                "n_nodes": len(c),
                "faithfulness": faithfulness(model, saes, c, pairs, means, metric=metric),
                "completeness": completeness(model, saes, c, pairs, means, metric=metric),
            }
        )
    return rows

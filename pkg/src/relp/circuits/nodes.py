"""SAE-decomposed forwards and per-node effect estimates.

At every site carrying an SAE the residual computation is rewritten as
``h = decode(f) + err`` with ``f = encode(h)`` and ``err = h - decode(f)``.
The features and the error term are registered as extra tape sites so the
same linear estimators used for whole sites can be read off at feature
coordinates.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import partial
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from ..core import Gradient, Tensor, backward, ops
from ..model.hooks import HookedModel
from ..patching.pairs import PromptPair, resolve_metric
from ..rules import RuleConfig, propagation_coefficients
from .sae import SparseAutoencoder

Site = tuple[int, str]
# edit(site, part, array) -> replacement array or None to keep the value
Edit = Callable[[Site, str, np.ndarray], "np.ndarray | None"]


@dataclass(frozen=True)
class NodeId:
    """A feature (``feature`` set) or the SAE error term (``feature is None``)."""

    layer: int
    kind: str
    position: int
    feature: int | None = None

    @property
    def is_error(self) -> bool:
        return self.feature is None

    @property
    def site(self) -> Site:
        return (self.layer, self.kind)

    def sort_key(self) -> tuple:
        return (self.layer, self.kind, self.position, -1 if self.feature is None else self.feature)

    def __str__(self) -> str:
        tail = "err" if self.feature is None else f"f{self.feature}"
        return f"L{self.layer}.{self.kind}[{self.position}]#{tail}"

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        head, tail = text.split("#")
        loc, pos = head.rstrip("]").split("[")
        layer, kind = loc.split(".", 1)
        feature = None if tail == "err" else int(tail.lstrip("f"))
        return cls(int(layer.lstrip("L")), kind, int(pos), feature)


def Feature(layer: int, kind: str, feature: int, position: int) -> NodeId:  # noqa: N802
    return NodeId(layer, kind, position, feature)


def Error(layer: int, kind: str, position: int) -> NodeId:  # noqa: N802
    return NodeId(layer, kind, position, None)


def feat_key(site: Site) -> tuple:
    return ("sae", site[0], site[1], "feat")


def err_key(site: Site) -> tuple:
    return ("sae", site[0], site[1], "err")


def _decompose(sae: SparseAutoencoder, site: Site, edit: Edit | None, h: Tensor, run) -> Tensor:
    p = {k: Tensor._wrap(v) for k, v in sae.params_.items()}
    f = ops.relu(ops.add(ops.matmul(ops.sub(h, p["b_dec"]), p["W_enc"]), p["b_enc"]))
    err = ops.sub(h, ops.add(ops.matmul(f, p["W_dec"]), p["b_dec"]))
    if edit is not None:
        new = edit(site, "feat", f.data)
        if new is not None:
            f = Tensor(new)
        new = edit(site, "err", err.data)
        if new is not None:
            err = Tensor(new)
    # a separate node so the gradient at the features sees only the decoder path
    f = ops.scale(f, 1.0)
    run.register(feat_key(site), f)
    run.register(err_key(site), err)
    return ops.add(ops.add(ops.matmul(f, p["W_dec"]), p["b_dec"]), err)


def sae_transforms(saes: Mapping[Site, SparseAutoencoder], edit: Edit | None = None) -> dict:
    """Hook transforms rewriting every SAE site as ``decode(f) + err``."""
    return {site: partial(_decompose, sae, site, edit) for site, sae in saes.items()}


def check_saes(model: HookedModel, saes: Mapping[Site, SparseAutoencoder]) -> None:
    if not saes:
        raise ValueError("need at least one SAE")
    for (layer, kind), sae in saes.items():
        if not 0 <= layer < model.n_layers or kind not in model.site_kinds:
            raise ValueError(f"no site ({layer}, {kind!r}) on this model")
        width = model.site_width(kind)
        if sae.W_enc_.shape[0] != width:
            raise ValueError(f"SAE for ({layer}, {kind!r}) expects width {sae.W_enc_.shape[0]}, site has {width}")


def excluded_layers(n_layers: int) -> tuple[int, ...]:
    """Early layers left out of circuits: the first ``ceil(n_layers / 3)``."""
    return tuple(range(math.ceil(n_layers / 3)))


@dataclass
class NodeEffects:
    """Mean effects per SAE site: ``feat`` is ``(seq, d_feat)``, ``err`` is ``(seq,)``."""

    method: str
    sites: dict[Site, dict[str, np.ndarray]]
    n_layers: int
    n_pairs: int = 1

    @property
    def seq_len(self) -> int:
        return next(iter(self.sites.values()))["err"].shape[0]

    def items(self) -> Iterator[tuple[NodeId, float]]:
        for (layer, kind), arrs in sorted(self.sites.items()):
            T, F = arrs["feat"].shape
            for pos in range(T):
                for i in range(F):
                    yield NodeId(layer, kind, pos, i), float(arrs["feat"][pos, i])
                yield NodeId(layer, kind, pos, None), float(arrs["err"][pos])

    def as_dict(self) -> dict[NodeId, float]:
        return dict(self.items())

    def __getitem__(self, node: NodeId) -> float:
        arrs = self.sites[node.site]
        if node.is_error:
            return float(arrs["err"][node.position])
        return float(arrs["feat"][node.position, node.feature])


def node_universe(effects_or_saes, n_layers: int, seq_len: int, exclude_first_third: bool = True) -> frozenset[NodeId]:
    """All feature and error nodes at SAE sites outside the excluded layers."""
    skip = set(excluded_layers(n_layers)) if exclude_first_third else set()
    out = set()
    if isinstance(effects_or_saes, NodeEffects):
        widths = {s: a["feat"].shape[1] for s, a in effects_or_saes.sites.items()}
    else:
        widths = {s: sae.W_enc_.shape[1] for s, sae in effects_or_saes.items()}
    for (layer, kind), F in widths.items():
        if layer in skip:
            continue
        for pos in range(seq_len):
            out.add(NodeId(layer, kind, pos, None))
            out.update(NodeId(layer, kind, pos, i) for i in range(F))
    return frozenset(out)


def _pair_effects(model, saes, method, config, steps, metric, pair: PromptPair) -> dict[Site, dict[str, np.ndarray]]:
    m = resolve_metric(pair, metric)
    transforms = sae_transforms(saes)
    patch = model.forward(pair.tokens_patch, transforms=transforms)
    if method == "ig":
        clean = model.forward(pair.tokens_original, transforms=transforms)
        coeffs = {}
        for site in saes:
            fa, fb = clean.extra[feat_key(site)], patch.extra[feat_key(site)]
            ea, eb = clean.extra[err_key(site)], patch.extra[err_key(site)]
            gf, ge = np.zeros_like(fa), np.zeros_like(ea)
            for k in range(1, steps + 1):
                alpha = (k - 0.5) / steps
                mid = {"feat": fa + alpha * (fb - fa), "err": ea + alpha * (eb - ea)}
                edit = partial(_replace_site, site, mid)
                run = model.forward(pair.tokens_original, record=True, metric=m, transforms=sae_transforms(saes, edit))
                ids = [run.tape.sites[feat_key(site)], run.tape.sites[err_key(site)]]
                g = backward(run.tape, 1.0, Gradient(), wrt=ids)
                gf = gf + g[ids[0]][0]
                ge = ge + g[ids[1]][0]
            coeffs[feat_key(site)] = gf / steps
            coeffs[err_key(site)] = ge / steps
    else:
        clean = model.forward(pair.tokens_original, record=True, metric=m, transforms=transforms)
        keys = {k: clean.tape.sites[k] for s in saes for k in (feat_key(s), err_key(s))}
        if method == "atp":
            g = backward(clean.tape, 1.0, Gradient(), wrt=list(keys.values()))
            coeffs = {k: g[tid][0] for k, tid in keys.items()}
        else:
            rel = propagation_coefficients(clean.tape, 1.0, config, sites=keys)
            coeffs = {k: rel.coefficients[k][0] for k in keys}
    out = {}
    for site in saes:
        df = patch.extra[feat_key(site)] - clean.extra[feat_key(site)]
        de = patch.extra[err_key(site)] - clean.extra[err_key(site)]
        out[site] = {
            "feat": df * coeffs[feat_key(site)],
            "err": np.sum(de * coeffs[err_key(site)], axis=-1),
        }
    return out


def _replace_site(site, values, s, part, arr):
    if s != site:
        return None
    return values[part].reshape(arr.shape)


def node_effects(
    model: HookedModel,
    saes: Mapping[Site, SparseAutoencoder],
    pairs: Sequence[PromptPair],
    method: str = "relp",
    *,
    config: RuleConfig | str = "gpt2",
    steps: int = 10,
    metric=None,
    n_jobs: int = 1,
) -> NodeEffects:
    """Mean per-node effects over ``pairs`` (positions kept distinct).

    ``method`` is one of ``"atp"``, ``"relp"`` (with ``config``) or ``"ig"``
    (with ``steps`` midpoint samples per SAE site).
    """
    method = method.lower()
    if method not in ("atp", "relp", "ig"):
        raise ValueError(f"unknown node-effect method {method!r}")
    if method == "ig" and steps < 1:
        raise ValueError("steps must be >= 1")
    if isinstance(config, str):
        config = RuleConfig.from_preset(config)
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one prompt pair")
    if len({len(p) for p in pairs}) != 1:
        raise ValueError("node effects keep positions distinct; all pairs must have one length")
    check_saes(model, saes)
    fn = partial(_pair_effects, model, saes, method, config, steps, metric)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            per_pair = list(pool.map(fn, pairs))
    else:
        per_pair = [fn(p) for p in pairs]
    sites = {}
    for site in saes:
        acc_f = np.zeros_like(per_pair[0][site]["feat"])
        acc_e = np.zeros_like(per_pair[0][site]["err"])
        for r in per_pair:
            acc_f = acc_f + r[site]["feat"]
            acc_e = acc_e + r[site]["err"]
        sites[site] = {"feat": acc_f / len(pairs), "err": acc_e / len(pairs)}
    label = {"atp": "AtP", "relp": "RelP", "ig": "IG"}[method]
    return NodeEffects(label, sites, model.n_layers, len(pairs))

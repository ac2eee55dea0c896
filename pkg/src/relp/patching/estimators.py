"""Activation patching and its linear approximations.

All four estimators score a component ``n`` by how much swapping its
activation from the original to the patch prompt moves the metric:

* ``activation_patch`` runs the swap (one patched forward per component);
* ``atp`` takes ``Δn · ∂L/∂n`` at the original activation;
* ``relp`` replaces the gradient by LRP propagation coefficients;
* ``integrated_gradients`` averages the gradient over midpoints of the
  straight path from the original to the patch activation.

Scores are summed over hidden dimensions; the per-dimension terms are kept
in ``AttributionResult.per_dim`` for the gradient-style methods.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..core import Gradient, backward
from ..model.hooks import ComponentId, HookedModel
from ..rules import RuleConfig, propagation_coefficients
from .pairs import Metric, PromptPair, resolve_metric


@dataclass
class AttributionResult:
    method: str
    scores: dict[ComponentId, float]
    n_pairs: int = 1
    per_dim: dict[ComponentId, np.ndarray] | None = None
    steps: int | None = None
    per_pair: np.ndarray | None = field(default=None, repr=False)

    @property
    def components(self) -> list[ComponentId]:
        return list(self.scores)

    def vector(self, components: Sequence[ComponentId] | None = None) -> np.ndarray:
        comps = self.components if components is None else components
        return np.array([self.scores[c] for c in comps])


def _validate(model: HookedModel, pair: PromptPair, components: Sequence[ComponentId]) -> list[ComponentId]:
    components = list(components)
    for c in components:
        model.validate_component(c, len(pair))
    return components


def _contract(delta: np.ndarray, coeff: np.ndarray, c: ComponentId) -> np.ndarray:
    """Per-dimension products for one component (positions summed for ALL)."""
    if c.position is None:
        return np.sum(delta * coeff, axis=0)
    return delta[c.position] * coeff[c.position]


def _from_coefficients(method, components, clean_cache, patch_cache, coeffs, steps=None) -> AttributionResult:
    scores, per_dim = {}, {}
    for c in components:
        delta = patch_cache[c.site] - clean_cache[c.site]
        terms = _contract(delta, coeffs[c.site], c)
        per_dim[c] = terms
        scores[c] = float(np.sum(terms))
    return AttributionResult(method, scores, 1, per_dim, steps)


def activation_patch(
    model: HookedModel, pair: PromptPair, components: Sequence[ComponentId], metric: Metric | str | None = None
) -> AttributionResult:
    """Exact effect of each single-component swap.

    Costs one forward on each prompt plus one patched forward per component.
    """
    components = _validate(model, pair, components)
    m = resolve_metric(pair, metric)
    base = m.value(model.forward(pair.tokens_original).logits)
    patch_cache = model.forward(pair.tokens_patch).cache
    scores = {}
    for c in components:
        logits = model.run_with_patch(pair.tokens_original, {c: patch_cache[c]})
        scores[c] = m.value(logits) - base
    return AttributionResult("AP", scores)


def _two_forwards(model, pair, m):
    clean = model.forward(pair.tokens_original, record=True, metric=m)
    patch = model.forward(pair.tokens_patch)
    return clean, patch


def atp(
    model: HookedModel, pair: PromptPair, components: Sequence[ComponentId], metric: Metric | str | None = None
) -> AttributionResult:
    """First-order estimate: two forwards and one gradient backward."""
    components = _validate(model, pair, components)
    m = resolve_metric(pair, metric)
    clean, patch = _two_forwards(model, pair, m)
    sites = {c.site: clean.tape.sites[c.site] for c in components}
    grads = backward(clean.tape, 1.0, Gradient(), wrt=list(sites.values()))
    coeffs = {s: grads[tid][0] for s, tid in sites.items()}
    return _from_coefficients("AtP", components, clean.cache, patch.cache, coeffs)


def relp(
    model: HookedModel,
    pair: PromptPair,
    components: Sequence[ComponentId],
    metric: Metric | str | None = None,
    config: RuleConfig | str = "gpt2",
) -> AttributionResult:
    """AtP with the gradient replaced by LRP propagation coefficients."""
    if isinstance(config, str):
        config = RuleConfig.from_preset(config)
    components = _validate(model, pair, components)
    m = resolve_metric(pair, metric)
    clean, patch = _two_forwards(model, pair, m)
    sites = {c.site: clean.tape.sites[c.site] for c in components}
    rel = propagation_coefficients(clean.tape, 1.0, config, sites=sites)
    coeffs = {s: rel.coefficients[s][0] for s in sites}
    return _from_coefficients("RelP", components, clean.cache, patch.cache, coeffs)


def integrated_gradients(
    model: HookedModel,
    pair: PromptPair,
    components: Sequence[ComponentId],
    metric: Metric | str | None = None,
    steps: int = 10,
) -> AttributionResult:
    """Midpoint-rule path integral of the gradient at each site.

    The whole site (all positions) is moved along the path together, so a
    site costs ``steps`` patched forwards and ``steps`` backwards no matter
    how many of its positions are requested.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    components = _validate(model, pair, components)
    m = resolve_metric(pair, metric)
    clean = model.forward(pair.tokens_original)
    patch = model.forward(pair.tokens_patch)
    coeffs = {}
    for site in dict.fromkeys(c.site for c in components):
        a, b = clean.cache[site], patch.cache[site]
        total = np.zeros_like(a)
        where = ComponentId(site[0], site[1], None)
        for k in range(1, steps + 1):
            alpha = (k - 0.5) / steps
            run = model.forward(pair.tokens_original, record=True, metric=m, patches={where: a + alpha * (b - a)})
            tid = run.tape.sites[site]
            total = total + backward(run.tape, 1.0, Gradient(), wrt=[tid])[tid][0]
        coeffs[site] = total / steps
    return _from_coefficients("IG", components, clean.cache, patch.cache, coeffs, steps)


def expectation_over(
    pairs: Sequence[PromptPair],
    estimator: Callable[[PromptPair], AttributionResult],
    n_jobs: int = 1,
) -> AttributionResult:
    """Component-wise mean of per-pair results, accumulated in pair order."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need at least one prompt pair")
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(estimator, pairs))
    else:
        results = [estimator(p) for p in pairs]
    first = results[0]
    comps = first.components
    table = np.array([[r.scores[c] for c in comps] for r in results])
    mean = np.zeros(len(comps))
    for row in table:
        mean = mean + row
    mean = mean / len(results)
    per_dim = None
    if first.per_dim is not None:
        per_dim = {}
        for c in comps:
            acc = np.zeros_like(first.per_dim[c])
            for r in results:
                acc = acc + r.per_dim[c]
            per_dim[c] = acc / len(results)
    return AttributionResult(
        first.method, dict(zip(comps, mean.tolist())), len(results), per_dim, first.steps, per_pair=table
    )

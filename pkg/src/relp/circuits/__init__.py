from .circuit import (
    Circuit,
    FaithfulnessUndefinedError,
    ablated_metric,
    build_circuit,
    completeness,
    compute_means,
    error_node_diagnostic,
    faithfulness,
    threshold_sweep,
)
from .nodes import (
    Error,
    Feature,
    NodeEffects,
    NodeId,
    check_saes,
    excluded_layers,
    node_effects,
    node_universe,
    sae_transforms,
)
from .sae import SparseAutoencoder, load_sae, save_sae


def train_sae(model, site, pairs_or_activations, d_feat=64, l1_coeff=1e-3, steps=2000, **kw) -> SparseAutoencoder:
    """Fit an SAE on a site's activations, gathered from prompts if needed."""
    import numpy as np

    X = pairs_or_activations
    if not isinstance(X, np.ndarray):
        X = site_activations(model, site, X)
    return SparseAutoencoder(d_feat=d_feat, l1_coeff=l1_coeff, steps=steps, site=tuple(site), **kw).fit(X)


def site_activations(model, site, pairs) -> "np.ndarray":
    """Stack ``(position, d)`` rows of one site over both prompts of every pair."""
    import numpy as np

    rows = []
    for p in pairs:
        for toks in (p.tokens_original, p.tokens_patch):
            rows.append(model.forward(toks).cache[tuple(site)])
    return np.concatenate(rows, axis=0)


__all__ = [
    "Circuit",
    "Error",
    "FaithfulnessUndefinedError",
    "Feature",
    "NodeEffects",
    "NodeId",
    "SparseAutoencoder",
    "ablated_metric",
    "build_circuit",
    "check_saes",
    "completeness",
    "compute_means",
    "error_node_diagnostic",
    "excluded_layers",
    "faithfulness",
    "load_sae",
    "node_effects",
    "node_universe",
    "sae_transforms",
    "save_sae",
    "site_activations",
    "threshold_sweep",
    "train_sae",
]

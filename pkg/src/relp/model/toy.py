"""Small reference networks with the same hook interface as the transformer.

They exist so estimators can be checked where closed forms exist: a single
linear readout (patching effects are exactly linear) and bias-free MLP
stacks (relevance is conserved under the LN/Identity/0 rules).
"""

from __future__ import annotations

import numpy as np

from ..core import Tensor, ops
from .hooks import HookedModel, RunState


class LinearModel(HookedModel):
    """``logits = embed(tokens) @ W``; one site, ``(0, "resid_pre")``."""

    site_kinds = ("resid_pre",)

    def __init__(self, vocab_size: int, d_model: int, rng_seed: int = 0, max_seq: int = 32, dtype="float64"):
        rng = np.random.default_rng(rng_seed)
        self.params = {
            "W_E": rng.normal(0, 1.0, (vocab_size, d_model)).astype(dtype),
            "W": rng.normal(0, 1.0, (d_model, vocab_size)).astype(dtype),
        }
        self.n_layers = 1
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.max_seq = max_seq

    def _forward(self, ids: np.ndarray, run: RunState) -> Tensor:
        P = self.param_tensors(run)
        x = run.hook(0, "resid_pre", ops.embedding(P["W_E"], ids))
        return ops.matmul(x, P["W"], kind="linear", label="W")


class MLPStack(HookedModel):
    """Bias-free ``[norm] -> linear -> gelu -> linear`` blocks, applied per position.

    Sites per block: ``resid_pre`` (block input) and ``mlp_out`` (block
    output).  The readout to logits is a final bias-free linear map.
    """

    site_kinds = ("resid_pre", "mlp_out")

    def __init__(
        self,
        vocab_size: int,
        d_model: int,
        d_hidden: int,
        n_blocks: int = 1,
        norm: bool = False,
        rng_seed: int = 0,
        max_seq: int = 32,
        dtype="float64",
        weight_scale: float = 1.0,
    ):
        rng = np.random.default_rng(rng_seed)
        p = {"W_E": rng.normal(0, 1.0, (vocab_size, d_model))}
        for l in range(n_blocks):
            p[f"blocks.{l}.W1"] = rng.normal(0, weight_scale / np.sqrt(d_model), (d_model, d_hidden))
            p[f"blocks.{l}.W2"] = rng.normal(0, weight_scale / np.sqrt(d_hidden), (d_hidden, d_model))
        p["W_U"] = rng.normal(0, 1.0 / np.sqrt(d_model), (d_model, vocab_size))
        self.params = {k: v.astype(dtype) for k, v in p.items()}
        self.n_layers = n_blocks
        self.norm = norm
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.max_seq = max_seq

    def _forward(self, ids: np.ndarray, run: RunState) -> Tensor:
        P = self.param_tensors(run)
        x = ops.embedding(P["W_E"], ids)
        for l in range(self.n_layers):
            x = run.hook(l, "resid_pre", x)
            h = ops.layernorm(x, 1e-5, kind="normalization", label=f"blocks.{l}.ln") if self.norm else x
            h = ops.matmul(h, P[f"blocks.{l}.W1"], kind="linear", label=f"blocks.{l}.W1")
            h = ops.gelu(h, kind="activation_fn", label=f"blocks.{l}.act")
            h = ops.matmul(h, P[f"blocks.{l}.W2"], kind="linear", label=f"blocks.{l}.W2")
            x = run.hook(l, "mlp_out", h)
        return ops.matmul(x, P["W_U"], kind="linear", label="W_U")

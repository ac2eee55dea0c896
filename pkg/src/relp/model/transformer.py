"""Decoder-only transformer with learned absolute positions."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..core import Tensor, ops
from .hooks import HookedModel, RunState

_MASK_VALUE = -1e9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    d_head: int = 8
    d_mlp: int = 128
    vocab_size: int = 64
    max_seq: int = 16
    norm: str = "layernorm"
    mlp: str = "gelu_mlp"
    tie_embeddings: bool = False
    norm_eps: float = 1e-5
    dtype: str = "float64"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_heads", "d_head", "d_mlp", "vocab_size", "max_seq"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(f"n_heads*d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}")
        if self.d_mlp < self.d_model:
            raise ConfigError("d_mlp must be >= d_model")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.norm not in ("layernorm", "rmsnorm"):
            raise ConfigError(f"norm must be 'layernorm' or 'rmsnorm', got {self.norm!r}")
        if self.mlp not in ("gelu_mlp", "gated_silu_mlp"):
            raise ConfigError(f"mlp must be 'gelu_mlp' or 'gated_silu_mlp', got {self.mlp!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter manifest for a config."""
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"W_E": (v, d), "W_pos": (cfg.max_seq, d)}

    def norm(prefix):
        shapes[f"{prefix}.w"] = (d,)
        if cfg.norm == "layernorm":
            shapes[f"{prefix}.b"] = (d,)

    for l in range(cfg.n_layers):
        p = f"blocks.{l}"
        norm(f"{p}.ln1")
        for m in ("Q", "K", "V", "O"):
            shapes[f"{p}.attn.W_{m}"] = (d, d)
            shapes[f"{p}.attn.b_{m}"] = (d,)
        norm(f"{p}.ln2")
        if cfg.mlp == "gelu_mlp":
            shapes[f"{p}.mlp.W_in"] = (d, cfg.d_mlp)
            shapes[f"{p}.mlp.b_in"] = (cfg.d_mlp,)
            shapes[f"{p}.mlp.W_out"] = (cfg.d_mlp, d)
            shapes[f"{p}.mlp.b_out"] = (d,)
        else:
            shapes[f"{p}.mlp.W_gate"] = (d, cfg.d_mlp)
            shapes[f"{p}.mlp.W_up"] = (d, cfg.d_mlp)
            shapes[f"{p}.mlp.W_down"] = (cfg.d_mlp, d)
    norm("ln_final")
    if not cfg.tie_embeddings:
        shapes["W_U"] = (d, v)
    shapes["b_U"] = (v,)
    return shapes


class Transformer(HookedModel):
    """GPT-style decoder.

    Hook sites per layer: ``resid_pre``, ``attn_out``, ``mlp_out`` (block
    outputs before the residual add) and ``resid_post``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        expected = param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing={missing} extra={extra}")
        for k, shape in expected.items():
            if tuple(params[k].shape) != shape:
                raise ConfigError(f"{k}: shape {params[k].shape} != {shape}")
        self.params = {k: np.asarray(params[k], dtype=config.dtype) for k in expected}
        self.n_layers = config.n_layers
        self.vocab_size = config.vocab_size
        self.max_seq = config.max_seq
        self.d_model = config.d_model

    @classmethod
    def build(cls, config: ModelConfig, rng_seed: int = 0) -> "Transformer":
        rng = np.random.default_rng(rng_seed)
        params = {}
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf == "w":
                arr = np.ones(shape)
            elif leaf.startswith("b"):
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, 0.02, size=shape)
            params[name] = arr.astype(config.dtype)
        return cls(config, params)

    def n_params(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    # -- forward -----------------------------------------------------------

    def _norm(self, x: Tensor, prefix: str, P) -> Tensor:
        cfg = self.config
        if cfg.norm == "layernorm":
            h = ops.layernorm(x, cfg.norm_eps, kind="normalization", label=prefix)
            return ops.add(ops.mul(h, P[f"{prefix}.w"]), P[f"{prefix}.b"])
        h = ops.rmsnorm(x, cfg.norm_eps, kind="normalization", label=prefix)
        return ops.mul(h, P[f"{prefix}.w"])

    def _linear(self, x, P, w, b=None):
        y = ops.matmul(x, P[w], kind="linear", label=w)
        return ops.add(y, P[b]) if b is not None else y

    def _attn(self, h: Tensor, l: int, P, mask: Tensor) -> Tensor:
        cfg = self.config
        B, T, _ = h.shape
        p = f"blocks.{l}.attn"

        def heads(x):
            return ops.transpose(ops.reshape(x, (B, T, cfg.n_heads, cfg.d_head)), (0, 2, 1, 3))

        q = heads(self._linear(h, P, f"{p}.W_Q", f"{p}.b_Q"))
        k = heads(self._linear(h, P, f"{p}.W_K", f"{p}.b_K"))
        v = heads(self._linear(h, P, f"{p}.W_V", f"{p}.b_V"))
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.d_head))
        pattern = ops.softmax(ops.add(scores, mask))
        z = ops.matmul(pattern, v, kind="attention_mixing", label=f"{p}.mix")
        z = ops.reshape(ops.transpose(z, (0, 2, 1, 3)), (B, T, cfg.d_model))
        return self._linear(z, P, f"{p}.W_O", f"{p}.b_O")

    def _mlp(self, h: Tensor, l: int, P) -> Tensor:
        p = f"blocks.{l}.mlp"
        if self.config.mlp == "gelu_mlp":
            pre = self._linear(h, P, f"{p}.W_in", f"{p}.b_in")
            act = ops.gelu(pre, kind="activation_fn", label=f"{p}.act")
            return self._linear(act, P, f"{p}.W_out", f"{p}.b_out")
        gate = ops.silu(self._linear(h, P, f"{p}.W_gate"), kind="activation_fn", label=f"{p}.act")
        up = self._linear(h, P, f"{p}.W_up")
        mixed = ops.mul(gate, up, kind="multiplicative_gate", label=f"{p}.gate")
        return self._linear(mixed, P, f"{p}.W_down")

    def _forward(self, ids: np.ndarray, run: RunState) -> Tensor:
        P = self.param_tensors(run)
        _, T = ids.shape
        x = ops.add(ops.embedding(P["W_E"], ids), ops.embedding(P["W_pos"], np.arange(T)))
        mask = Tensor(np.triu(np.full((T, T), _MASK_VALUE), k=1), dtype=self.dtype)
        for l in range(self.n_layers):
            x = run.hook(l, "resid_pre", x)
            a = run.hook(l, "attn_out", self._attn(self._norm(x, f"blocks.{l}.ln1", P), l, P, mask))
            x = ops.add(x, a)
            m = run.hook(l, "mlp_out", self._mlp(self._norm(x, f"blocks.{l}.ln2", P), l, P))
            x = ops.add(x, m)
            x = run.hook(l, "resid_post", x)
        x = self._norm(x, "ln_final", P)
        W_U = ops.transpose(P["W_E"]) if self.config.tie_embeddings else P["W_U"]
        logits = ops.matmul(x, W_U, kind="linear", label="unembed")
        return ops.add(logits, P["b_U"])

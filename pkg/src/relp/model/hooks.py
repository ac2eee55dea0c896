"""Hook sites, activation caches and the forward-pass driver shared by all models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

import numpy as np

from ..core import Tape, Tensor, counters, ops
from ..core.tensor import ShapeError

SITE_KINDS = ("resid_pre", "attn_out", "mlp_out", "resid_post")


class UnknownComponentError(KeyError):
    pass


@dataclass(frozen=True)
class ComponentId:
    """A patchable site: layer, site kind and token position (``None`` = all)."""

    layer: int
    kind: str
    position: int | None = None

    @property
    def site(self) -> tuple[int, str]:
        return (self.layer, self.kind)

    def sort_key(self) -> tuple:
        return (self.layer, SITE_KINDS.index(self.kind) if self.kind in SITE_KINDS else 99, self.kind,
                -1 if self.position is None else self.position)

    def __str__(self) -> str:
        pos = "all" if self.position is None else self.position
        return f"L{self.layer}.{self.kind}[{pos}]"

    @classmethod
    def parse(cls, text: str) -> "ComponentId":
        head, pos = text.rstrip("]").split("[")
        layer, kind = head.split(".", 1)
        return cls(int(layer.lstrip("L")), kind, None if pos == "all" else int(pos))


class ActivationCache(dict):
    """Site activations of one forward, keyed by ``(layer, kind)``.

    Arrays are ``(seq, d)`` for a single prompt.
    """

    def __getitem__(self, key):
        if isinstance(key, ComponentId):
            arr = super().__getitem__(key.site)
            return arr if key.position is None else arr[..., key.position, :]
        return super().__getitem__(key)


@dataclass
class ForwardResult:
    logits: np.ndarray
    cache: ActivationCache
    tape: Tape | None = None
    metric: float | None = None
    params: dict[str, int] = field(default_factory=dict)
    extra: dict[Any, np.ndarray] = field(default_factory=dict)


class RunState:
    """Per-call hook state; models never store it, so forwards are re-entrant."""

    def __init__(
        self,
        patches: Mapping[tuple[int, str], list[tuple[int | None, np.ndarray]]] | None,
        transforms: Mapping[tuple[int, str], Callable[[Tensor, "RunState"], Tensor]] | None,
        tape: Tape | None,
        squeeze: bool,
    ):
        self.patches = patches or {}
        self.transforms = transforms or {}
        self.tape = tape
        self.squeeze = squeeze
        self.cache = ActivationCache()
        self.extra_cache: dict[Any, np.ndarray] = {}

    def hook(self, layer: int, kind: str, h: Tensor) -> Tensor:
        key = (layer, kind)
        if key in self.patches:
            arr = np.array(h.data)
            for pos, value in self.patches[key]:
                if pos is None:
                    arr[...] = value
                else:
                    arr[..., pos, :] = value
            h = Tensor(arr)
        self.cache[key] = h.data[0] if self.squeeze else h.data
        if self.tape is not None:
            self.tape.mark_site(key, h)
        fn = self.transforms.get(key)
        if fn is not None:
            h = fn(h, self)
        return h

    def register(self, key, t: Tensor) -> None:
        """Expose an extra tensor (e.g. SAE features) as a named site."""
        self.extra_cache[key] = t.data[0] if self.squeeze else t.data
        if self.tape is not None:
            self.tape.mark_site(key, t)


class HookedModel:
    """Base class: subclasses implement ``_forward(ids, run) -> logits``.

    ``ids`` is always ``(batch, seq)``; logits come back ``(batch, seq, vocab)``.
    """

    site_kinds: tuple[str, ...] = SITE_KINDS
    n_layers: int
    vocab_size: int
    max_seq: int
    params: dict[str, np.ndarray]

    def _forward(self, ids: np.ndarray, run: RunState) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def param_tensors(self, run: RunState) -> dict[str, Tensor]:
        out = {name: Tensor._wrap(arr) for name, arr in self.params.items()}
        run.param_ids = {name: t.id for name, t in out.items()}
        return out

    def check_tokens(self, tokens) -> tuple[np.ndarray, bool]:
        ids = np.asarray(tokens)
        if ids.size and not np.issubdtype(ids.dtype, np.integer):
            raise TypeError("tokens must be integers")
        ids = ids.astype(np.int64)
        squeeze = ids.ndim == 1
        if squeeze:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ValueError(f"tokens must be a non-empty (seq,) or (batch, seq) array, got shape {ids.shape}")
        if ids.shape[1] > self.max_seq:
            raise ValueError(f"sequence length {ids.shape[1]} exceeds max_seq={self.max_seq}")
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(f"token id out of range [0, {self.vocab_size})")
        return ids, squeeze

    def sites(self) -> list[tuple[int, str]]:
        return [(l, k) for l in range(self.n_layers) for k in self.site_kinds]

    def components(self, seq_len: int, kinds: Iterable[str] | None = None, per_position: bool = True) -> list[ComponentId]:
        kinds = tuple(kinds) if kinds is not None else self.site_kinds
        out = []
        for l in range(self.n_layers):
            for k in kinds:
                if k not in self.site_kinds:
                    raise UnknownComponentError(f"site kind {k!r} not in {self.site_kinds}")
                if per_position:
                    out.extend(ComponentId(l, k, p) for p in range(seq_len))
                else:
                    out.append(ComponentId(l, k, None))
        return out

    def validate_component(self, c: ComponentId, seq_len: int) -> None:
        if not (0 <= c.layer < self.n_layers) or c.kind not in self.site_kinds:
            raise UnknownComponentError(f"unknown component {c}")
        if c.position is not None and not (-seq_len <= c.position < seq_len):
            raise UnknownComponentError(f"position {c.position} out of range for length {seq_len}")

    def forward(
        self,
        tokens,
        record: bool = False,
        *,
        metric=None,
        patches: Mapping[ComponentId, Any] | None = None,
        transforms=None,
    ) -> ForwardResult:
        ids, squeeze = self.check_tokens(tokens)
        grouped = self._group_patches(patches, ids.shape[1]) if patches else None
        tape = Tape() if record else None
        run = RunState(grouped, transforms, tape, squeeze)
        counters.bump("forward")
        if tape is not None:
            with tape:
                logits, m = self._run(ids, run, metric, squeeze)
        else:
            logits, m = self._run(ids, run, metric, squeeze)
        if tape is not None:
            tape.outputs = [m.id if m is not None else logits.id]
        return ForwardResult(
            logits=logits.data,
            cache=run.cache,
            tape=tape,
            metric=None if m is None else float(m.data),
            params=getattr(run, "param_ids", {}),
            extra=run.extra_cache,
        )

    def _run(self, ids, run, metric, squeeze):
        logits = self._forward(ids, run)
        if squeeze:
            logits = ops.index(logits, 0)
        m = metric.record(logits) if metric is not None else None
        return logits, m

    def run_with_patch(self, tokens, patches: Mapping[ComponentId, Any]) -> np.ndarray:
        return self.forward(tokens, patches=patches).logits

    def _group_patches(self, patches, seq_len):
        grouped: dict[tuple[int, str], list] = {}
        for c, value in patches.items():
            if not isinstance(c, ComponentId):
                raise UnknownComponentError(f"patch keys must be ComponentId, got {c!r}")
            self.validate_component(c, seq_len)
            value = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=self.dtype)
            width = self.site_width(c.kind)
            expected = (seq_len, width) if c.position is None else (width,)
            if value.shape != expected:
                raise ShapeError("patch", [value.shape, expected], f"value for {c}")
            grouped.setdefault(c.site, []).append((c.position, value))
        return grouped

    def site_width(self, kind: str) -> int:
        return self.d_model  # type: ignore[attr-defined]

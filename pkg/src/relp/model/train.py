"""Answer-token training for toy models."""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..core import Gradient, backward, ops
from .hooks import HookedModel

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    """Loss went non-finite; ``model`` holds the last finite parameters."""

    def __init__(self, step: int, model):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step
        self.model = model


@dataclass(frozen=True)
class TrainExample:
    tokens: tuple[int, ...]
    target: int


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    final_loss: float = float("nan")
    accuracy: float = float("nan")


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated parameters; inputs are left untouched."""
        self.t += 1
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = self.m[k] = self.beta1 * self.m.get(k, np.zeros_like(p)) + (1 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v.get(k, np.zeros_like(p)) + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**self.t)
            v_hat = v / (1 - self.beta2**self.t)
            out[k] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


def cross_entropy(logits, targets: np.ndarray):
    """Mean negative log-probability of ``targets`` at the last position."""
    B = logits.shape[0]
    last = ops.index(logits, (slice(None), -1))
    probs = ops.softmax(last)
    picked = ops.index(probs, (np.arange(B), np.asarray(targets)))
    return ops.scale(ops.sum(ops.log(picked)), -1.0 / B)


def loss_and_grads(model: HookedModel, tokens: np.ndarray, targets: np.ndarray):
    res = model.forward(tokens, record=True, metric=_CE(targets))
    names = list(res.params)
    grads = backward(res.tape, 1.0, Gradient(), wrt=[res.params[n] for n in names])
    return res.metric, {n: grads[res.params[n]] for n in names}


class _CE:
    def __init__(self, targets):
        self.targets = targets

    def record(self, logits):
        return cross_entropy(logits, self.targets)


def _batches(examples: Sequence[TrainExample]):
    groups: dict[int, list[int]] = defaultdict(list)
    for i, ex in enumerate(examples):
        groups[len(ex.tokens)].append(i)
    return [np.array(v) for _, v in sorted(groups.items())]


def answer_accuracy(model: HookedModel, examples: Sequence[TrainExample]) -> float:
    """Fraction of examples whose final-position argmax equals the target."""
    if not examples:
        raise ValueError("no examples")
    correct = 0
    for idx in _batches(examples):
        toks = np.array([examples[i].tokens for i in idx])
        tgt = np.array([examples[i].target for i in idx])
        logits = model.forward(toks).logits
        correct += int(np.sum(np.argmax(logits[:, -1, :], axis=-1) == tgt))
    return correct / len(examples)


def train_toy(
    model: HookedModel,
    dataset: Sequence[TrainExample],
    *,
    steps: int = 2000,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
    log_every: int = 0,
) -> tuple[HookedModel, TrainResult]:
    """Train ``model`` in place with Adam on the answer-token cross-entropy.

    Batches are drawn from one sequence length at a time, chosen with
    probability proportional to how many examples have that length.
    """
    if not dataset:
        raise ValueError("empty dataset")
    for ex in dataset:
        if max(ex.tokens) >= model.vocab_size or ex.target >= model.vocab_size:
            raise ValueError("example token outside model vocabulary")
    rng = np.random.default_rng(seed)
    groups = _batches(dataset)
    weights = np.array([len(g) for g in groups], dtype=float)
    weights /= weights.sum()
    opt = Adam(lr=lr)
    result = TrainResult()
    last_good = dict(model.params)
    for step in range(steps):
        g = groups[rng.choice(len(groups), p=weights)]
        idx = rng.choice(g, size=min(batch_size, len(g)), replace=False)
        toks = np.array([dataset[i].tokens for i in idx])
        tgt = np.array([dataset[i].target for i in idx])
        loss, grads = loss_and_grads(model, toks, tgt)
        if not np.isfinite(loss):
            model.params = last_good
            raise TrainingDivergedError(step, model)
        result.losses.append(loss)
        last_good = model.params
        model.params = opt.step(model.params, grads)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    result.final_loss = result.losses[-1] if result.losses else float("nan")
    result.accuracy = answer_accuracy(model, dataset)
    return model, result

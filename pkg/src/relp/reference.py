"""The shipped toy model: how it is trained and where it lives."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .model import checkpoint
from .model.tokenizer import WordTokenizer
from .model.train import TrainResult, train_toy
from .model.transformer import ModelConfig, Transformer
from .tasks import AGREEMENT_STRUCTURES, gen_agreement, gen_ioi, training_examples, vocabulary

CHECKPOINT = "toy_model.ckpt"
REPORT = "reference_report.json"

TRAIN_DEFAULTS = {"steps": 300, "lr": 1e-3, "batch_size": 64, "n_ioi": 3000, "n_agreement": 600, "seed": 1}


def reference_config(vocab_size: int) -> ModelConfig:
    return ModelConfig(n_layers=2, d_model=32, n_heads=4, d_head=8, d_mlp=128, vocab_size=vocab_size, max_seq=16)


def training_pairs(tok: WordTokenizer, n_ioi: int, n_agreement: int, seed: int):
    pairs = gen_ioi(n_ioi, seed, tok)
    for s in AGREEMENT_STRUCTURES:
        pairs += gen_agreement(s, n_agreement, seed, tok)
    return pairs


def train_reference(model_seed: int = 0, **overrides) -> tuple[Transformer, WordTokenizer, TrainResult]:
    """Train the IOI + agreement toy model from scratch."""
    opts = {**TRAIN_DEFAULTS, **overrides}
    tok = vocabulary()
    model = Transformer.build(reference_config(len(tok)), model_seed)
    data = training_examples(training_pairs(tok, opts["n_ioi"], opts["n_agreement"], opts["seed"]))
    model, result = train_toy(model, data, steps=opts["steps"], lr=opts["lr"], batch_size=opts["batch_size"], seed=0)
    return model, tok, result


def data_path(name: str) -> Path:
    return Path(str(resources.files("relp.data").joinpath(name)))


def load_reference() -> tuple[Transformer, WordTokenizer]:
    model, vocab = checkpoint.load(data_path(CHECKPOINT))
    return model, WordTokenizer.from_dict(vocab)

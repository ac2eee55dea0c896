"""``relp`` command line: gen, train, patch-eval, circuit."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from . import reference
from .circuits import (
    FaithfulnessUndefinedError,
    SparseAutoencoder,
    build_circuit,
    completeness,
    compute_means,
    error_node_diagnostic,
    faithfulness,
    node_effects,
    save_sae,
    site_activations,
)
from .config import RunConfig, RunConfigError, load_config
from .core import NonFiniteError
from .eval_stats import UndefinedCorrelationError, compare_to_oracle
from .model import checkpoint
from .model.checkpoint import CheckpointError
from .model.tokenizer import WordTokenizer
from .model.train import TrainingDivergedError, answer_accuracy, train_toy
from .model.transformer import Transformer
from .patching.pairs import PairError
from .rules import RuleError
from .tasks import agreement_splits, gen_agreement, gen_ioi, make_metric, read_pairs, training_examples, vocabulary, write_pairs

log = logging.getLogger("relp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def git_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_file(path) -> str:
    return git_hash(Path(path).read_bytes())


def _hash_pairs(pairs) -> str:
    text = "".join(json.dumps(p.to_dict(), sort_keys=True) + "\n" for p in pairs)
    return git_hash(text.encode())


class Run:
    """Output directory plus the manifest accumulated along the way."""

    def __init__(self, command: str, cfg: RunConfig, config_path: str | None):
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest: dict[str, Any] = {
            "command": command,
            "seed": cfg.seed,
            "config": cfg.to_dict(),
            "inputs": {},
            "outputs": {},
        }
        if config_path:
            self.manifest["inputs"]["config_file"] = _hash_file(config_path)

    def input(self, name: str, digest: str) -> None:
        self.manifest["inputs"][name] = digest

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        self.manifest["outputs"][name] = git_hash(text.encode())
        return path

    def record(self, name: str, path: Path) -> None:
        self.manifest["outputs"][name] = _hash_file(path)

    def finish(self) -> None:
        (self.out / "manifest.json").write_text(json.dumps(self.manifest, sort_keys=True, indent=1) + "\n")


def _load_model(cfg: RunConfig, run: Run) -> tuple[Transformer, WordTokenizer]:
    if cfg.model.checkpoint == "builtin":
        path = reference.data_path(reference.CHECKPOINT)
    else:
        path = Path(cfg.model.checkpoint)
    model, vocab = checkpoint.load(path)
    run.input("checkpoint", _hash_file(path))
    tok = WordTokenizer.from_dict(vocab) if vocab else vocabulary()
    return model, tok


def _task_pairs(cfg: RunConfig, tok, run: Run):
    if cfg.task.data:
        pairs = read_pairs(cfg.task.data)
        run.input("data", _hash_file(cfg.task.data))
    elif cfg.task.name == "ioi":
        pairs = gen_ioi(cfg.task.n_pairs, cfg.seed, tok)
    else:
        pairs = gen_agreement(cfg.task.name, cfg.task.n_pairs, cfg.seed, tok)
    if cfg.task.metric:
        for p in pairs:
            p.metric = make_metric(p, cfg.task.metric)
    run.input("pairs", _hash_pairs(pairs))
    return pairs


def _csv(rows: Sequence[dict[str, Any]]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, config_path=None) -> int:
    run = Run("gen", cfg, config_path)
    tok = vocabulary()
    pairs = _task_pairs(cfg, tok, run)
    path = run.out / "pairs.jsonl"
    write_pairs(path, pairs)
    run.record("pairs.jsonl", path)
    run.write("vocab.json", json.dumps(tok.to_dict(), sort_keys=True))
    run.finish()
    log.info("wrote %d pairs to %s", len(pairs), path)
    return EXIT_OK


def cmd_train(cfg: RunConfig, config_path=None) -> int:
    run = Run("train", cfg, config_path)
    t = cfg.train
    if cfg.task.data:
        tok = vocabulary()
        pairs = read_pairs(cfg.task.data)
        run.input("data", _hash_file(cfg.task.data))
        model = Transformer.build(reference.reference_config(len(tok)), t.model_seed)
        model, result = train_toy(
            model, training_examples(pairs), steps=t.steps, lr=t.lr, batch_size=t.batch_size, seed=cfg.seed
        )
    else:
        model, tok, result = reference.train_reference(
            t.model_seed, steps=t.steps, lr=t.lr, batch_size=t.batch_size, n_ioi=t.n_ioi,
            n_agreement=t.n_agreement, seed=cfg.seed + 1,
        )
    held = gen_ioi(300, cfg.seed + 1000, tok)
    ioi_acc = answer_accuracy(model, training_examples(held))
    path = run.out / "model.ckpt"
    checkpoint.save(model, path, tok.to_dict())
    run.record("model.ckpt", path)
    run.write("loss_curve.csv", _csv([{"step": i, "loss": float(v)} for i, v in enumerate(result.losses)]))
    summary = {"final_loss": result.final_loss, "train_accuracy": result.accuracy, "ioi_heldout_accuracy": ioi_acc}
    run.write("summary.json", json.dumps(summary, sort_keys=True, indent=1))
    run.finish()
    log.info("final loss %.4g, held-out IOI accuracy %.3f", result.final_loss, ioi_acc)
    return EXIT_OK


def cmd_patch_eval(cfg: RunConfig, config_path=None) -> int:
    run = Run("patch-eval", cfg, config_path)
    model, tok = _load_model(cfg, run)
    pairs = _task_pairs(cfg, tok, run)
    report = compare_to_oracle(
        model, pairs, kinds=cfg.patching.kinds, rule_config=cfg.rule_config(),
        ig_steps=cfg.patching.ig_steps, methods=cfg.patching.methods, n_jobs=cfg.threads,
    )
    report.meta["residual_kinds"] = [k for k in cfg.patching.kinds if k.startswith("resid")]
    run.write("report.json", report.to_json())
    run.write("scores.csv", report.to_csv())
    run.write("pcc.csv", report.pcc_csv())
    for m in report.methods:
        for k in report.kinds:
            run.write(f"grids/{m}_{k}.csv", report.grid_csv(m, k))
    run.finish()
    for kind, row in report.pcc.items():
        log.info("%s: %s", kind, ", ".join(f"{m}={v:.4f}" for m, v in row.items()))
    return EXIT_OK


def _dictionaries(cfg: RunConfig, model, discovery_all, run: Run):
    c = cfg.circuit
    sites = [(layer, kind) for layer in range(model.n_layers) for kind in c.sites]
    saes = {}
    for i, site in enumerate(sites):
        X = site_activations(model, site, discovery_all)
        sae = SparseAutoencoder(
            d_feat=c.d_feat, l1_coeff=c.l1_coeff, steps=c.sae_steps, lr=c.sae_lr, seed=cfg.seed + i, site=site
        ).fit(X)
        saes[site] = sae
        path = run.out / "saes" / f"L{site[0]}_{site[1]}.ckpt"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_sae(sae, path)
        run.record(f"saes/{path.name}", path)
        log.info("SAE %s: recon mse %.3g, mean active %.1f", site, sae.recon_loss_, sae.mean_active_)
    out = {"sae": saes}
    if c.neurons:
        out["neurons"] = {s: SparseAutoencoder.identity(model.site_width(s[1]), site=s, signed=True) for s in sites}
    return out


def cmd_circuit(cfg: RunConfig, config_path=None) -> int:
    run = Run("circuit", cfg, config_path)
    c = cfg.circuit
    model, tok = _load_model(cfg, run)
    rules = cfg.rule_config()
    splits = {}
    for s in c.structures:
        disc, held = agreement_splits(s, cfg.seed, c.n_discovery, c.n_heldout, tok)
        splits[s] = (disc, held)
        run.input(f"{s}_discovery", _hash_pairs(disc))
        run.input(f"{s}_heldout", _hash_pairs(held))
    dictionaries = _dictionaries(cfg, model, [p for d, _ in splits.values() for p in d], run)
    sweep, diagnostics = [], []
    for s, (disc, held) in splits.items():
        for dict_name, saes in dictionaries.items():
            means = compute_means(model, saes, disc)
            for method in c.methods:
                effects = node_effects(
                    model, saes, disc, method, config=rules, steps=cfg.patching.ig_steps, n_jobs=cfg.threads
                )
                circuits = []
                for t in c.thresholds:
                    circ = build_circuit(effects, t, c.exclude_first_third, task=s)
                    circ.meta = {"discovery": _hash_pairs(disc), "heldout": _hash_pairs(held), "dictionary": dict_name}
                    sweep.append(
                        {
                            "structure": s,
                            "dictionary": dict_name,
                            "method": effects.method,
                            "T_N": float(t),
                            "n_nodes": len(circ),
                            "faithfulness": faithfulness(model, saes, circ, held, means),
                            "completeness": completeness(model, saes, circ, held, means),
                        }
                    )
                    circuits.append(circ.to_dict())
                run.write(f"circuits/{s}_{dict_name}_{method}.json", json.dumps(circuits, sort_keys=True))
            if dict_name == "sae":
                universe = build_circuit(effects, 0.0, c.exclude_first_third).universe
                diag = error_node_diagnostic(model, saes, universe, held, means)
                diagnostics.append({"structure": s, **diag})
    run.write("faithfulness.csv", _csv(sweep))
    run.write("error_nodes.csv", _csv(diagnostics))
    run.finish()
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "patch-eval": cmd_patch_eval, "circuit": cmd_circuit}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relp", description="Activation, attribution and relevance patching on toy transformers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--methods", help="comma-separated subset of ap,atp,relp,ig")
        p.add_argument("--preset", choices=["gpt2", "pythia", "qwen2", "gemma2", "gradient"])
        p.add_argument("--ig-steps", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker threads (default: $RELP_THREADS or 1)")
        if name in ("gen", "patch-eval", "train"):
            p.add_argument("--task", choices=["ioi", "within_RC", "across_RC", "across_PP"])
            p.add_argument("--n", type=int, help="number of prompt pairs")
            p.add_argument("--data", help="prompt pairs JSONL")
        if name in ("patch-eval", "circuit"):
            p.add_argument("--checkpoint", help="model checkpoint (default: the shipped toy model)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.methods:
        cfg.patching.methods = [m.strip().lower() for m in args.methods.split(",") if m.strip()]
        if args.command == "circuit":
            cfg.circuit.methods = [m for m in cfg.patching.methods if m != "ap"]
    if args.preset:
        cfg.patching.preset = args.preset
        cfg.patching.rules = {}
    if args.ig_steps is not None:
        cfg.patching.ig_steps = args.ig_steps
    if args.out:
        cfg.out = args.out
    if args.threads is not None:
        cfg.threads = args.threads
    elif "RELP_THREADS" in os.environ and not (args.config and "threads" in _raw_keys(args.config)):
        try:
            cfg.threads = int(os.environ["RELP_THREADS"])
        except ValueError as exc:
            raise RunConfigError(f"RELP_THREADS must be an integer: {exc}") from exc
    for key in ("task", "n", "data", "checkpoint"):
        value = getattr(args, key, None)
        if value is None:
            continue
        if key == "task":
            cfg.task.name = value
        elif key == "n":
            cfg.task.n_pairs = value
        elif key == "data":
            cfg.task.data = value
        else:
            cfg.model.checkpoint = value
    try:
        return cfg.validate()
    except TypeError as exc:
        raise RunConfigError(f"bad value type: {exc}") from exc


def _raw_keys(path) -> set[str]:
    import tomli

    with open(path, "rb") as fh:
        return set(tomli.load(fh))


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args.config)
    except (RunConfigError, RuleError, PairError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (UndefinedCorrelationError, FaithfulnessUndefinedError, TrainingDivergedError, NonFiniteError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

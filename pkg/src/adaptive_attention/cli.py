"""Command line entry point: ``adaptive-attention <command> ...``.

Config and grid files are INI documents::

    [data]
    train = snli_1.0/snli_1.0_train.jsonl
    validation = snli_1.0/snli_1.0_dev.jsonl
    embeddings = glove.840B.300d.txt   ; optional
    output_dir = runs/aa

    [train]          ; any TrainConfig field
    learning_rate = 0.01

    [grid]           ; grid files only: comma-separated values per axis
    ponder_weight = 0.001, 0.0005
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import LABELS, Example, build_vocab, load_embeddings, load_snli, make_batch, tokenize, write_snli
from .evaluation import evaluate, evaluate_fixed_steps, format_report
from .model import predict
from .trace import export_trace
from .training import TrainConfig, grid_search, train, write_metrics_csv

log = logging.getLogger("adaptive_attention")


def _read_ini(path: str) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not parser.read(path, encoding="utf-8"):
        raise SystemExit(f"cannot read config file {path}")
    return parser


def _resolve(base: Path, value: str | None) -> Path | None:
    if not value:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def _load_run_inputs(parser: configparser.ConfigParser, path: str, section: str = "train"):
    base = Path(path).parent
    data = parser["data"] if parser.has_section("data") else {}
    train_path = _resolve(base, data.get("train"))
    val_path = _resolve(base, data.get("validation"))
    if train_path is None or val_path is None:
        raise SystemExit("[data] needs 'train' and 'validation' paths")
    cfg = TrainConfig.from_mapping(dict(parser[section])) if parser.has_section(section) else TrainConfig()
    out = _resolve(base, data.get("output_dir")) or Path("runs/latest")
    return load_snli(train_path), load_snli(val_path), cfg, _resolve(base, data.get("embeddings")), out


def cmd_train(args) -> int:
    parser = _read_ini(args.config)
    train_set, val_set, cfg, emb_path, out = _load_run_inputs(parser, args.config)
    out = Path(args.out) if args.out else out
    out.mkdir(parents=True, exist_ok=True)
    vocab = build_vocab(train_set, cfg.vocab_size)
    vocab.save(out / "vocab.tsv")
    embedding = None
    if emb_path is not None:
        embedding = load_embeddings(emb_path, vocab, None, np.random.default_rng(cfg.seed))
    history = []

    def on_epoch(m, params):
        history.append(m)
        write_metrics_csv(history, out / "metrics.csv")

    result = train(train_set, val_set, cfg, vocab=vocab, embedding=embedding, on_epoch=on_epoch)
    save_checkpoint(result.params, out / "best.ckpt", extra={"train_config": asdict(cfg), "epoch": result.best_epoch})
    print(f"best epoch {result.best_epoch} val_acc {result.best_val_acc:.4f}; checkpoint {out / 'best.ckpt'}")
    return 0


def _parse_axis(key: str, text: str) -> list:
    default = getattr(TrainConfig(), key)
    items = [v.strip() for v in text.split(",") if v.strip()]
    if isinstance(default, str):
        return items
    if isinstance(default, int):
        return [int(v) for v in items]
    return [float(v) for v in items]


def cmd_grid(args) -> int:
    parser = _read_ini(args.grid)
    train_set, val_set, base, emb_path, out = _load_run_inputs(parser, args.grid, section="base")
    if not parser.has_section("grid"):
        raise SystemExit("grid file needs a [grid] section")
    spec = {k: _parse_axis(k, v) for k, v in parser["grid"].items()}
    vocab = build_vocab(train_set, base.vocab_size)
    embedding = None
    if emb_path is not None:
        embedding = load_embeddings(emb_path, vocab, None, np.random.default_rng(base.seed))
    results = grid_search(spec, train_set, val_set, base, epochs=args.epochs, vocab=vocab, embedding=embedding)
    writer = csv.writer(sys.stdout)
    writer.writerow(["rank", "val_acc", "status"] + list(spec))
    for rank, r in enumerate(results, start=1):
        writer.writerow([rank, f"{r.val_acc:.4f}", r.status] + [getattr(r.config, k) for k in spec])
    return 0


def _load_data(args):
    params = load_checkpoint(args.checkpoint)
    return params, load_snli(args.data)


def cmd_eval(args) -> int:
    params, data = _load_data(args)
    print(format_report(evaluate(params, data, batch_size=args.batch_size)))
    return 0


def cmd_eval_steps(args) -> int:
    params, data = _load_data(args)
    caps = [int(c) for c in args.caps.split(",") if c.strip()]
    results = evaluate_fixed_steps(params, data, step_caps=caps, batch_size=args.batch_size)
    print("cap,accuracy")
    for cap, acc in results.items():
        print(f"{cap},{acc!r}")
    return 0


def classify_cli(params, premise_text: str, hypothesis_text: str, out: str | Path | None = None):
    """Classify one pair; returns ``(label, probabilities, trace)``."""
    if not tokenize(premise_text) or not tokenize(hypothesis_text):
        raise ValueError("premise and hypothesis must be non-empty")
    if params.vocab is None:
        raise ValueError("checkpoint has no vocabulary")
    ex = Example.from_text(premise_text, hypothesis_text)
    result = predict(make_batch([ex], params.vocab), params)
    trace = result.traces[0]
    trace.gold = None
    if out is not None:
        export_trace(trace, out)
    return trace.prediction, trace.final_softmax, trace


def cmd_classify(args) -> int:
    params = load_checkpoint(args.checkpoint)
    try:
        label, probs, _ = classify_cli(params, args.premise, args.hypothesis, args.out)
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    print(label)
    for name, p in zip(LABELS, probs):
        print(f"{name},{p:.6f}")
    if args.out:
        print(f"trace written to {Path(args.out).with_suffix('.svg')}")
    return 0


def cmd_trace(args) -> int:
    params, data = _load_data(args)
    if not 0 <= args.index < len(data):
        print(f"error: index {args.index} outside [0, {len(data)})", file=sys.stderr)
        return 2
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    trace = predict(make_batch([data[args.index]], params.vocab), params).traces[0]
    json_path, svg_path = export_trace(trace, out_dir / f"trace_{args.index}")
    print(json_path)
    print(svg_path)
    return 0


def cmd_synth(args) -> int:
    from .synthetic import generate_corpus, write_random_vectors

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    splits = {}
    for name, n, seed in (("train", args.train, args.seed), ("dev", args.dev, args.seed + 1), ("test", args.dev, args.seed + 2)):
        splits[name] = generate_corpus(n, seed)
        write_snli(splits[name], out / f"synthetic_{name}.jsonl")
    # random unit-norm vectors stand in for a pretrained embedding file
    vectors = out / "synthetic_vectors.txt"
    write_random_vectors(build_vocab(splits["train"]).itos[2:], vectors, dim=args.vector_dim, seed=args.seed)
    print(json.dumps({"dir": str(out), "train": args.train, "dev": args.dev, "vectors": str(vectors)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="adaptive-attention", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (overrides [data] output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="grid search over hyperparameters")
    p.add_argument("--grid", required=True)
    p.add_argument("--epochs", type=int, default=15)
    p.set_defaults(func=cmd_grid)

    for name, func, helptext in (("eval", cmd_eval, "accuracy report"), ("eval-steps", cmd_eval_steps, "fixed-step-cap ablation")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--batch-size", type=int, default=128)
        if name == "eval-steps":
            p.add_argument("--caps", default="1,2,4,8,20")
        p.set_defaults(func=func)

    p = sub.add_parser("classify", help="classify one premise/hypothesis pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--premise", required=True)
    p.add_argument("--hypothesis", required=True)
    p.add_argument("--out", help="trace path stem (.json and .svg are written)")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("trace", help="export the attention trace of one dataset example")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("synth", help="write a synthetic SNLI-format corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--dev", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vector-dim", type=int, default=50)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: train, eval-vqa, eval-needle, gradcheck, inspect.

Exit codes: 0 ok, 2 configuration or missing input, 3 numeric failure
(NaN loss, failed gradient check), 4 corrupt artifact.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint, config as config_mod
from .checkpoint import CorruptCheckpointError, atomic_write_text
from .eval_needle import (QUESTIONS, NeedleConfig, inverted_responder, load_manifest, model_responder,
                          oracle_responder, random_responder, run_needle_eval)
from .eval_vqa import load_records, run_vqa_eval
from .gradcheck import SMALL_CONFIG, format_report, gradient_suite, suite_config
from .model import ToyVLM
from .tensor import ContractError, make_rng
from .tokenizer import ToyTokenizer
from .training import NumericError, build_examples, prepare_model, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CORRUPT = 0, 2, 3, 4

log = logging.getLogger("diffpali")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- helpers -----------------------------------------------------------------------

def git_blob_hash(path: Path) -> str:
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def inputs_hash(paths) -> tuple[dict[str, str], str]:
    hashes = {str(p): git_blob_hash(p) for p in sorted({Path(p) for p in paths}) if Path(p).is_file()}
    combined = hashlib.sha1("".join(f"{k} {v}\n" for k, v in sorted(hashes.items())).encode()).hexdigest()
    return hashes, combined


def write_manifest(path: Path, command: str, snapshot: dict, inputs, outputs, started: str) -> None:
    hashes, combined = inputs_hash(inputs)
    manifest = {"command": command, "config": snapshot, "inputs": hashes, "input_hash": combined,
                "outputs": [str(o) for o in outputs], "started": started, "finished": _now()}
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _vocab_texts(records, sources) -> list[str]:
    texts = [*QUESTIONS.values()]
    for r in records:
        texts.append(r.question)
        texts.extend(r.answers)
    for src in sources:
        with open(src, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                texts.extend(str(obj[k]) for k in ("question", "caption") if k in obj)
                texts.extend(str(a) for a in obj.get("answers", []))
    return texts


def _load_model(path) -> ToyVLM:
    path = Path(path)
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_CONFIG)
    try:
        model, _ = checkpoint.load_model(path)
    except CorruptCheckpointError as exc:
        raise CliError(f"corrupt checkpoint {path}: {exc}", EXIT_CORRUPT) from exc
    return model


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("DIFFATTN_THREADS", "1")))
    except ValueError:
        return 1


# -- subcommands -----------------------------------------------------------------------

def cmd_train(args) -> int:
    started = _now()
    cfg = config_mod.load(args.config, args.set, args.seed)
    if cfg.train_data is None:
        raise config_mod.ConfigError("data.train is not set", "data.train")
    for p in [cfg.train_data, *cfg.vocab_sources]:
        if not p.is_file():
            raise CliError(f"input file not found: {p}", EXIT_CONFIG)
    records = load_records(cfg.train_data)
    tok = ToyTokenizer.build(_vocab_texts(records, cfg.vocab_sources), cfg.model.vocab_size)
    model = ToyVLM.init(cfg.model, tok, make_rng(cfg.seed, stream=0))
    prepare_model(model, cfg.train)
    examples = build_examples(model, records)
    if not examples:
        raise CliError(f"no usable training examples in {cfg.train_data}", EXIT_CONFIG)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    _, recs = train(model, examples, cfg.train, out_dir=out, metrics_path=out / "metrics.jsonl")
    inputs = [Path(args.config), cfg.train_data, *cfg.vocab_sources, *(r.image for r in records)]
    write_manifest(out / "manifest.json", "train", cfg.snapshot(), inputs,
                   [out / "last.ckpt", out / "metrics.jsonl"], started)
    final = recs[-1]["loss"] if recs else float("nan")
    print(f"trained {len(recs)} steps on {len(examples)} examples; final loss {final:.4f}; "
          f"checkpoint {out / 'last.ckpt'}")
    return EXIT_OK


def cmd_eval_vqa(args) -> int:
    started = _now()
    model = _load_model(args.model)
    data = Path(args.data)
    if not data.is_file():
        raise CliError(f"dataset not found: {data}", EXIT_CONFIG)
    records = load_records(data)
    score, rows = run_vqa_eval(lambda px, q: model.answer(px, q, args.max_new), records, args.limit,
                               args.out, workers=_threads())
    if args.out:
        out = Path(args.out)
        write_manifest(out.with_name(out.name + ".manifest.json"), "eval-vqa",
                       {"model": str(args.model), "data": str(data), "limit": args.limit, "max_new": args.max_new},
                       [args.model, data], [out], started)
    print(f"{score:.2f}")
    return EXIT_OK


def cmd_eval_needle(args) -> int:
    started = _now()
    manifest = Path(args.manifest)
    if not manifest.is_file():
        raise CliError(f"manifest not found: {manifest}", EXIT_CONFIG)
    pool = load_manifest(manifest)
    input_size = None
    if args.responder == "model":
        if not args.model:
            raise CliError("--responder model needs --model", EXIT_CONFIG)
        model = _load_model(args.model)
        responder = model_responder(model, args.max_new)
        input_size = model.config.image_size
    elif args.responder == "oracle":
        responder = oracle_responder
    elif args.responder == "inverted":
        responder = inverted_responder
    else:
        responder = random_responder(args.seed)
    cfg = NeedleConfig(grid_n=args.grid, sample_limit=args.samples, seed=args.seed)
    out = Path(args.out_dir)
    report, _ = run_needle_eval(responder, pool, cfg, out, model_input_size=input_size)
    write_manifest(out / "manifest.json", "eval-needle",
                   {"model": args.model, "manifest": str(manifest), "grid": args.grid, "samples": args.samples,
                    "seed": args.seed, "responder": args.responder},
                   [p for p in [args.model, manifest] if p], [out / "cells.csv", out / "summary.json"], started)
    print(f"index accuracy {100 * report.index_accuracy:.2f}% over {report.total_trials} samples")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = config_mod.load(args.config, args.set, args.seed)
    model_cfg = cfg.model
    if args.small:
        model_cfg = suite_config(SMALL_CONFIG, attention_variant=model_cfg.attention_variant,
                                 encoder_variant=model_cfg.encoder_variant, ffn_kind=model_cfg.ffn_kind)
    max_coords = None if args.max_coords <= 0 else args.max_coords
    results = gradient_suite(model_cfg, seed=cfg.seed, max_coords=max_coords)
    print(format_report(results, model_cfg.attention_variant))
    failed = [r.group for r in results if not r.ok]
    if failed:
        print(f"FAILED groups: {', '.join(failed)}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_CONFIG)
    try:
        tensors, meta = checkpoint.load(path)
        model, _ = checkpoint.load_model(path)
    except CorruptCheckpointError as exc:
        raise CliError(f"corrupt checkpoint {path}: {exc}", EXIT_CORRUPT) from exc
    print(f"checkpoint {path}  step={meta.get('step', 0)}")
    print("tensors:")
    for name, arr in tensors.items():
        print(f"  {name:<28} {'x'.join(map(str, arr.shape))}")
    print("lambda per layer (current / init):")
    for name, (lam, init) in model.lambdas().items():
        variant = dict(model.named_layers())[name].attn.variant.value
        print(f"  {name:<8} {lam:.6f} / {init:.6f}  [{variant}]")
    print("adapters:")
    for name, ad in model.adapters().items():
        print(f"  {name:<12} rank={ad.rank} alpha={ad.alpha:g}")
    print(f"trainable parameters: {model.census()}")
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffpali", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fine-tune the toy model")
    t.add_argument("config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    v = sub.add_parser("eval-vqa", help="VQAv2 consensus score of a checkpoint")
    _vqa_args(v)

    n = sub.add_parser("eval-needle", help="2x2 needle-in-a-haystack index accuracy")
    _needle_args(n)

    g = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    g.add_argument("config")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    g.add_argument("--seed", type=int)
    g.add_argument("--max-coords", type=int, default=16, help="coordinates probed per tensor (<=0: all)")
    g.add_argument("--small", action="store_true", help="use the 16-wide suite model with the config's variant")
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("inspect", help="summarise a checkpoint")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def _vqa_args(v):
    v.add_argument("--model", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--limit", type=int)
    v.add_argument("--out")
    v.add_argument("--max-new", type=int, default=8)
    v.set_defaults(func=cmd_eval_vqa)


def _needle_args(n):
    n.add_argument("--model")
    n.add_argument("--manifest", required=True)
    n.add_argument("--grid", type=int, default=2)
    n.add_argument("--samples", type=int, default=200)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--out-dir", required=True)
    n.add_argument("--responder", choices=["model", "oracle", "inverted", "random"], default="model")
    n.add_argument("--max-new", type=int, default=4)
    n.set_defaults(func=cmd_eval_needle)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CorruptCheckpointError as exc:
        print(f"corrupt artifact: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def _subcommand_entry(name: str, add_args):
    def entry() -> int:
        p = argparse.ArgumentParser(prog=name)
        add_args(p)
        p.add_argument("-v", "--verbose", action="store_true")
        args = p.parse_args()
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
        return main([name, *sys.argv[1:]])
    return entry


eval_vqa_main = _subcommand_entry("eval-vqa", _vqa_args)
eval_needle_main = _subcommand_entry("eval-needle", _needle_args)

if __name__ == "__main__":
    sys.exit(main())

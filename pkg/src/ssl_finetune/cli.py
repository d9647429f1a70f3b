"""Command-line entry point: ``ssl-finetune run|table|gen-toy|eval``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .data import Manifest, ToyCorpusSpec, generate_toy_corpus, read_trials
from .errors import ConfigError, DataError, SSLFinetuneError, TrainingError
from .experiment import TABLE_COLUMNS, ExperimentConfig, PartialRunError, collect_results, emit_table, run

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_DATA = 0, 2, 3, 4


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = yaml.safe_load(value)
    return out


def cmd_run(args) -> int:
    overrides = _parse_overrides(args.set)
    if args.seeds:
        overrides["seeds"] = [int(s) for s in args.seeds.split(",")]
    if args.epochs:
        overrides["epochs"] = args.epochs
    config = ExperimentConfig.from_file(args.config, overrides)
    record = run(config, args.out, force=args.force)
    print(json.dumps(record["metrics"], sort_keys=True))
    return EXIT_OK


def cmd_table(args) -> int:
    records = collect_results(args.results_dir)
    print(emit_table(records, TABLE_COLUMNS[args.which], fmt=args.format), end="")
    return EXIT_OK


def cmd_gen_toy(args) -> int:
    spec = {}
    if args.spec:
        with open(args.spec, encoding="utf-8") as f:
            spec = yaml.safe_load(f) or {}
    spec.update(_parse_overrides(args.set))
    out = args.out or spec.pop("out_dir", None)
    spec.pop("out_dir", None)
    if not out:
        raise ConfigError("gen-toy needs an output directory (--out or out_dir in the toy spec file)")
    try:
        toy = ToyCorpusSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in spec.items()})
    except TypeError as e:
        raise ConfigError(f"bad toy spec: {e}") from None
    manifest = generate_toy_corpus(toy, out)
    print(f"wrote {len(manifest)} utterances to {Path(out) / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import torch

    from .finetune import Example, load_finetuned
    from .heads import sv_score
    from .metrics import TrialScore, equal_error_rate

    try:
        encoder, head, meta = load_finetuned(args.checkpoint)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e)) from None
    manifest = Manifest.load(args.manifest, args.data_root)
    task = meta.get("task", "")
    if task == "SLU":
        ex = [Example(e.utt_id, manifest.waveform(e), e.semantics) for e in manifest]
        result = head.scores(encoder, ex, args.beam_width)
    elif task == "SV":
        if not args.trials:
            raise ConfigError("SV evaluation needs --trials")
        trials = read_trials(args.trials)
        ids = sorted({u for t in trials for u in (t.enroll_id, t.test_id)})
        by_id = manifest.by_id()
        emb = head.embeddings(encoder, [Example(u, manifest.waveform(by_id[u]), 0) for u in ids])
        scores = [TrialScore(t.enroll_id, t.test_id, sv_score(emb[t.enroll_id], emb[t.test_id]), t.label)
                  for t in trials]
        result = {"SV": equal_error_rate(scores)}
    else:
        cidx = {c: i for i, c in enumerate(meta["classes"])}
        ex = [Example(e.utt_id, manifest.waveform(e), cidx[e.emotion]) for e in manifest]
        result = {task or "WA": head.evaluate(encoder, ex)}
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssl-finetune", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment cell from a YAML config")
    r.add_argument("config")
    r.add_argument("--out", default="results", help="results directory")
    r.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (dotted keys)")
    r.add_argument("--seeds", help="comma-separated seeds")
    r.add_argument("--epochs", type=int)
    r.add_argument("--force", action="store_true", help="ignore a cached result")
    r.set_defaults(func=cmd_run)

    t = sub.add_parser("table", help="render result.json files under a directory")
    t.add_argument("results_dir")
    t.add_argument("--which", choices=sorted(TABLE_COLUMNS), default="all")
    t.add_argument("--format", choices=("text", "json", "csv"), default="text")
    t.set_defaults(func=cmd_table)

    g = sub.add_parser("gen-toy", help="write a synthetic corpus")
    g.add_argument("spec", nargs="?", help="YAML file with ToyCorpusSpec fields")
    g.add_argument("--out")
    g.add_argument("--set", action="append", metavar="KEY=VALUE")
    g.set_defaults(func=cmd_gen_toy)

    e = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint on a manifest")
    e.add_argument("checkpoint")
    e.add_argument("manifest")
    e.add_argument("--trials", help="trial list for SV checkpoints")
    e.add_argument("--beam-width", type=int, default=None)
    e.add_argument("--data-root")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, PartialRunError) as e:
        print(f"training failure: {e}", file=sys.stderr)
        return EXIT_TRAINING
    except SSLFinetuneError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())

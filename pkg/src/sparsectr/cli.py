"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("sparsectr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_json(path, what: str):
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid {what} JSON at line {exc.lineno}: {exc.msg}") from exc


def _model_and_hyper(path, seed: int | None):
    from .model import ModelConfig
    from .train import TrainHyper

    obj = _load_json(path, "config")
    if not isinstance(obj, dict):
        raise ValueError(f"{path}: config must be a JSON object")
    unknown = set(obj) - {"model", "train"}
    if unknown:
        raise ValueError(f"{path}: unknown top-level keys {sorted(unknown)} (expected 'model' and 'train')")
    cfg = ModelConfig.from_dict(obj.get("model", {}))
    train_obj = dict(obj.get("train", {}))
    allowed = set(TrainHyper.__dataclass_fields__)
    if set(train_obj) - allowed:
        raise ValueError(f"{path}: unknown train keys {sorted(set(train_obj) - allowed)}")
    hyper = TrainHyper(**train_obj)
    if seed is not None:
        hyper.seed = seed
    return cfg, hyper


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import GeneratorSpec, generate, planted_oracle_auc, split_by_user, write_jsonl

    spec = GeneratorSpec.from_dict(_load_json(args.spec, "generator spec")) if args.spec else GeneratorSpec()
    if args.seed is not None:
        spec.seed = args.seed
    spec.validate()
    samples = generate(spec)
    if args.test_out:
        train_set, test_set = split_by_user(samples, spec.test_fraction, spec.seed)
        write_jsonl(train_set, args.out)
        write_jsonl(test_set, args.test_out)
        print(f"wrote {len(train_set)} train samples to {args.out} and {len(test_set)} test samples to {args.test_out}")
    else:
        write_jsonl(samples, args.out)
        print(f"wrote {len(samples)} samples to {args.out}")
    print(f"planted-oracle AUC {planted_oracle_auc(samples):.6f}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import read_jsonl
    from .model import fill_from_data, save_checkpoint
    from .train import train

    cfg, hyper = _model_and_hyper(args.config, args.seed)
    samples = read_jsonl(args.data)
    cfg = fill_from_data(cfg, samples)
    eval_samples = read_jsonl(args.eval_data) if args.eval_data else None
    result = train(samples, cfg, hyper, eval_samples=eval_samples)
    save_checkpoint(args.out, cfg, result.params)
    if args.log:
        result.write_csv(args.log)
    last = result.rows[-1]
    print(f"trained {len(result.rows)} steps; final loss {last['loss']:.6f}")
    if eval_samples:
        print(f"eval AUC {last['eval_auc']:.6f}")
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def report_lines(model_auc: float, baseline_auc: float | None = None) -> list[str]:
    from .train import rela_impr

    lines = [f"AUC {model_auc:.6f}"]
    if baseline_auc is not None:
        lines.append(f"baseline AUC {baseline_auc:.6f}")
        lines.append(f"RelaImpr {rela_impr(model_auc, baseline_auc):.2f}%")
    return lines


def cmd_eval(args) -> int:
    from .data import read_jsonl
    from .model import load_checkpoint
    from .train import evaluate

    samples = read_jsonl(args.data)
    cfg, params = load_checkpoint(args.checkpoint)
    model_auc = evaluate(samples, params, cfg)
    base = args.baseline_auc
    if args.baseline:
        bcfg, bparams = load_checkpoint(args.baseline)
        base = evaluate(samples, bparams, bcfg)
    for line in report_lines(model_auc, base):
        print(line)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import BenchConfig, bench, default_grid, write_bench_csv

    if args.grid:
        obj = _load_json(args.grid, "bench grid")
        items = obj.get("configs") if isinstance(obj, dict) else obj
        if not isinstance(items, list) or not items:
            raise ValueError(f"{args.grid}: grid must be a non-empty list of configs (or {{'configs': [...]}})")
        grid = [BenchConfig.from_dict(c) for c in items]
    else:
        grid = default_grid()
    rows = bench(grid)
    write_bench_csv(rows, args.out)
    for r in rows:
        print(f"{r['attention']:>4} n={r['n']:<5} P={r['num_chunks']:<3} m={r['transition_m']} w={r['local_w']:<3} "
              f"{r['median_ms']:9.2f} ms  peak {r['peak_bytes'] / 2**20:8.2f} MiB  flops {r['counted_flops']:.3e}")
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def cmd_fit_scaling(args) -> int:
    from .scaling import fit_power_law, read_points, write_fit_csv

    x, y = read_points(args.points)
    fit = fit_power_law(x, y)
    write_fit_csv(args.out, x, y, fit)
    flag = " (degenerate: constant AUC)" if fit.degenerate else ""
    print(f"E={fit.E:.8g} A={fit.A:.8g} alpha={fit.alpha:.8g} R2={fit.r2:.6f}{flag}")
    return EXIT_OK


def cmd_inspect_chunks(args) -> int:
    from .chunking import time_chunk, transition_select
    from .data import read_jsonl
    from .model import fill_from_data

    cfg, _ = _model_and_hyper(args.config, None)
    samples = read_jsonl(args.data)
    cfg = fill_from_data(cfg, samples)
    for s in samples[:args.k]:
        part = time_chunk(np.asarray(s.times, dtype=np.int64), cfg.num_chunks)
        record = {
            "user_id": s.user_id,
            "padding": [part.padding.start, part.padding.stop],
            "chunks": [[c.start, c.stop] for c in part.valid_chunks],
            "chunk_mean_time": [float(v) for v in part.chunk_mean_time[1:]],
            "transition": transition_select(part, cfg.transition_m),
        }
        print(json.dumps(record))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sparsectr", description="Sparse-attention CTR models on long behavior sequences.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic listwise dataset")
    g.add_argument("--spec", help="generator spec (JSON); defaults are used when omitted")
    g.add_argument("--out", required=True, help="output JSONL (all samples, or the train split with --test-out)")
    g.add_argument("--test-out", help="write a per-user held-out split here")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model for the configured number of epochs")
    t.add_argument("--data", required=True)
    t.add_argument("--config", required=True, help="JSON with optional 'model' and 'train' sections")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="metric log CSV (step, loss, eval_auc)")
    t.add_argument("--eval-data", help="held-out JSONL evaluated at the end (and every eval_every steps)")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="report AUC, and RelaImpr against a baseline")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    base = e.add_mutually_exclusive_group()
    base.add_argument("--baseline", help="baseline checkpoint evaluated on the same data")
    base.add_argument("--baseline-auc", type=float, help="known baseline AUC")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time sparse and full attention stacks")
    b.add_argument("--grid", help="JSON list of bench configs; a built-in grid is used when omitted")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    f = sub.add_parser("fit-scaling", help="fit AUC(X) = E - A / X^alpha")
    f.add_argument("--points", required=True, help="CSV with columns flops, auc")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_scaling)

    c = sub.add_parser("inspect-chunks", help="print the time chunking of the first samples")
    c.add_argument("--data", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--k", type=int, default=5)
    c.set_defaults(func=cmd_inspect_chunks)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    from .train import TrainingDiverged

    try:
        return args.func(args)
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, TypeError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

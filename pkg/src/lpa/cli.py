"""``lpa`` command line.

Exit codes: 0 success, 1 failed verification, 2 usage or configuration
error, 3 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from lpa import accounting, configfile, training, verify
from lpa.checkpoint import CheckpointError, read_checkpoint
from lpa.config import ConfigError, get_preset
from lpa.configfile import DataSpec, ExperimentConfig
from lpa.layers import AttentionLayer
from lpa.model import build_model

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_TRAIN = 0, 1, 2, 3

log = logging.getLogger("lpa")


class UsageError(Exception):
    pass


def _emit(obj, stream=None):
    print(json.dumps(obj, sort_keys=False), file=stream or sys.stdout)


def _experiment(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        exp = configfile.load(args.config)
    elif getattr(args, "preset", None):
        exp = ExperimentConfig(model=get_preset(args.preset))
    else:
        raise UsageError("one of --config or --preset is required")
    exp.model.validate()
    return exp


def parse_count(text):
    """``"369M"``, ``"2.43B"``, ``"1e6"`` or a plain integer."""
    t = text.strip().upper()
    scale = {"K": 1e3, "M": 1e6, "B": 1e9, "G": 1e9}.get(t[-1:], None)
    try:
        return int(round(float(t[:-1]) * scale)) if scale else int(float(t))
    except ValueError:
        raise UsageError(f"cannot parse parameter count {text!r}") from None


# commands -------------------------------------------------------------------


def cmd_count(args):
    exp = _experiment(args)
    rep = accounting.count_params(exp.model, args.seq_len)
    if args.format == "records":
        _emit({"config": args.preset or args.config, **rep.as_dict()})
        return EXIT_OK
    rows = [
        ("embeddings", rep.embeddings),
        ("attention", rep.attention),
        ("ffn", rep.ffn),
        ("norms", rep.norms),
        ("output_head", rep.output_head),
        ("total", rep.total),
        ("dense_baseline_total", rep.dense_baseline_total),
        ("delta_vs_dense", rep.delta_vs_dense),
    ]
    for name, n in rows:
        print(f"{name:<22}{n:>16,}  {accounting.fmt_params(n):>9}")
    print(f"{'attention_flops/seq':<22}{rep.attention_flops_per_sequence:>16,}  (L={rep.seq_len})")
    return EXIT_OK


def cmd_flops(args):
    L = args.seq_len
    if L <= 0:
        raise UsageError(f"--seq-len must be positive, got {L}")
    if args.preset:
        cfg = get_preset(args.preset)
        d_in, d_out = cfg.d_model, cfg.d_a
        r = args.r if args.r is not None else cfg.placement.r if cfg.placement.factored_sublayers() else None
        layers = cfg.layer_count
    else:
        if not (args.d_in and args.d_out):
            raise UsageError("flops needs --preset or both --d-in and --d-out")
        d_in, d_out, r, layers = args.d_in, args.d_out, args.r, 1
    record = {
        "d_in": d_in,
        "d_out": d_out,
        "r": r,
        "seq_len": L,
        "dense_formula": accounting.count_attention_flops(d_in, d_out, None, L),
        "dense_macs": accounting.count_attention_macs(d_in, d_out, None, L),
    }
    if r is not None:
        record["lpa_formula"] = accounting.count_attention_flops(d_in, d_out, r, L)
        record["lpa_macs"] = accounting.count_attention_macs(d_in, d_out, r, L)
    if args.preset:
        record["preset"] = args.preset
        record["layers"] = layers
        record["model_attention_flops"] = accounting.count_params(cfg, L).attention_flops_per_sequence
    _emit(record)
    return EXIT_OK


def _corpus(exp: ExperimentConfig, data_arg):
    path = data_arg or exp.data.path
    if not path:
        raise UsageError("no corpus: pass --data or set [data] path")
    if not os.path.exists(path):
        raise UsageError(f"corpus not found: {path}")
    return training.load_corpus(path, exp.data.split)


def cmd_train(args):
    exp = _experiment(args)
    tcfg = exp.train.replace(seed=args.seed) if args.seed is not None else exp.train
    if args.steps is not None:
        tcfg = tcfg.replace(total_steps=args.steps)
    corpus = _corpus(exp, args.data)
    os.makedirs(args.out, exist_ok=True)
    resolved = ExperimentConfig(exp.model, tcfg, DataSpec(args.data or exp.data.path, exp.data.split))
    configfile.save(resolved, os.path.join(args.out, "experiment.cfg"))
    model = build_model(exp.model, seed=tcfg.seed)
    _, records = training.train(
        model, corpus, tcfg, out_dir=args.out, eval_stream=corpus["valid"] if len(corpus["valid"]) > 1 else None,
        record_timing=not args.no_timing,
    )
    _emit({
        "steps": len(records),
        "initial_loss": records[0].train_loss,
        "final_loss": records[-1].train_loss,
        "checkpoint": os.path.join(args.out, "final.ckpt"),
        "metrics": os.path.join(args.out, "train.metrics.jsonl"),
    })
    return EXIT_OK


def cmd_eval(args):
    model, _ = read_checkpoint(args.checkpoint)
    if not os.path.exists(args.data):
        raise UsageError(f"corpus not found: {args.data}")
    split = training.load_corpus(args.data)[args.split] if args.split != "all" else None
    if split is None:
        with open(args.data, "rb") as fh:
            split = training.ByteTokenizer().tokenize(fh.read())
    seq_len = args.seq_len or model.config.max_seq_len
    _emit(training.evaluate_ppl(model, split, seq_len))
    return EXIT_OK


def cmd_seeds(args):
    exp = _experiment(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    tcfg = exp.train if args.steps is None else exp.train.replace(total_steps=args.steps)
    corpus = _corpus(exp, args.data)
    summary = training.run_seeds(exp.model, tcfg, corpus, seeds, out_dir=args.out, record_timing=not args.no_timing)
    for rec in summary.per_seed:
        _emit(rec)
    _emit({"mean_ppl": summary.mean_ppl, "std_ppl": summary.std_ppl, "n": len(seeds),
           "single_seed": summary.single_seed})
    print(f"ppl {summary.format()}")
    return EXIT_OK


def cmd_verify(args):
    failed = []
    for check in verify.run_suite(args.suite):
        print(check.to_json(), flush=True)
        if not check.passed:
            failed.append(check.check)
    if failed:
        print(f"FAILED {len(failed)} check(s): {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_allocate(args):
    exp = _experiment(args)
    target = parse_count(args.target_params)
    try:
        alloc = accounting.allocate_surplus(exp.model, target, args.strategy)
    except accounting.InfeasibleError as exc:
        raise UsageError(f"infeasible: {exc}") from exc
    header = (
        f"# strategy={alloc.strategy} target={alloc.target_total} achieved={alloc.achieved_total} "
        f"quantum={alloc.quantum_cost}\n"
    )
    text = header + configfile.render(ExperimentConfig(alloc.config, exp.train, exp.data))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        _emit({"strategy": alloc.strategy, "target": alloc.target_total, "achieved": alloc.achieved_total,
               "quantum": alloc.quantum_cost, "config": args.out})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args):
    cfg = get_preset(args.preset)
    d = cfg.d_model
    r = args.r or d // 8
    L = args.seq_len or cfg.max_seq_len
    if L <= 0 or args.repeats <= 0:
        raise UsageError("--seq-len and --repeats must be positive")
    rows = []
    for label, rank in (("dense", None), (f"lpa-r{r}", r)):
        if args.scope == "attention":
            rng = np.random.default_rng(0)
            factored = ("Q", "K", "V", "O") if rank else ()
            target = AttentionLayer.init(d, cfg.head_count, rng, r=rank, factored=factored, d_a=cfg.d_a,
                                         dtype=np.dtype(cfg.precision).type)
        else:
            mcfg = cfg.with_placement("attn", rank) if rank else cfg
            target = build_model(mcfg.replace(max_seq_len=max(L, cfg.max_seq_len)), 0)
        res = training.bench_eval(target, L, repeats=args.repeats)
        layers = 1 if args.scope == "attention" else cfg.layer_count
        expected = layers * accounting.count_attention_macs(d, cfg.d_a, rank, L)
        counted = res["attention_proj_flops"] + res["attention_core_flops"]
        rows.append({"variant": label, "seq_len": L, **res, "attention_macs_expected": expected,
                     "attention_macs_match": counted == expected})
    for row in rows:
        _emit(row)
    dense, lpa = rows
    _emit({
        "proj_flop_ratio": lpa["attention_proj_flops"] / dense["attention_proj_flops"],
        "formula_ratio": r * (d + cfg.d_a) / (d * cfg.d_a),
        "wall_ratio": lpa["median_ms"] / dense["median_ms"],
    })
    return EXIT_OK


def cmd_corpus(args):
    data = training.synthetic_corpus(args.bytes, args.seed)
    with open(args.out, "wb") as fh:
        fh.write(data)
    _emit({"path": args.out, "bytes": len(data), "seed": args.seed})
    return EXIT_OK


# parser ---------------------------------------------------------------------


def _add_source(p, required=False):
    g = p.add_mutually_exclusive_group(required=required)
    g.add_argument("--config", help="experiment config file")
    g.add_argument("--preset", help="built-in preset name")


def build_parser():
    parser = argparse.ArgumentParser(prog="lpa", description="Low-rank projected attention lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count", help="parameter and attention-FLOP accounting")
    _add_source(p, required=True)
    p.add_argument("--format", choices=("table", "records"), default="table")
    p.add_argument("--seq-len", type=int, default=None)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("flops", help="closed-form attention FLOPs")
    p.add_argument("--preset")
    p.add_argument("--d-in", type=int)
    p.add_argument("--d-out", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--seq-len", type=int, required=True)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("train", help="train one model")
    _add_source(p, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--no-timing", action="store_true", help="write wall_ms_per_step=0 for byte-identical metrics")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "valid", "test", "all"), default="test")
    p.add_argument("--seq-len", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("seeds", help="multi-seed train and evaluate, mean±std")
    _add_source(p, required=True)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--steps", type=int)
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--no-timing", action="store_true")
    p.set_defaults(func=cmd_seeds)

    p = sub.add_parser("verify", help="run property suites")
    p.add_argument("--suite", choices=verify.SUITES + ("all",), default="all")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("allocate", help="spend saved parameters on one dimension")
    _add_source(p, required=True)
    p.add_argument("--target-params", required=True)
    p.add_argument("--strategy", choices=accounting.STRATEGIES, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("bench", help="dense vs factored attention timing and counted FLOPs")
    p.add_argument("--preset", default="bench-d512")
    p.add_argument("--seq-len", type=int)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--r", type=int)
    p.add_argument("--scope", choices=("attention", "model"), default="attention")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("corpus", help="write a deterministic synthetic text corpus")
    p.add_argument("--bytes", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corpus)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    limiter = training._set_threads()
    try:
        return args.func(args)
    except (UsageError, ConfigError, training.DataError, CheckpointError) as exc:
        print(f"lpa {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except training.TrainingError as exc:
        print(f"lpa {args.command}: training failed at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())

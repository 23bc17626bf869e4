"""``hadamix`` command line: train, generate, bench, analyze, selftest, export.

Failures print one line ``hadamix: error[<category>]: <message>`` on stderr
and exit with the category's code (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

EXIT_CODES = {
    "ok": 0,
    "check": 1,
    "usage": 2,
    "io": 3,
    "config": 4,
    "budget": 5,
    "numeric": 6,
}
OUT_ENV = "HADAMIX_OUT"


class CliError(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError("usage", message)


def _out_dir(value, default):
    return Path(value or os.environ.get(OUT_ENV) or default)


def _write_manifest(out_dir, args, **extra):
    out_dir.mkdir(parents=True, exist_ok=True)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    manifest = {"version": __version__, "argv": resolved, **extra}
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)


def _threads(args):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=args.threads)


# ---------------------------------------------------------------------------
# train / generate
# ---------------------------------------------------------------------------

def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as f:
            data = json.load(f)
    except OSError as e:
        raise CliError("io", f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise CliError("config", f"{path}: invalid JSON ({e})") from None
    unknown = set(data) - {"model", "train"}
    if unknown:
        raise CliError("config", f"{path}: unknown top-level keys {sorted(unknown)}; expected 'model' and 'train'")
    return data


def cmd_train(args):
    from .model import ModelConfig
    from .train import TrainConfig, train_loop

    data = _load_config(args.config)
    try:
        model_kw = dict(data.get("model", {}))
        train_kw = dict(data.get("train", {}))
        if args.variant:
            model_kw["variant"] = args.variant
        if args.seed is not None:
            train_kw["seed"] = args.seed
        if args.steps is not None:
            train_kw["total_steps"] = args.steps
            if train_kw.get("warmup_steps", 0) >= max(args.steps, 1):
                del train_kw["warmup_steps"]
        model_cfg = ModelConfig.from_dict(model_kw)
        train_cfg = TrainConfig.from_dict(train_kw)
    except (TypeError, ValueError) as e:
        raise CliError("config", str(e)) from None
    if not Path(args.data).is_file():
        raise CliError("io", f"dataset not readable: {args.data}")
    out = _out_dir(args.out, "runs/train")
    try:
        with _threads(args):
            result = train_loop(model_cfg, train_cfg, args.data, out_dir=out, resume=args.resume,
                                extra_manifest={"threads": args.threads, "data": str(args.data)})
    except FloatingPointError as e:
        raise CliError("numeric", str(e)) from None
    except ValueError as e:
        raise CliError("config", str(e)) from None
    last = result.history[-1] if result.history else None
    print(f"steps={result.state.step} initial_val_loss={result.state.initial_val_loss:.4f} "
          f"final_train_loss={last['train_loss'] if last else float('nan'):.4f} params={result.model.num_params()} out={out}")
    return 0


def cmd_generate(args):
    import numpy as np

    from .model import load_model

    try:
        model, _, _ = load_model(args.checkpoint)
    except OSError as e:
        raise CliError("io", f"cannot read checkpoint {args.checkpoint}: {e.strerror}") from None
    except (ValueError, KeyError) as e:
        raise CliError("config", str(e)) from None
    prompt = np.frombuffer(args.prompt.encode(), dtype=np.uint8).astype(np.int64)
    try:
        out = model.generate(prompt, args.n_new, temperature=args.temperature, seed=args.seed)
    except ValueError as e:
        raise CliError("config", str(e)) from None
    sys.stdout.write(bytes(out.astype(np.uint8)).decode("utf-8", errors="replace") + "\n")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args):
    from .bench import BenchConfig, BudgetExceeded, bench_decode, bench_prefill, microbench_projection, paired, write_reports
    from .model import ModelConfig

    if args.phase == "projection":
        t = microbench_projection(args.d, batch=args.batch, iters=args.iters, seed=args.seed, threads=args.threads)
        print(f"d={t.d} batch={t.batch} naive_dense_ms={t.naive_dense_ms:.3f} blas_dense_ms={t.blas_dense_ms:.3f} "
              f"hadamard_ms={t.hadamard_ms:.3f} wall_ratio={t.wall_ratio:.2f} blas_wall_ratio={t.blas_wall_ratio:.2f} "
              f"op_ratio={t.op_ratio:.6g}")
        return 0
    try:
        ctx = args.len + (1 if args.phase == "decode" else 0)
        model_cfg = ModelConfig(n_layers=args.layers, d_model=args.d, n_heads=args.heads, vocab_size=args.vocab,
                                context_length=ctx, variant="dense")
        cfg = BenchConfig(phase=args.phase, model_cfg=model_cfg, batch=args.batch, length=args.len,
                          warmup_iters=args.warmup, iters_per_run=args.iters, runs=args.runs, seed=args.seed,
                          threads=args.threads, memory_budget=args.memory_budget)
    except ValueError as e:
        raise CliError("config", str(e)) from None
    variants = ("dense", "hadamard") if args.variant == "both" else (args.variant,)
    fn = bench_prefill if args.phase == "prefill" else bench_decode
    try:
        reports = paired(fn, cfg, variants)
    except BudgetExceeded as e:
        raise CliError("budget", str(e)) from None
    except ValueError as e:
        raise CliError("config", str(e)) from None
    for r in reports:
        row = r.row()
        print(f"{row['size']:>10} {row['variant']:>9} lat {row['lat_mean']:.4f}+-{row['lat_std']:.4f} ms/tok  "
              f"tps {row['tps_mean']:.1f}+-{row['tps_std']:.1f}  mem {row['mem_bytes']} B")
    if args.out:
        path = Path(args.out)
        if not path.is_absolute() and os.environ.get(OUT_ENV):
            path = Path(os.environ[OUT_ENV]) / path
        write_reports(reports, path)
        _write_manifest(path.parent, args)
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

def _print_table(rows, columns):
    widths = [max(len(c), *(len(str(r[c])) for r in rows)) for c in columns]
    print("  ".join(c.rjust(w) for c, w in zip(columns, widths)))
    for r in rows:
        print("  ".join(str(r[c]).rjust(w) for c, w in zip(columns, widths)))


def cmd_analyze(args):
    from .analysis import attention_reduction_fraction, compare_params, reference_config, reference_sizes, projection_flops

    if args.what == "flops":
        try:
            f = projection_flops(args.d)
        except ValueError as e:
            raise CliError("config", str(e)) from None
        rows = [{"d": f.d, "dense": f.dense, "fwht": f"{f.fwht:.1f}" if f.fwht != int(f.fwht) else int(f.fwht),
                 "fwht_executed": f.fwht_executed, "speedup": f"{f.speedup:.2f}", "op_ratio": f"{f.op_ratio:.6g}"}]
        _print_table(rows, list(rows[0]))
        payload = {"d": f.d, "dense": f.dense, "fwht": f.fwht, "fwht_executed": f.fwht_executed,
                   "speedup": f.speedup, "op_ratio": f.op_ratio}
    else:
        if args.reference_sizes:
            rows = reference_sizes(args.vocab)
            table = [dict(size=r["size"], layers=r["n_layers"], d=r["d_model"], baseline=f"{r['baseline']:,}",
                          hadamard=f"{r['hadamard']:,}", delta=f"{r['delta']:,}",
                          rel=f"-{100 * r['relative_delta']:.2f}%") for r in rows]
            _print_table(table, list(table[0]))
            payload = rows
        else:
            payload = None
        try:
            cmp = compare_params(reference_config(args.layers, args.d, args.heads or max(1, args.d // 64), args.vocab))
        except ValueError as e:
            raise CliError("config", str(e)) from None
        frac = attention_reduction_fraction(args.d)
        print(f"d={args.d} layers={args.layers} vocab={args.vocab}")
        print(f"  baseline params  {cmp.baseline.total:,}")
        print(f"  hadamard params  {cmp.hadamard.total:,}")
        print(f"  delta            {cmp.delta:,} ({100 * cmp.relative_delta:.2f}%)")
        print(f"  attention reduction: bias-free baseline {frac['no_bias']} = {float(frac['no_bias']):.6f}; "
              f"with dense bias {frac['with_bias']} = {float(frac['with_bias']):.6f}")
        print("  reported deltas use the dense-bias convention (d^2 - d per block)")
        single = {"baseline": cmp.baseline.as_dict(), "hadamard": cmp.hadamard.as_dict(), "delta": cmp.delta,
                  "relative_delta": cmp.relative_delta, "reduction_no_bias": str(frac["no_bias"]),
                  "reduction_with_bias": str(frac["with_bias"])}
        payload = {"config": single, "reference_sizes": payload} if payload else single
    if args.json:
        with open(args.json, "w") as f:
            json.dump(payload, f, indent=2)
    return 0


# ---------------------------------------------------------------------------
# selftest / export
# ---------------------------------------------------------------------------

def cmd_selftest(args):
    from .checks import gradient_suite, wht_suite

    wht = wht_suite(args.max_order)
    for d, ok, oracle, rt, ops_ok in wht:
        print(f"wht d={d:<5} {'PASS' if ok else 'FAIL'} oracle={oracle:.2e} roundtrip={rt:.2e} opcount={'ok' if ops_ok else 'bad'}")
    grads = gradient_suite(seeds=range(args.seeds))
    for label, ok, err in grads:
        print(f"grad {label:<28} {'PASS' if ok else 'FAIL'} max_rel_err={err:.2e}")
    n_wht = sum(r[1] for r in wht)
    n_grad = sum(r[1] for r in grads)
    print(f"suite wht: {n_wht}/{len(wht)} passed")
    print(f"suite gradients: {n_grad}/{len(grads)} passed")
    return 0 if n_wht == len(wht) and n_grad == len(grads) else EXIT_CODES["check"]


def cmd_export(args):
    from .analysis import projection_flops

    out = _out_dir(args.out, "plots")
    out.mkdir(parents=True, exist_ok=True)
    if args.what == "flops":
        path = out / "projection_flops.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["d", "dense", "fwht", "fwht_executed", "speedup"])
            for d in args.d:
                p = projection_flops(d)
                w.writerow([d, p.dense, repr(p.fwht), p.fwht_executed, repr(p.speedup)])
    else:
        path = out / "loss_curves.csv"
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["run", "step", "cumulative_flops", "train_loss", "val_loss"])
            for log in args.logs:
                try:
                    with open(log, newline="") as g:
                        for r in csv.DictReader(g):
                            w.writerow([Path(log).parent.name, r["step"], r["cumulative_flops"], r["train_loss"], r["val_loss"]])
                except OSError as e:
                    raise CliError("io", f"cannot read log {log}: {e.strerror}") from None
    _write_manifest(out, args)
    print(path)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="hadamix", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model on a byte corpus")
    t.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    t.add_argument("--variant", choices=["dense", "hadamard"])
    t.add_argument("--data", required=True, help="training corpus (raw bytes)")
    t.add_argument("--out", help=f"output directory (default ${OUT_ENV} or runs/train)")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override train.total_steps")
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="sample from a checkpoint")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prompt", required=True)
    g.add_argument("--n-new", type=int, default=64)
    g.add_argument("--temperature", type=float, default=None, help="omit for greedy decoding")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="prefill/decode benchmarks and the projection microbenchmark")
    b.add_argument("phase", choices=["prefill", "decode", "projection"])
    b.add_argument("--d", type=int, default=256)
    b.add_argument("--layers", type=int, default=2)
    b.add_argument("--heads", type=int, default=4)
    b.add_argument("--vocab", type=int, default=256)
    b.add_argument("--batch", type=int, default=8)
    b.add_argument("--len", type=int, default=64)
    b.add_argument("--runs", type=int, default=3)
    b.add_argument("--iters", type=int, default=50)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--variant", choices=["both", "dense", "hadamard"], default="both")
    b.add_argument("--memory-budget", type=int, default=None, help="bytes; refuse configs estimated above it")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--out", help="report path (.csv or .json)")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("analyze", help="parameter and FLOP accounting")
    a.add_argument("what", choices=["params", "flops"])
    a.add_argument("--d", type=int, required=True)
    a.add_argument("--layers", type=int, default=12)
    a.add_argument("--heads", type=int, default=None)
    a.add_argument("--vocab", type=int, default=50257)
    a.add_argument("--reference-sizes", action="store_true", help="also print the four reference model sizes")
    a.add_argument("--json", help="write the numbers to this JSON file")
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("selftest", help="FWHT oracle/orthogonality and gradient checks")
    s.add_argument("--max-order", type=int, default=4096)
    s.add_argument("--seeds", type=int, default=3)
    s.set_defaults(func=cmd_selftest)

    e = sub.add_parser("export", help="CSV data for plots")
    e.add_argument("what", choices=["flops", "loss"])
    e.add_argument("--d", type=int, nargs="+", default=[64, 256, 768, 1024])
    e.add_argument("--logs", nargs="+", default=[], help="train_log.csv files (for 'loss')")
    e.add_argument("--out", help=f"output directory (default ${OUT_ENV} or plots)")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None):
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except CliError as e:
        print(f"hadamix: error[{e.category}]: {e}", file=sys.stderr)
        return EXIT_CODES[e.category]
    except OSError as e:
        print(f"hadamix: error[io]: {e}", file=sys.stderr)
        return EXIT_CODES["io"]


if __name__ == "__main__":
    sys.exit(main())

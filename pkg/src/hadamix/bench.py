"""Prefill/decode benchmark harness and the projection microbenchmark.

Protocol: ``warmup_iters`` untimed iterations, then ``runs`` runs of
``iters_per_run`` timed iterations. Each run contributes one mean; the report
gives the mean and sample std (n-1) across runs. Memory is deterministic
byte accounting (weights, KV cache, transient activations), not an allocator
reading.

Latency is milliseconds per token position: wall time of one iteration
divided by the sequence positions it covers, with the whole batch processed
at each position. Throughput is tokens per second over the batch, so
``throughput * latency == 1000 * batch`` holds per run.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .analysis import count_params
from .attention import dense_mix_forward, hadamard_mix_forward
from .model import ModelConfig, TransformerModel
from .wht import HadamardSpec

CSV_COLUMNS = ("size", "phase", "variant", "batch", "length", "lat_mean", "lat_std", "tps_mean", "tps_std",
               "mem_bytes", "weight_bytes", "kv_bytes", "mix_ops_per_token",
               "delta_lat", "delta_tps", "delta_mem", "delta_weight_bytes")


class BudgetExceeded(RuntimeError):
    def __init__(self, component, needed, budget):
        self.component = component
        self.needed = needed
        self.budget = budget
        super().__init__(f"memory budget exceeded by {component}: needs {needed} bytes, budget {budget} bytes")


@dataclass
class BenchConfig:
    phase: str
    model_cfg: ModelConfig
    batch: int = 1
    length: int = 64
    warmup_iters: int = 5
    iters_per_run: int = 50
    runs: int = 3
    seed: int = 0
    threads: int = 1
    memory_budget: int | None = None
    size: str = ""

    def __post_init__(self):
        if self.phase not in ("prefill", "decode"):
            raise ValueError(f"phase must be 'prefill' or 'decode', got {self.phase!r}")
        if self.runs < 2:
            raise ValueError("runs must be >= 2 so the std is defined")
        if self.iters_per_run < 1 or self.batch < 1 or self.length < 1 or self.warmup_iters < 0:
            raise ValueError("iters_per_run, batch and length must be >= 1")
        # decode seeds the cache with a 1-token prompt
        needed = self.length + (1 if self.phase == "decode" else 0)
        if needed > self.model_cfg.context_length:
            raise ValueError(f"{needed} positions exceed context_length {self.model_cfg.context_length}")


@dataclass
class BenchReport:
    size: str
    phase: str
    variant: str
    batch: int
    length: int
    threads: int
    latency_ms_per_token: dict
    throughput_tokens_per_s: dict
    memory_bytes: dict
    run_wall_ms: list
    mix_ops_per_token: dict = field(default_factory=dict)
    deltas: dict = field(default_factory=dict)

    def row(self):
        return {
            "size": self.size, "phase": self.phase, "variant": self.variant,
            "batch": self.batch, "length": self.length,
            "lat_mean": self.latency_ms_per_token["mean"], "lat_std": self.latency_ms_per_token["std"],
            "tps_mean": self.throughput_tokens_per_s["mean"], "tps_std": self.throughput_tokens_per_s["std"],
            "mem_bytes": self.memory_bytes["peak_estimate"], "weight_bytes": self.memory_bytes["weights"],
            "kv_bytes": self.memory_bytes["kv_cache"],
            "mix_ops_per_token": json.dumps(self.mix_ops_per_token, sort_keys=True),
            "delta_lat": self.deltas.get("lat_mean", ""), "delta_tps": self.deltas.get("tps_mean", ""),
            "delta_mem": self.deltas.get("mem_bytes", ""), "delta_weight_bytes": self.deltas.get("weight_bytes", ""),
        }


# ---------------------------------------------------------------------------
# memory accounting
# ---------------------------------------------------------------------------

def kv_cache_bytes(cfg, batch, positions, bytes_per=4):
    return 2 * cfg.n_layers * positions * cfg.d_model * batch * bytes_per


def activation_bytes(cfg, batch, T, S, bytes_per=4):
    """Peak transient activations of one forward over ``T`` new positions
    attending to ``S`` keys: the widest layer's live buffers plus logits."""
    d, h = cfg.d_model, cfg.mlp_hidden
    attn = batch * T * 6 * d + 2 * batch * cfg.n_heads * T * S
    mlp = batch * T * (2 * d + 3 * h)
    logits = batch * T * cfg.vocab_size
    return bytes_per * (max(attn, mlp) + logits)


def memory_estimate(cfg, phase, batch, length):
    weights = 4 * count_params(cfg).total
    if phase == "prefill":
        kv = kv_cache_bytes(cfg, batch, length)
        act = activation_bytes(cfg, batch, length, length)
    else:
        kv = kv_cache_bytes(cfg, batch, length + 1)
        act = max(activation_bytes(cfg, batch, 1, length + 1), activation_bytes(cfg, batch, 1, 1))
    return {"weights": weights, "kv_cache": kv, "activations": act, "peak_estimate": weights + kv + act}


def check_budget(mem, budget):
    if budget is None:
        return
    total = 0
    for component in ("weights", "kv_cache", "activations"):
        total += mem[component]
        if total > budget:
            raise BudgetExceeded(component, total, budget)


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def _stats(values):
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0}


def _limit_threads(n):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _run_protocol(cfg, body):
    """Warm up, then collect per-run mean wall ms of ``body()``."""
    for _ in range(cfg.warmup_iters):
        body()
    run_means = []
    for _ in range(cfg.runs):
        walls = []
        for _ in range(cfg.iters_per_run):
            walls.append(body())
        run_means.append(float(np.mean(walls)))
    return run_means


def _report(cfg, run_means, mem, ops):
    lat = [w / cfg.length for w in run_means]
    tps = _stats([cfg.batch * cfg.length * 1000.0 / w for w in run_means])
    # aggregate throughput: all tokens over all wall time, not a mean of rates
    tps["mean"] = cfg.batch * cfg.length * 1000.0 / float(np.mean(run_means))
    return BenchReport(size=cfg.size or f"d{cfg.model_cfg.d_model}L{cfg.model_cfg.n_layers}",
                       phase=cfg.phase, variant=cfg.model_cfg.variant.value, batch=cfg.batch, length=cfg.length,
                       threads=cfg.threads, latency_ms_per_token=_stats(lat), throughput_tokens_per_s=tps,
                       memory_bytes=mem, run_wall_ms=run_means, mix_ops_per_token=ops)


def _mix_ops(counter, tokens):
    keys = ("mix_mac", "fwht_addsub")
    return {k: counter[k] / tokens for k in keys if counter[k]}


def bench_prefill(cfg):
    """Time full-sequence forward passes over ``batch x length`` tokens."""
    mem = memory_estimate(cfg.model_cfg, "prefill", cfg.batch, cfg.length)
    check_budget(mem, cfg.memory_budget)
    model = TransformerModel(cfg.model_cfg, seed=cfg.seed)
    tokens = np.random.default_rng(cfg.seed).integers(0, cfg.model_cfg.vocab_size, (cfg.batch, cfg.length))

    def body():
        t0 = time.perf_counter()
        model.forward(tokens)
        return (time.perf_counter() - t0) * 1000.0

    with _limit_threads(cfg.threads):
        run_means = _run_protocol(cfg, body)
        with nx.count_ops() as counter:
            model.forward(tokens)
    return _report(cfg, run_means, mem, _mix_ops(counter, cfg.batch * cfg.length * cfg.model_cfg.n_layers))


def bench_decode(cfg):
    """Time ``length`` cached single-token steps after a 1-token prompt."""
    mem = memory_estimate(cfg.model_cfg, "decode", cfg.batch, cfg.length)
    check_budget(mem, cfg.memory_budget)
    model = TransformerModel(cfg.model_cfg, seed=cfg.seed)
    prompt = np.random.default_rng(cfg.seed).integers(0, cfg.model_cfg.vocab_size, (cfg.batch, 1))
    capacity = cfg.length + 1

    def body():
        cache = model.new_cache(cfg.batch, capacity)
        nxt = np.argmax(model.forward(prompt, cache)[:, -1], axis=-1)[:, None]
        t0 = time.perf_counter()
        for _ in range(cfg.length):
            nxt = np.argmax(model.forward(nxt, cache)[:, -1], axis=-1)[:, None]
        return (time.perf_counter() - t0) * 1000.0

    with _limit_threads(cfg.threads):
        run_means = _run_protocol(cfg, body)
        cache = model.new_cache(cfg.batch, 2)
        model.forward(prompt, cache)
        with nx.count_ops() as counter:
            model.forward(prompt, cache)
    return _report(cfg, run_means, mem, _mix_ops(counter, cfg.batch * cfg.model_cfg.n_layers))


def paired(bench_fn, cfg, variants=("dense", "hadamard")):
    """Run ``bench_fn`` for each variant on identical settings.

    The Hadamard report carries ``deltas`` = hadamard - dense.
    """
    reports = {}
    for v in variants:
        sub = BenchConfig(**{**asdict_shallow(cfg), "model_cfg": cfg.model_cfg.with_variant(v)})
        reports[v] = bench_fn(sub)
    if "dense" in reports and "hadamard" in reports:
        base, had = reports["dense"].row(), reports["hadamard"].row()
        reports["hadamard"].deltas = {k: had[k] - base[k] for k in ("lat_mean", "tps_mean", "mem_bytes", "weight_bytes")}
    return [reports[v] for v in variants]


def asdict_shallow(obj):
    return {k: getattr(obj, k) for k in obj.__dataclass_fields__}


def write_reports(reports, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".json":
        with open(path, "w") as f:
            json.dump([asdict(r) for r in reports], f, indent=2)
        return path
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    return path


# ---------------------------------------------------------------------------
# projection microbenchmark
# ---------------------------------------------------------------------------

@dataclass
class ProjectionTiming:
    d: int
    batch: int
    iters: int
    naive_dense_ms: float
    blas_dense_ms: float
    hadamard_ms: float
    dense_ops: int
    hadamard_ops: int

    @property
    def op_ratio(self):
        return self.dense_ops / self.hadamard_ops

    @property
    def wall_ratio(self):
        """Naive dense time over Hadamard mix time."""
        return self.naive_dense_ms / self.hadamard_ms

    @property
    def blas_wall_ratio(self):
        return self.blas_dense_ms / self.hadamard_ms


def _best_ms(fn, iters):
    best = np.inf
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        best = min(best, (time.perf_counter() - t0) * 1000.0)
    return best


def microbench_projection(d, batch=64, iters=5, seed=0, threads=1):
    """Time the dense projection (own naive kernel and BLAS) vs the Hadamard mix.

    Op counts are per token: ``d**2`` MACs vs the transform's add/subs.
    The fastest of ``iters`` repetitions is reported for each path.
    """
    spec = HadamardSpec.for_order(d)
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((batch, d)).astype(nx.DTYPE)
    W = (rng.standard_normal((d, d)) * 0.02).astype(nx.DTYPE)
    alpha = np.ones(d, nx.DTYPE)
    beta = np.zeros(d, nx.DTYPE)
    nx.naive_matmul(Y[:1, :2], W[:2, :2])  # compile outside the timed region
    with _limit_threads(threads):
        naive = _best_ms(lambda: nx.naive_matmul(Y, W), iters)
        blas = _best_ms(lambda: dense_mix_forward(Y, W, beta), iters)
        had = _best_ms(lambda: hadamard_mix_forward(Y, alpha, beta, spec), iters)
    return ProjectionTiming(d=d, batch=batch, iters=iters, naive_dense_ms=naive, blas_dense_ms=blas,
                            hadamard_ms=had, dense_ops=d * d, hadamard_ops=spec.addsub_count())

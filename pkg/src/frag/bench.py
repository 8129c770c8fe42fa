"""Benchmark suites that reproduce the shape of the evaluation figures as CSV.

Every row is a distribution of wall-clock samples (median, p10, p90) taken
after warm-up calls; absolute numbers are machine-specific, only the
ordering, ratio and trend claims are meant to be compared.
"""

from __future__ import annotations

import csv
import gc
import heapq
import io
import os
import platform
import resource
import time
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np

from frag.cache import (CacheConfig, build_pivots, cache_add, cache_enc, cache_enc_many, cache_mul_plain)
from frag.errors import ErrorCode, FragError
from frag.he.cipher import PublicKey, SecretKey, decrypt_many, encrypt, encrypt_many, make_ct
from frag.sharing import merge, split, verify
from frag.vecdb import dot_data, ingest, prepare_query, scan

HEADER = ("suite", "series", "axis", "axis_value", "median", "p10", "p90", "unit", "ops", "samples",
          "rss_kb", "stamp")
MIN_SAMPLES = 5
MIN_WARMUP = 3


@dataclass
class Row:
    series: str
    axis_value: float
    samples: list[float]
    ops: int = 1
    unit: str = "s"
    rss_kb: int = 0

    @property
    def median(self) -> float:
        return float(np.median(self.samples))

    @property
    def p10(self) -> float:
        return float(np.percentile(self.samples, 10))

    @property
    def p90(self) -> float:
        return float(np.percentile(self.samples, 90))


@dataclass
class BenchReport:
    name: str
    axis: str
    stamp: dict
    rows: list[Row] = field(default_factory=list)
    extra: dict = field(default_factory=dict)  # suite-specific results not in the CSV

    def add(self, series: str, axis_value, samples, ops: int = 1, unit: str = "s") -> Row:
        if len(samples) < MIN_SAMPLES and unit == "s":
            raise FragError(ErrorCode.CONTRACT_VIOLATION, f"{series}: {len(samples)} samples < {MIN_SAMPLES}")
        row = Row(series, axis_value, list(samples), ops, unit, _rss_kb())
        self.rows.append(row)
        return row

    def series(self, name: str) -> list[Row]:
        return [r for r in self.rows if r.series == name]

    def median(self, series: str, axis_value=None) -> float:
        rows = [r for r in self.series(series) if axis_value is None or r.axis_value == axis_value]
        return rows[0].median

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        stamp = ";".join(f"{k}={v}" for k, v in self.stamp.items())
        for r in self.rows:
            w.writerow([self.name, r.series, self.axis, r.axis_value, f"{r.median:.9g}", f"{r.p10:.9g}",
                        f"{r.p90:.9g}", r.unit, r.ops, len(r.samples), r.rss_kb, stamp])
        return buf.getvalue()

    def write(self, path) -> None:
        try:
            with open(path, "w", encoding="utf-8", newline="") as f:
                f.write(self.csv())
        except OSError as e:
            raise FragError(ErrorCode.IO_ERROR, str(e)) from e


def _rss_kb() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss


def env_stamp(pk: PublicKey, seed: int) -> dict:
    p = pk.params
    return {
        "params": pk.params_id.hex()[:16], "N": p.ring_degree, "primes": len(p.moduli),
        "scale_bits": p.scale_bits, "seed": seed, "python": platform.python_version(),
        "numpy": np.__version__, "numba": numba.__version__, "machine": platform.machine(),
        "system": platform.system(), "cores": os.cpu_count(),
    }


def timed(fn: Callable[[], object], reps: int, warmup: int = MIN_WARMUP,
          between: Callable[[], object] | None = None) -> list[float]:
    """Per-call wall times; ``between`` runs untimed before every call.

    The garbage collector is paused while measuring, as ``timeit`` does.
    """
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        return _timed(fn, reps, warmup, between)
    finally:
        if gc_was_enabled:
            gc.enable()


def _timed(fn, reps, warmup, between) -> list[float]:
    for _ in range(warmup):
        if between:
            between()
        fn()
    out = []
    for _ in range(reps):
        if between:
            between()
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


# ---------------------------------------------------------------------------
# suites


def bench_primitives(pk: PublicKey, seed: int = 0, dims=(64, 256, 768), reps: int = MIN_SAMPLES,
                     parties: int = 3, **_) -> BenchReport:
    rep = BenchReport("primitives", "m", env_stamp(pk, seed))
    rng = np.random.default_rng(seed)
    for m in dims:
        cts = [make_ct(d, 1, pk.params_id) for d in encrypt_many(rng.uniform(-1, 1, m), pk, rng)]
        shares = [split(ct, parties, rng) for ct in cts]
        rep.add("split", m, timed(lambda: [split(ct, parties, rng) for ct in cts], reps), ops=m)
        rep.add("merge", m, timed(lambda: [merge(s) for s in shares], reps), ops=m)
        rep.add("verify", m, timed(lambda: [verify(x, x.commitment) for s in shares for x in s], reps),
                ops=m * parties)
    return rep


def mc_inputs(rng: np.random.Generator, reps: int, max_magnitude: float) -> tuple[np.ndarray, np.ndarray]:
    """Draws in [1, 20000] mapped onto the representable grid, plus plaintext factors in (0, 1]."""
    u = rng.uniform(1.0, 20000.0, reps)
    return u / 20000.0 * max_magnitude, u / 20000.0


def bench_mc(pk: PublicKey, seed: int = 0, reps: int = 1000, cfg: CacheConfig | None = None, **_) -> BenchReport:
    rep = BenchReport("mc", "op", env_stamp(pk, seed))
    rng = np.random.default_rng(seed)
    cfg = cfg or CacheConfig(zero_pool_size=reps + 2 * MIN_WARMUP, capacity=1 << 20)
    cache = build_pivots(pk, cfg, auto_refill=False, rng=rng)
    xs, ps = mc_inputs(rng, reps, cfg.max_magnitude)

    def per_call(fn, args):
        it = iter(args)
        return timed(lambda: fn(next(it)), reps, MIN_WARMUP)

    def cycle(a):
        return np.concatenate([a[:MIN_WARMUP], a])

    cache.refill(reps + MIN_WARMUP)
    rep.add("cache_enc", 0, per_call(lambda x: cache_enc(x, cache), cycle(xs)))
    a, b = cache_enc(xs[0], cache), cache_enc(xs[1], cache)
    rep.add("cache_add", 1, timed(lambda: cache_add(a, b), reps))
    rep.add("cache_mul_plain", 2, per_call(lambda p: cache_mul_plain(p, a), cycle(ps)))
    rep.add("encrypt", 3, per_call(lambda x: encrypt(x, pk, rng), cycle(xs)))
    return rep


def bench_pivots(pk: PublicKey, seed: int = 0, pivot_counts=(4, 8, 16, 32, 64), reps: int = 300,
                 frac_bits: int = 10, **_) -> BenchReport:
    rep = BenchReport("pivots", "pivot_count", env_stamp(pk, seed))
    u = np.random.default_rng(seed).random(reps + MIN_WARMUP)
    for p in pivot_counts:
        cfg = CacheConfig(pivot_count=p, frac_bits=frac_bits, zero_pool_size=reps + MIN_WARMUP, capacity=1 << 20)
        cache = build_pivots(pk, cfg, auto_refill=False, rng=np.random.default_rng([seed, p]))
        it = iter(u * cfg.max_magnitude)
        rep.add("cache_enc", p, timed(lambda: cache_enc(next(it), cache), reps))
    return rep


def bench_weak(pk: PublicKey, seed: int = 0, batches=(40, 80, 120), reps: int = 25, **_) -> BenchReport:
    rep = BenchReport("weak", "batch", env_stamp(pk, seed))
    cfg = CacheConfig(zero_pool_size=max(batches), capacity=1 << 20)
    rng = np.random.default_rng(seed)
    cache = build_pivots(pk, cfg, auto_refill=False, rng=rng)
    xs, _ = mc_inputs(rng, max(batches), cfg.max_magnitude)
    for b in batches:
        batch = xs[:b]
        times = timed(lambda: [cache_enc(x, cache) for x in batch], reps, between=lambda: cache.refill(b))
        rep.add("cache_enc_per_message", b, [t / b for t in times], ops=b)
    return rep


@dataclass
class PipelineRun:
    seconds: float
    refill_seconds: float
    top: list[tuple[int, float]]


def run_pipeline(pk: PublicKey, sk: SecretKey, query: np.ndarray, records: int, dim: int, seed: int,
                 cache=None, chunk: int = 50, k: int = 10) -> PipelineRun:
    """Encrypt a synthetic corpus chunk by chunk, score it against one query, decrypt, keep top-k.

    With a cache, the zero pool is refilled between chunks outside the timed
    region (it is background work in a deployment); that time is reported
    separately.
    """
    elapsed = refill = 0.0
    t0 = time.perf_counter()
    q = prepare_query([make_ct(d, 1, pk.params_id) for d in encrypt_many(query, pk)])
    elapsed += time.perf_counter() - t0
    top: list[tuple[float, int]] = []
    for start in range(0, records, chunk):
        rows = min(chunk, records - start)
        plain = np.random.default_rng([seed, start]).uniform(-1, 1, (rows, dim))
        if cache is not None:
            t0 = time.perf_counter()
            cache.refill(rows * dim)
            refill += time.perf_counter() - t0
        t0 = time.perf_counter()
        if cache is None:
            data = encrypt_many(plain.ravel(), pk)
        else:
            data = cache_enc_many(plain.ravel(), cache)
        data = data.reshape(rows, dim, *data.shape[1:])
        scores = [make_ct(dot_data(data[i], q), 2, pk.params_id) for i in range(rows)]
        for rid, v in zip(range(start, start + rows), decrypt_many(scores, sk)):
            item = (v, -rid)
            if len(top) < k:
                heapq.heappush(top, item)
            elif item > top[0]:
                heapq.heapreplace(top, item)
        elapsed += time.perf_counter() - t0
        del data, scores
    ranked = sorted(((-r, v) for v, r in top), key=lambda t: (-t[1], t[0]))
    return PipelineRun(elapsed, refill, ranked)


def bench_speedup(pk: PublicKey, sk: SecretKey | None = None, seed: int = 0, records: int = 10000, dim: int = 64,
                  reps: int = MIN_SAMPLES, chunk: int = 50, warm_records: int = 20,
                  cfg: CacheConfig | None = None, **_) -> BenchReport:
    if sk is None:
        raise FragError(ErrorCode.INVALID_CONFIG, "speedup suite decrypts scores and needs the secret key")
    rep = BenchReport("speedup", "records", env_stamp(pk, seed))
    rep.stamp.update(dim=dim, chunk=chunk)
    cfg = cfg or CacheConfig(pivot_count=20, frac_bits=18, zero_pool_size=chunk * dim, capacity=1 << 20)
    rep.stamp.update(pivots=cfg.pivot_count, frac_bits=cfg.frac_bits)
    cache = build_pivots(pk, cfg, auto_refill=False, rng=np.random.default_rng([seed, 1]))
    query = np.random.default_rng([seed, 2]).uniform(-1, 1, dim)
    for _ in range(MIN_WARMUP):
        run_pipeline(pk, sk, query, warm_records, dim, seed, None, chunk)
        run_pipeline(pk, sk, query, warm_records, dim, seed, cache, chunk)
    plain, cached = [], []
    for _ in range(reps):
        # interleaved so slow drift in machine state hits both arms alike
        plain.append(run_pipeline(pk, sk, query, records, dim, seed, None, chunk))
        cached.append(run_pipeline(pk, sk, query, records, dim, seed, cache, chunk))
    rep.add("uncached", records, [r.seconds for r in plain], ops=records)
    rep.add("cached", records, [r.seconds for r in cached], ops=records)
    rep.add("cached_pool_refill", records, [r.refill_seconds for r in cached], ops=records * dim)
    ratio = float(np.median([r.seconds for r in plain]) / np.median([r.seconds for r in cached]))
    rep.add("speedup", records, [ratio], unit="x")
    rep.extra["top"] = {"uncached": plain[0].top, "cached": cached[0].top}
    return rep


def bench_threads(pk: PublicKey, seed: int = 0, records: int = 64, dim: int = 64, reps: int = MIN_SAMPLES,
                  max_workers: int | None = None, **_) -> BenchReport:
    rep = BenchReport("threads", "workers", env_stamp(pk, seed))
    rng = np.random.default_rng(seed)
    store = ingest(list(enumerate(rng.uniform(-1, 1, (records, dim)))), pk, rng=rng)
    q = prepare_query([make_ct(d, 1, pk.params_id) for d in encrypt_many(rng.uniform(-1, 1, dim), pk, rng)])
    top = min(96, os.cpu_count() or 1) if max_workers is None else max_workers
    counts = sorted({1, top, *[w for w in (2, 4, 8, 16, 32, 64, 96) if w <= top]})
    for w in counts:
        times = timed(lambda: scan(store, q, workers=w), reps)
        rep.add("scan", w, times, ops=records)
        rep.add("per_worker_throughput", w, [records / t / w for t in times], ops=records, unit="records/s")
    return rep


SUITES = {
    "primitives": bench_primitives,
    "mc": bench_mc,
    "pivots": bench_pivots,
    "weak": bench_weak,
    "speedup": bench_speedup,
    "threads": bench_threads,
}


def run_suite(name: str, pk: PublicKey, sk: SecretKey | None = None, seed: int = 0, **opts) -> BenchReport:
    try:
        fn = SUITES[name]
    except KeyError:
        raise FragError(ErrorCode.UNKNOWN_SUITE, f"unknown suite {name!r}; choose from {', '.join(SUITES)}") from None
    if name == "speedup":
        return fn(pk, sk, seed=seed, **opts)
    return fn(pk, seed=seed, **opts)


def spearman(x, y) -> float:
    rx = np.argsort(np.argsort(x)).astype(float)
    ry = np.argsort(np.argsort(y)).astype(float)
    return float(np.corrcoef(rx, ry)[0, 1])


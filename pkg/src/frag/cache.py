"""Multiplicative caching: pivot tables, a zero pool, and a TTL entry store.

``cache_enc`` never multiplies polynomials.  A value on the fixed-point grid
``r * 2^-frac_bits`` is encrypted as the sum of the pivots Enc(2^(k-frac_bits))
for the set bits k of r, plus one fresh encryption of zero taken from a
pool so that repeated calls stay unlinkable.
"""

from __future__ import annotations

import math
import struct
import threading
import time
from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from frag.errors import ErrorCode, FragError
from frag.he import _kernels as K
from frag.he.cipher import (Ciphertext, PublicKey, eval_add, eval_mul_plain, encrypt_raw,
                            make_ct)
from frag.he.codec import read_ct_frame, serialize_ct

MC_MAGIC = b"FRAGMC1\0"
_CFG = struct.Struct("<HHIdQIQQQQ")  # config, pool length, then stats counters
REFILL_BATCH = 32


@dataclass(frozen=True)
class CacheConfig:
    pivot_count: int = 16
    base: int = 2
    zero_pool_size: int = 256
    ttl_seconds: float = 3600.0
    capacity: int = 65536
    frac_bits: int = 10

    def validate(self, scale_bits: int | None = None) -> "CacheConfig":
        def bad(msg):
            return FragError(ErrorCode.INVALID_CONFIG, msg)

        if not 4 <= self.pivot_count <= 64:
            raise bad(f"pivot_count {self.pivot_count} outside [4, 64]")
        if self.base != 2:
            raise bad("only base 2 pivots are supported")
        if self.zero_pool_size < 1:
            raise bad("zero_pool_size must be >= 1")
        if self.capacity < self.pivot_count + self.zero_pool_size:
            raise bad("capacity must cover pivots plus zero pool")
        if not self.ttl_seconds >= 0:
            raise bad("ttl_seconds must be >= 0")
        if self.frac_bits < 0 or (scale_bits is not None and self.frac_bits > scale_bits):
            raise bad(f"frac_bits {self.frac_bits} must lie in [0, scale_bits]")
        return self

    @property
    def max_magnitude(self) -> float:
        return ((1 << self.pivot_count) - 1) / (1 << self.frac_bits)

    def grid(self, x: float) -> int:
        """round(|x| * 2^frac_bits) as an exact integer."""
        return int(round(abs(x) * (1 << self.frac_bits)))


@dataclass
class CacheEntry:
    key: int
    ct: Ciphertext
    created_at: float
    ttl: float

    def expired(self, now: float) -> bool:
        return self.ttl > 0 and self.created_at + self.ttl < now


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    pool_refills: int = 0

    def as_row(self) -> dict[str, int]:
        return {"hits": self.hits, "misses": self.misses,
                "evictions": self.evictions, "pool_refills": self.pool_refills}


class PivotCache:
    def __init__(self, pk: PublicKey, cfg: CacheConfig, pivots: np.ndarray, zeros: Sequence[np.ndarray] = (),
                 *, auto_refill: bool = True, clock: Callable[[], float] = time.monotonic,
                 rng: np.random.Generator | None = None):
        self.pk = pk
        self.cfg = cfg
        self.params_id = pk.params_id
        self.pivots = pivots  # (P, 2, L, N)
        self.pivots.flags.writeable = False
        self.auto_refill = auto_refill
        self.clock = clock
        self.stats = CacheStats()
        self._rng = rng or np.random.default_rng()
        self._pool: deque[np.ndarray] = deque(zeros)
        self._pool_lock = threading.Lock()
        self._refill_thread: threading.Thread | None = None
        self._refill_guard = threading.Lock()
        self._entries: OrderedDict[int, CacheEntry] = OrderedDict()
        self._lock = threading.RLock()

    # -- infrastructure -----------------------------------------------------

    @property
    def frac_bits(self) -> int:
        return self.cfg.frac_bits

    @property
    def representable(self) -> tuple[float, float]:
        return 0.0, self.cfg.max_magnitude

    @property
    def entry_budget(self) -> int:
        return self.cfg.capacity - self.cfg.pivot_count - self.cfg.zero_pool_size

    def pivot(self, k: int) -> Ciphertext:
        return make_ct(self.pivots[k].copy(), 1, self.params_id)

    def pool_size(self) -> int:
        return len(self._pool)

    def zero_pool(self) -> list[Ciphertext]:
        with self._pool_lock:
            return [make_ct(z.copy(), 1, self.params_id) for z in self._pool]

    def refill(self, target: int | None = None) -> int:
        """Top the pool up to ``target`` (default Z) with fresh encryptions of zero."""
        target = self.cfg.zero_pool_size if target is None else target
        added = 0
        while True:
            need = target - len(self._pool)
            if need <= 0:
                break
            batch = encrypt_raw([0] * min(need, REFILL_BATCH), self.pk, self._rng)
            with self._pool_lock:
                self._pool.extend(batch)
            added += len(batch)
        if added:
            self.stats.pool_refills += 1
        return added

    def _maybe_refill(self) -> None:
        if not self.auto_refill or len(self._pool) >= self.cfg.zero_pool_size / 2:
            return
        with self._refill_guard:
            if self._refill_thread is not None and self._refill_thread.is_alive():
                return
            self._refill_thread = threading.Thread(target=self.refill, name="frag-zero-refill", daemon=True)
            self._refill_thread.start()

    def wait_refill(self, timeout: float | None = None) -> None:
        t = self._refill_thread
        if t is not None:
            t.join(timeout)

    def _take_zeros(self, count: int) -> list[np.ndarray]:
        # popping under the lock guarantees no two callers share a pool entry
        with self._pool_lock:
            have = len(self._pool)
            zeros = [self._pool.popleft() for _ in range(count)] if have >= count else None
        self._maybe_refill()
        if zeros is None:
            raise FragError(ErrorCode.ZERO_POOL_EMPTY, f"need {count} zero encryptions, pool holds {have}")
        return zeros

    # -- data-derived entries -------------------------------------------------

    def put(self, key: int, ct: Ciphertext, ttl: float | None = None, now: float | None = None) -> None:
        now = self.clock() if now is None else now
        ttl = self.cfg.ttl_seconds if ttl is None else ttl
        with self._lock:
            self._entries.pop(key, None)
            self._entries[key] = CacheEntry(key, ct, now, ttl)
            while len(self._entries) > max(self.entry_budget, 0):
                self._entries.popitem(last=False)
                self.stats.evictions += 1

    def get(self, key: int, now: float | None = None) -> Ciphertext | None:
        now = self.clock() if now is None else now
        with self._lock:
            e = self._entries.get(key)
            if e is None or e.expired(now):
                self.stats.misses += 1
                return None
            self.stats.hits += 1
            return e.ct

    def __len__(self) -> int:
        return len(self._entries)


def build_pivots(pk: PublicKey, cfg: CacheConfig = CacheConfig(), *, auto_refill: bool = True,
                 rng: np.random.Generator | None = None, clock: Callable[[], float] = time.monotonic) -> PivotCache:
    cfg.validate(pk.params.scale_bits)
    rng = rng or np.random.default_rng()
    shift = pk.params.scale_bits - cfg.frac_bits
    # pivot k encodes 2^(k - frac_bits) at scale 2^scale_bits; may exceed the
    # encrypt() headroom guard, which is sized for products, not sums
    values = [1 << (k + shift) for k in range(cfg.pivot_count)]
    pivots = encrypt_raw(values, pk, rng)
    cache = PivotCache(pk, cfg, pivots, auto_refill=auto_refill, clock=clock, rng=rng)
    cache.refill()
    cache.stats.pool_refills = 0
    return cache


def _magnitude(x: float, cache: PivotCache) -> int:
    if not math.isfinite(x):
        raise FragError(ErrorCode.REPRESENTATION_OVERFLOW, f"{x} is not finite")
    r = cache.cfg.grid(x)
    if r >= 1 << cache.cfg.pivot_count:
        raise FragError(ErrorCode.REPRESENTATION_OVERFLOW,
                        f"|{x}| exceeds {cache.cfg.max_magnitude:g} (P={cache.cfg.pivot_count})")
    return r


def cache_enc(x: float, cache: PivotCache) -> Ciphertext:
    r = _magnitude(x, cache)
    idx = np.array([k for k in range(r.bit_length()) if r >> k & 1], dtype=np.int64)
    (zero,) = cache._take_zeros(1)
    ctx = cache.pk.context
    out = np.empty_like(zero)
    K.pivot_sum(cache.pivots, idx, zero, x < 0, out, ctx.moduli)
    return make_ct(out, 1, cache.params_id)


def cache_enc_many(xs, cache: PivotCache) -> np.ndarray:
    """Batched :func:`cache_enc`; returns (B, 2, L, N) evaluation data."""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    mags = np.empty(len(xs), dtype=np.uint64)
    for i, x in enumerate(xs.tolist()):
        try:
            mags[i] = _magnitude(x, cache)
        except FragError as e:
            e.details["index"] = i
            raise
    zeros = np.stack(cache._take_zeros(len(xs))) if len(xs) else np.empty((0, *cache.pivots.shape[1:]), np.uint64)
    out = np.empty_like(zeros)
    K.pivot_sum_batch(cache.pivots, mags, xs < 0, zeros, out, cache.pk.context.moduli)
    return out


def cache_add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    return eval_add(a, b)


def cache_mul_plain(p: float, ct: Ciphertext) -> Ciphertext:
    return eval_mul_plain(ct, p)


def normalize(ct: Ciphertext, delta_i: float) -> Ciphertext:
    if delta_i == 0:
        raise FragError(ErrorCode.DIVIDE_BY_ZERO_SCALE, "delta is zero")
    return eval_mul_plain(ct, 1.0 / delta_i)


def evict_expired(cache: PivotCache, now: float | None = None) -> int:
    now = cache.clock() if now is None else now
    with cache._lock:
        stale = [k for k, e in cache._entries.items() if e.expired(now)]
        for k in stale:
            del cache._entries[k]
        cache.stats.evictions += len(stale)
    return len(stale)


# ---------------------------------------------------------------------------
# persistence


def save_cache(cache: PivotCache, path) -> None:
    cfg = cache.cfg
    zeros = cache.zero_pool()
    st = cache.stats
    head = _CFG.pack(cfg.pivot_count, cfg.frac_bits, cfg.zero_pool_size, cfg.ttl_seconds, cfg.capacity, len(zeros),
                     st.hits, st.misses, st.evictions, st.pool_refills)
    try:
        with open(path, "wb") as f:
            f.write(MC_MAGIC + head)
            for k in range(cfg.pivot_count):
                f.write(serialize_ct(cache.pivot(k)))
            for z in zeros:
                f.write(serialize_ct(z))
    except OSError as e:
        raise FragError(ErrorCode.IO_ERROR, str(e)) from e


def load_cache(path, pk: PublicKey, *, auto_refill: bool = True) -> PivotCache:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise FragError(ErrorCode.IO_ERROR, str(e)) from e
    if buf[:8] != MC_MAGIC or len(buf) < 8 + _CFG.size:
        raise FragError(ErrorCode.MALFORMED_FILE, "not a pivot cache file")
    p, fb, z, ttl, cap, pool_len, *counters = _CFG.unpack_from(buf, 8)
    cfg = CacheConfig(pivot_count=p, zero_pool_size=z, ttl_seconds=ttl, capacity=cap, frac_bits=fb)
    cfg.validate(pk.params.scale_bits)
    off = 8 + _CFG.size
    frames = []
    try:
        for _ in range(p + pool_len):
            ct, off = read_ct_frame(buf, off)
            if ct.params_id != pk.params_id:
                raise FragError(ErrorCode.PARAMS_MISMATCH, "cache was built under other parameters")
            frames.append(np.array(ct.data))
    except FragError as e:
        if e.code == ErrorCode.MALFORMED_FRAME:
            raise FragError(ErrorCode.MALFORMED_FILE, e.message) from e
        raise
    if off != len(buf):
        raise FragError(ErrorCode.MALFORMED_FILE, "trailing bytes in cache file")
    cache = PivotCache(pk, cfg, np.stack(frames[:p]), frames[p:], auto_refill=auto_refill)
    cache.stats = CacheStats(*counters)
    return cache

"""Single-key RLWE cipher over scalar plaintexts (constant-term encoding).

A ciphertext encrypting x has phase c0 + c1*s (+ c2*s^2) whose constant
coefficient is round(x * 2^scale_bits)^scale_exp-ish plus small noise.  The
polynomials are held in evaluation (NTT) form, which turns every ring
product into a pointwise product; coefficient form only appears at the
serialization boundary.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from frag.errors import ErrorCode, FragError
from frag.he import _kernels as K
from frag.he.params import CipherParams, RingContext, context_for, ring_context

MAX_SCALE_EXP = 255

_thread_rng = threading.local()


def default_rng() -> np.random.Generator:
    """Per-thread OS-seeded generator used when a caller passes no rng."""
    rng = getattr(_thread_rng, "rng", None)
    if rng is None:
        rng = _thread_rng.rng = np.random.default_rng()
    return rng


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


# ---------------------------------------------------------------------------
# keys


@dataclass(frozen=True, eq=False)
class SecretKey:
    params: CipherParams
    coeffs: np.ndarray  # (N,) int8 in {-1, 0, 1}

    @property
    def params_id(self) -> bytes:
        return self.params.params_id

    @cached_property
    def context(self) -> RingContext:
        return ring_context(self.params)

    @cached_property
    def s(self) -> np.ndarray:
        """Residues of s modulo each prime, shape (L, N)."""
        return self.context.small_residues(self.coeffs)

    @cached_property
    def powers(self) -> tuple[np.ndarray, np.ndarray]:
        """Evaluation form of (s, s^2) and their Shoup companions, each (2, L, N)."""
        ctx = self.context
        s_hat = ctx.to_eval(self.s)
        s2 = np.empty_like(s_hat)
        K.mul_fixed(s_hat[None], s_hat, ctx.companions(s_hat), s2[None], ctx.moduli)
        spow = np.stack([s_hat, s2])
        return _frozen(spow), _frozen(ctx.companions(spow))


@dataclass(frozen=True, eq=False)
class PublicKey:
    params: CipherParams
    data: np.ndarray  # (2, L, N) evaluation form of (b, a)

    @property
    def params_id(self) -> bytes:
        return self.params.params_id

    @cached_property
    def context(self) -> RingContext:
        return ring_context(self.params)

    @cached_property
    def companions(self) -> np.ndarray:
        return _frozen(self.context.companions(self.data))

    @property
    def b(self) -> np.ndarray:
        return self.context.to_coeffs(self.data[0])

    @property
    def a(self) -> np.ndarray:
        return self.context.to_coeffs(self.data[1])


def keygen(params: CipherParams, seed: int) -> tuple[PublicKey, SecretKey]:
    """Deterministic key pair: s ternary, a uniform, b = -(a*s) + e."""
    ctx = ring_context(params)
    n = params.ring_degree
    rng = np.random.default_rng(seed)
    s = rng.integers(-1, 2, size=n, dtype=np.int8)
    a = np.stack([rng.integers(0, q, size=n, dtype=np.uint64) for q in ctx.moduli_int])
    e = np.rint(rng.normal(0.0, params.noise_stddev, size=n)).astype(np.int64)

    sk = SecretKey(params, _frozen(s))
    a_hat = ctx.to_eval(a)
    s_hat = sk.powers[0][0]
    as_hat = np.empty_like(a_hat)
    K.mul_fixed(a_hat[None], s_hat, sk.powers[1][0], as_hat[None], ctx.moduli)
    e_hat = ctx.to_eval(ctx.small_residues(e))
    b_hat = np.empty_like(a_hat)
    K.sub_mod(e_hat[None], as_hat[None], b_hat[None], ctx.moduli)
    return PublicKey(params, _frozen(np.stack([b_hat, a_hat]))), sk


# ---------------------------------------------------------------------------
# plaintexts


@dataclass(frozen=True)
class Plaintext:
    value: int
    scale_exp: int = 1


def encode(x: float, params: CipherParams, scale_exp: int = 1) -> Plaintext:
    return Plaintext(int(round(x * float(params.scale) ** scale_exp)), scale_exp)


def decode(pt: Plaintext, params: CipherParams) -> float:
    return pt.value / (1 << (params.scale_bits * pt.scale_exp))


# ---------------------------------------------------------------------------
# ciphertexts


@dataclass(frozen=True, eq=False)
class Ciphertext:
    data: np.ndarray  # (degree + 1, L, N) evaluation form
    scale_exp: int
    params_id: bytes

    @property
    def degree(self) -> int:
        return self.data.shape[0] - 1

    @property
    def context(self) -> RingContext:
        return context_for(self.params_id)

    @property
    def polys(self) -> np.ndarray:
        """Coefficient-form residues, shape (degree + 1, L, N)."""
        return self.context.to_coeffs(self.data)

    def __eq__(self, other):
        if not isinstance(other, Ciphertext):
            return NotImplemented
        return (self.params_id == other.params_id and self.scale_exp == other.scale_exp
                and self.data.shape == other.data.shape and np.array_equal(self.data, other.data))

    __hash__ = None


def make_ct(data: np.ndarray, scale_exp: int, params_id: bytes) -> Ciphertext:
    if scale_exp > MAX_SCALE_EXP:
        raise FragError(ErrorCode.SCALE_MISMATCH, f"scale_exp {scale_exp} exceeds {MAX_SCALE_EXP}")
    return Ciphertext(_frozen(data), scale_exp, params_id)


def _check_bound(x: float, params: CipherParams) -> None:
    if not np.isfinite(x) or abs(x) > params.plaintext_bound:
        raise FragError(ErrorCode.PLAINTEXT_OUT_OF_RANGE,
                        f"|{x}| exceeds headroom bound {params.plaintext_bound:g}")


def encrypt_raw(values: Sequence[int], pk: PublicKey, rng: np.random.Generator) -> np.ndarray:
    """Encrypt already-encoded integers; returns (B, 2, L, N) evaluation data.

    No range guard: callers (pivot tables) are responsible for headroom.
    """
    ctx = pk.context
    params = pk.params
    b = len(values)
    n = params.ring_degree
    u = rng.integers(-1, 2, size=(b, n), dtype=np.int8)
    e = np.rint(rng.normal(0.0, params.noise_stddev, size=(b, 2, n))).astype(np.int64)
    msg = np.empty((b, ctx.L), dtype=np.uint64)
    for i, v in enumerate(values):
        msg[i] = ctx.residues(int(v))
    out = np.empty((b, 2, ctx.L, n), dtype=np.uint64)
    K.encrypt_batch(u, e, msg, pk.data, pk.companions, ctx.psi, ctx.psip, ctx.moduli, out)
    return out


def encrypt(x: float, pk: PublicKey, rng: np.random.Generator | None = None) -> Ciphertext:
    _check_bound(x, pk.params)
    data = encrypt_raw([encode(x, pk.params).value], pk, rng or default_rng())
    return make_ct(data[0], 1, pk.params_id)


def encrypt_many(xs: Iterable[float], pk: PublicKey, rng: np.random.Generator | None = None) -> np.ndarray:
    """Vectorised :func:`encrypt`; returns stacked (B, 2, L, N) evaluation data."""
    xs = np.asarray(list(xs) if not isinstance(xs, np.ndarray) else xs, dtype=np.float64).ravel()
    bound = pk.params.plaintext_bound
    bad = ~np.isfinite(xs) | (np.abs(xs) > bound)
    if bad.any():
        i = int(np.argmax(bad))
        raise FragError(ErrorCode.PLAINTEXT_OUT_OF_RANGE,
                        f"element {i}: |{xs[i]}| exceeds headroom bound {bound:g}", index=i)
    scaled = np.rint(xs * float(pk.params.scale)).astype(np.int64)
    return encrypt_raw(scaled.tolist(), pk, rng or default_rng())


def _phase_residues(cts: np.ndarray, sk: SecretKey) -> np.ndarray:
    ctx = sk.context
    spow, spowp = sk.powers
    out = np.empty((cts.shape[0], ctx.L), dtype=np.uint64)
    K.phase_constant(cts, spow, spowp, ctx.ninv, ctx.ninvp, ctx.moduli, out)
    return out


def _check_decryptable(ct: Ciphertext, sk: SecretKey) -> None:
    if ct.params_id != sk.params_id:
        raise FragError(ErrorCode.PARAMS_MISMATCH, "ciphertext and key use different parameters")
    if ct.degree > 2:
        raise FragError(ErrorCode.DEGREE_UNSUPPORTED, f"degree {ct.degree} > 2")


def decrypt(ct: Ciphertext, sk: SecretKey) -> float:
    _check_decryptable(ct, sk)
    ctx = sk.context
    res = _phase_residues(np.ascontiguousarray(ct.data)[None], sk)[0]
    return ctx.centered(res) / (1 << (sk.params.scale_bits * ct.scale_exp))


def decrypt_many(cts: Sequence[Ciphertext], sk: SecretKey) -> list[float]:
    """Batch :func:`decrypt` for same-degree ciphertexts."""
    if not cts:
        return []
    for ct in cts:
        _check_decryptable(ct, sk)
    ctx = sk.context
    out: list[float] = [0.0] * len(cts)
    by_degree: dict[int, list[int]] = {}
    for i, ct in enumerate(cts):
        by_degree.setdefault(ct.degree, []).append(i)
    for idx in by_degree.values():
        res = _phase_residues(np.stack([cts[i].data for i in idx]), sk)
        for i, r in zip(idx, res):
            out[i] = ctx.centered(r) / (1 << (sk.params.scale_bits * cts[i].scale_exp))
    return out


def phase_coefficients(ct: Ciphertext, sk: SecretKey) -> list[int]:
    """Full centered phase polynomial (message plus noise), for diagnostics."""
    _check_decryptable(ct, sk)
    ctx = sk.context
    spow, spowp = sk.powers
    ph = np.empty((1, ctx.L, ctx.n), dtype=np.uint64)
    K.phase_poly(np.ascontiguousarray(ct.data), spow, spowp, ctx.moduli, ph)
    coeffs = ctx.to_coeffs(ph)[0]
    return [ctx.centered(coeffs[:, j]) for j in range(ctx.n)]


# ---------------------------------------------------------------------------
# homomorphic evaluation


def _same_params(a: Ciphertext, b: Ciphertext) -> None:
    if a.params_id != b.params_id:
        raise FragError(ErrorCode.PARAMS_MISMATCH, "operands use different parameters")


def eval_add(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _same_params(a, b)
    if a.scale_exp != b.scale_exp:
        raise FragError(ErrorCode.SCALE_MISMATCH, f"scale_exp {a.scale_exp} != {b.scale_exp}")
    if a.degree != b.degree:
        raise FragError(ErrorCode.DEGREE_MISMATCH, f"degree {a.degree} != {b.degree}")
    ctx = a.context
    out = np.empty_like(a.data)
    K.add_mod(a.data, b.data, out, ctx.moduli)
    return make_ct(out, a.scale_exp, a.params_id)


def eval_sum(cts: Sequence[Ciphertext]) -> Ciphertext:
    acc = cts[0]
    for ct in cts[1:]:
        acc = eval_add(acc, ct)
    return acc


def eval_neg(a: Ciphertext) -> Ciphertext:
    out = np.empty_like(a.data)
    K.sub_mod(np.zeros_like(a.data), a.data, out, a.context.moduli)
    return make_ct(out, a.scale_exp, a.params_id)


def eval_mul_cipher(a: Ciphertext, b: Ciphertext) -> Ciphertext:
    _same_params(a, b)
    if a.degree != 1 or b.degree != 1:
        raise FragError(ErrorCode.DEPTH_EXCEEDED, "only degree-1 operands can be multiplied")
    ctx = a.context
    out = np.empty((3, ctx.L, ctx.n), dtype=np.uint64)
    K.tensor(a.data, b.data, out, ctx.r64, ctx.r64p, ctx.moduli, ctx.qinv)
    return make_ct(out, a.scale_exp + b.scale_exp, a.params_id)


def eval_mul_plain(ct: Ciphertext, p: float) -> Ciphertext:
    """Multiply by the encoded constant round(p * scale); scale_exp grows by one."""
    if ct.degree > 2:
        raise FragError(ErrorCode.DEGREE_UNSUPPORTED, f"degree {ct.degree} > 2")
    ctx = ct.context
    _check_bound(p, ctx.params)
    c = ctx.residues(encode(p, ctx.params).value)
    out = np.empty_like(ct.data)
    K.mul_scalar(ct.data, c, ctx.scalar_companions(c), out, ctx.moduli)
    return make_ct(out, ct.scale_exp + 1, ct.params_id)

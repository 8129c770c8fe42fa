"""Cipher parameters and the derived ring context (twiddles, CRT constants)."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from frag.errors import ErrorCode, FragError
from frag.he import _kernels as K

# Smallest primes above 2^60 with q = 1 (mod 2048), found by scanning
# k*2048 + 1 upwards with a primality test.  The first one is the single
# modulus the protocol was sized for; the second extends the ciphertext
# modulus to ~2^120 so degree-2 products at scale 2^64 still decode.
DEFAULT_MODULI = (1152921504606877697, 1152921504606902273)

# plaintext headroom guard: |x| <= 2^(HEADROOM_BITS - scale_bits - 4)
HEADROOM_BITS = 60


@dataclass(frozen=True)
class CipherParams:
    ring_degree: int = 1024
    moduli: tuple[int, ...] = DEFAULT_MODULI
    noise_stddev: float = 3.2
    scale_bits: int = 32
    rng_seed: int = 0

    def validate(self) -> "CipherParams":
        from sympy import isprime

        n = self.ring_degree
        if n < 2 or n & (n - 1):
            raise FragError(ErrorCode.INVALID_PARAMS, f"ring degree {n} is not a power of two")
        if not self.moduli:
            raise FragError(ErrorCode.INVALID_PARAMS, "no modulus given")
        if len(set(self.moduli)) != len(self.moduli):
            raise FragError(ErrorCode.INVALID_PARAMS, "moduli must be distinct")
        for q in self.moduli:
            if q % (2 * n) != 1:
                raise FragError(ErrorCode.INVALID_PARAMS, f"modulus {q} is not 1 mod 2N")
            if not 2**40 < q < 2**62:
                raise FragError(ErrorCode.INVALID_PARAMS, f"modulus {q} outside (2^40, 2^62)")
            if not isprime(q):
                raise FragError(ErrorCode.INVALID_PARAMS, f"modulus {q} is composite")
        if self.scale_bits < 8:
            raise FragError(ErrorCode.INVALID_PARAMS, "scale_bits must be >= 8")
        if not self.noise_stddev > 0:
            raise FragError(ErrorCode.INVALID_PARAMS, "noise_stddev must be positive")
        if not 0 <= self.rng_seed < 2**64:
            raise FragError(ErrorCode.INVALID_PARAMS, "rng_seed must fit in 64 bits")
        return self

    @property
    def modulus(self) -> int:
        q = 1
        for p in self.moduli:
            q *= p
        return q

    @property
    def scale(self) -> int:
        return 1 << self.scale_bits

    @property
    def plaintext_bound(self) -> float:
        return float(2 ** (HEADROOM_BITS - self.scale_bits - 4))

    @cached_property
    def params_id(self) -> bytes:
        # rng_seed is a test-run knob, not part of the algebra
        h = hashlib.sha256(b"frag-params-v1")
        h.update(struct.pack("<IdI", self.ring_degree, self.noise_stddev, self.scale_bits))
        h.update(struct.pack("<I", len(self.moduli)))
        for q in self.moduli:
            h.update(q.to_bytes(8, "little"))
        return h.digest()


def _bitrev(k: int, bits: int) -> int:
    return int(format(k, f"0{bits}b")[::-1], 2) if bits else 0


def _root_2n(q: int, n: int) -> int:
    # psi has order exactly 2N iff psi^N = -1 (N a power of two)
    for g in range(2, 1000):
        psi = pow(g, (q - 1) // (2 * n), q)
        if pow(psi, n, q) == q - 1:
            return psi
    raise FragError(ErrorCode.INVALID_PARAMS, f"no 2N-th root of unity modulo {q}")


def _u64(values) -> np.ndarray:
    return np.array(values, dtype=np.uint64)


class RingContext:
    """Precomputed tables for one validated parameter set."""

    def __init__(self, params: CipherParams):
        params.validate()
        self.params = params
        self.params_id = params.params_id
        n = params.ring_degree
        self.n = n
        self.moduli_int = tuple(params.moduli)
        self.moduli = _u64(params.moduli)
        self.L = len(params.moduli)
        bits = n.bit_length() - 1

        psi_rows, psip_rows, ipsi_rows, ipsip_rows = [], [], [], []
        ninv, ninvp, r64, r64p, qinv = [], [], [], [], []
        for q in params.moduli:
            psi = _root_2n(q, n)
            ipsi = pow(psi, -1, q)
            fw = [pow(psi, _bitrev(k, bits), q) for k in range(n)]
            iv = [pow(ipsi, _bitrev(k, bits), q) for k in range(n)]
            psi_rows.append(fw)
            psip_rows.append([(w << 64) // q for w in fw])
            ipsi_rows.append(iv)
            ipsip_rows.append([(w << 64) // q for w in iv])
            ni = pow(n, -1, q)
            ninv.append(ni)
            ninvp.append((ni << 64) // q)
            r = (1 << 64) % q
            r64.append(r)
            r64p.append((r << 64) // q)
            qinv.append(pow(q, -1, 1 << 64))
        self.psi = _u64(psi_rows)
        self.psip = _u64(psip_rows)
        self.ipsi = _u64(ipsi_rows)
        self.ipsip = _u64(ipsip_rows)
        self.ninv = _u64(ninv)
        self.ninvp = _u64(ninvp)
        self.r64 = _u64(r64)
        self.r64p = _u64(r64p)
        self.qinv = _u64(qinv)

        # CRT: x = r0 + q0 * ((r1 - r0) * q0^-1 mod q1) + ... (Garner)
        self._garner = []
        prod = 1
        for q in params.moduli:
            self._garner.append((prod, pow(prod % q, -1, q) if prod > 1 else 1))
            prod *= q
        self.modulus = prod

    # -- transforms ---------------------------------------------------------

    def to_eval(self, coeffs: np.ndarray) -> np.ndarray:
        """Coefficient residues (..., L, N) -> evaluation form (new array)."""
        out = np.ascontiguousarray(coeffs, dtype=np.uint64).copy()
        K.ntt_forward(out.reshape(-1, self.L, self.n), self.psi, self.psip, self.moduli)
        return out

    def to_coeffs(self, evals: np.ndarray) -> np.ndarray:
        out = np.ascontiguousarray(evals, dtype=np.uint64).copy()
        K.ntt_inverse(out.reshape(-1, self.L, self.n), self.ipsi, self.ipsip,
                      self.ninv, self.ninvp, self.moduli)
        return out

    # -- residue helpers ----------------------------------------------------

    def residues(self, value: int) -> np.ndarray:
        """Residues of a (possibly negative, possibly large) integer, shape (L,)."""
        return _u64([value % q for q in self.moduli_int])

    def small_residues(self, values: np.ndarray) -> np.ndarray:
        """Signed int64 array (..., N) -> residues (..., L, N)."""
        v = np.asarray(values, dtype=np.int64)
        return np.stack([np.mod(v, q).astype(np.uint64) for q in self.moduli_int], axis=-2)

    def crt(self, residues) -> int:
        """Residues (L,) -> integer in [0, Q)."""
        x = 0
        for (prod, inv), q, r in zip(self._garner, self.moduli_int, residues):
            t = ((int(r) - x) * inv) % q
            x += prod * t
        return x

    def centered(self, residues) -> int:
        x = self.crt(residues)
        return x - self.modulus if x > self.modulus // 2 else x

    def companions(self, w: np.ndarray) -> np.ndarray:
        """Shoup companions floor(w * 2^64 / q) for an array (..., L, N)."""
        w = np.ascontiguousarray(w, dtype=np.uint64)
        out = np.empty_like(w)
        K.shoup_companions(w.reshape(-1, self.L, self.n), out.reshape(-1, self.L, self.n),
                           self.r64, self.r64p, self.moduli, self.qinv)
        return out

    def scalar_companions(self, c: np.ndarray) -> np.ndarray:
        return _u64([(int(w) << 64) // q for w, q in zip(c, self.moduli_int)])


_REGISTRY: dict[bytes, RingContext] = {}


@lru_cache(maxsize=None)
def ring_context(params: CipherParams) -> RingContext:
    ctx = RingContext(params)
    _REGISTRY[ctx.params_id] = ctx
    return ctx


def context_for(params_id: bytes) -> RingContext:
    try:
        return _REGISTRY[params_id]
    except KeyError:
        raise FragError(ErrorCode.PARAMS_MISMATCH, "unknown params_id; build the ring context first") from None

"""Binary frames for ciphertexts and keys.

Ciphertext frame::

    "FRAGCT1\\0" | params_id (32) | degree u8 | scale_exp u8 | N u32 LE
    | (degree + 1) polynomials, each L residue rows of N u64 LE

Coefficients are written in coefficient form, residue-major.  L (the
number of primes) is implied by params_id.
"""

from __future__ import annotations

import struct

import numpy as np

from frag.errors import ErrorCode, FragError
from frag.he.cipher import Ciphertext, PublicKey, SecretKey, make_ct
from frag.he.params import CipherParams, context_for, ring_context

CT_MAGIC = b"FRAGCT1\0"
PK_MAGIC = b"FRAGPK1\0"
SK_MAGIC = b"FRAGSK1\0"

_CT_HEAD = struct.Struct("<32sBBI")
CT_HEADER_SIZE = len(CT_MAGIC) + _CT_HEAD.size
_PARAMS_HEAD = struct.Struct("<IIdQH")


def _malformed(msg: str) -> FragError:
    return FragError(ErrorCode.MALFORMED_FRAME, msg)


def ct_frame_size(degree: int, n: int, n_moduli: int) -> int:
    return CT_HEADER_SIZE + (degree + 1) * n_moduli * n * 8


def serialize_ct_body(ct: Ciphertext) -> bytes:
    """Frame without its magic; shared with the share frame."""
    _, L, n = ct.data.shape
    head = _CT_HEAD.pack(ct.params_id, ct.degree, ct.scale_exp, n)
    return head + ct.polys.astype("<u8", copy=False).tobytes()


def serialize_ct(ct: Ciphertext) -> bytes:
    return CT_MAGIC + serialize_ct_body(ct)


def read_ct_body(buf, offset: int = 0) -> tuple[Ciphertext, int]:
    """Parse a magic-less body at ``offset``; returns (ct, end offset)."""
    buf = memoryview(buf)
    if len(buf) - offset < _CT_HEAD.size:
        raise _malformed("truncated ciphertext header")
    params_id, degree, scale_exp, n = _CT_HEAD.unpack_from(buf, offset)
    offset += _CT_HEAD.size
    if degree not in (1, 2):
        raise _malformed(f"degree {degree} not in {{1, 2}}")
    if scale_exp < 1:
        raise _malformed("scale_exp must be >= 1")
    ctx = context_for(params_id)
    if n != ctx.n:
        raise _malformed(f"N={n} does not match parameters (N={ctx.n})")
    count = (degree + 1) * ctx.L * n
    end = offset + 8 * count
    if len(buf) < end:
        raise _malformed("truncated ciphertext body")
    coeffs = np.frombuffer(buf, dtype="<u8", count=count, offset=offset)
    coeffs = coeffs.astype(np.uint64).reshape(degree + 1, ctx.L, n)
    if (coeffs >= ctx.moduli[None, :, None]).any():
        raise _malformed("coefficient not reduced modulo q")
    return make_ct(ctx.to_eval(coeffs), scale_exp, bytes(params_id)), end


def read_ct_frame(buf, offset: int = 0) -> tuple[Ciphertext, int]:
    if bytes(buf[offset:offset + len(CT_MAGIC)]) != CT_MAGIC:
        raise _malformed("bad ciphertext magic")
    return read_ct_body(buf, offset + len(CT_MAGIC))


def deserialize_ct(buf: bytes) -> Ciphertext:
    ct, end = read_ct_frame(buf)
    if end != len(buf):
        raise _malformed(f"{len(buf) - end} trailing bytes after ciphertext frame")
    return ct


# ---------------------------------------------------------------------------
# parameters and keys


def pack_params(params: CipherParams) -> bytes:
    head = _PARAMS_HEAD.pack(params.ring_degree, params.scale_bits, params.noise_stddev,
                             params.rng_seed, len(params.moduli))
    return head + b"".join(q.to_bytes(8, "little") for q in params.moduli)


def unpack_params(buf, offset: int = 0) -> tuple[CipherParams, int]:
    buf = memoryview(buf)
    if len(buf) - offset < _PARAMS_HEAD.size:
        raise _malformed("truncated parameter block")
    n, sb, sigma, seed, nq = _PARAMS_HEAD.unpack_from(buf, offset)
    offset += _PARAMS_HEAD.size
    if len(buf) - offset < 8 * nq:
        raise _malformed("truncated modulus list")
    moduli = tuple(int.from_bytes(buf[offset + 8 * i:offset + 8 * i + 8], "little") for i in range(nq))
    params = CipherParams(ring_degree=n, moduli=moduli, noise_stddev=sigma, scale_bits=sb, rng_seed=seed)
    ring_context(params)  # validates and registers params_id
    return params, offset + 8 * nq


def serialize_pk(pk: PublicKey) -> bytes:
    coeffs = pk.context.to_coeffs(pk.data)
    return PK_MAGIC + pack_params(pk.params) + pk.params_id + coeffs.astype("<u8", copy=False).tobytes()


def serialize_sk(sk: SecretKey) -> bytes:
    return SK_MAGIC + pack_params(sk.params) + sk.params_id + sk.coeffs.astype(np.int8).tobytes()


def _key_header(buf: bytes, magic: bytes) -> tuple[CipherParams, int]:
    if buf[:len(magic)] != magic:
        raise _malformed(f"expected magic {magic!r}")
    params, off = unpack_params(buf, len(magic))
    if buf[off:off + 32] != params.params_id:
        raise FragError(ErrorCode.PARAMS_MISMATCH, "key params_id does not match its parameter block")
    return params, off + 32


def deserialize_pk(buf: bytes) -> PublicKey:
    params, off = _key_header(buf, PK_MAGIC)
    ctx = ring_context(params)
    count = 2 * ctx.L * ctx.n
    if len(buf) != off + 8 * count:
        raise _malformed("public key body has wrong length")
    coeffs = np.frombuffer(buf, dtype="<u8", count=count, offset=off).astype(np.uint64)
    data = ctx.to_eval(coeffs.reshape(2, ctx.L, ctx.n))
    data.flags.writeable = False
    return PublicKey(params, data)


def deserialize_sk(buf: bytes) -> SecretKey:
    params, off = _key_header(buf, SK_MAGIC)
    n = params.ring_degree
    if len(buf) != off + n:
        raise _malformed("secret key body has wrong length")
    s = np.frombuffer(buf, dtype=np.int8, count=n, offset=off).copy()
    if np.abs(s).max(initial=0) > 1:
        raise _malformed("secret key is not ternary")
    s.flags.writeable = False
    return SecretKey(params, s)

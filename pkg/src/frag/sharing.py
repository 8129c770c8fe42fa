"""Additive n-way splitting of ciphertexts and share-level evaluation.

Shares live in the same evaluation domain as ciphertexts.  The transform is
a linear bijection mod q, so a share that is uniform there is uniform in
coefficient form too, and additivity carries over unchanged.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from frag.errors import ErrorCode, FragError
from frag.he import _kernels as K
from frag.he.cipher import Ciphertext, default_rng, make_ct
from frag.he.codec import read_ct_body, serialize_ct, serialize_ct_body
from frag.he.params import RingContext, context_for

SH_MAGIC = b"FRAGSH1\0"
_SH_HEAD = struct.Struct("<32sHH")
MAX_RETRIES = 3


def commitment(ct: Ciphertext) -> bytes:
    return hashlib.sha256(serialize_ct(ct)).digest()


@dataclass(frozen=True, eq=False)
class CipherShare:
    party_index: int
    share_count: int
    data: np.ndarray  # (degree + 1, L, N) evaluation form
    scale_exp: int
    commitment: bytes
    params_id: bytes

    @property
    def share_polys(self) -> np.ndarray:
        return context_for(self.params_id).to_coeffs(self.data)

    def as_ciphertext(self) -> Ciphertext:
        return make_ct(self.data, self.scale_exp, self.params_id)


@dataclass(frozen=True, eq=False)
class PartialResult:
    party_index: int
    record_id: int
    value: Ciphertext
    commitment: bytes
    share_count: int = 1


def uniform_residues(ctx: RingContext, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Uniform array of shape (*shape, L, N), each row in [0, q_l)."""
    out = np.empty((*shape, ctx.L, ctx.n), dtype=np.uint64)
    for l, q in enumerate(ctx.moduli_int):
        out[..., l, :] = rng.integers(0, q, size=(*shape, ctx.n), dtype=np.uint64)
    return out


def split(ct: Ciphertext, n: int, rng: np.random.Generator | None = None) -> list[CipherShare]:
    if n < 1:
        raise FragError(ErrorCode.INVALID_SHARE_COUNT, f"n={n}")
    if ct.degree != 1:
        raise FragError(ErrorCode.DEGREE_MISMATCH, "only degree-1 ciphertexts are split")
    rng = rng or default_rng()
    ctx = ct.context
    digest = commitment(ct)
    shares = []
    residual = np.array(ct.data)
    if n > 1:
        rand = uniform_residues(ctx, (n - 1, *ct.data.shape[:1]), rng)
        for j in range(n - 1):
            K.sub_mod(residual, rand[j], residual, ctx.moduli)
            rand[j].flags.writeable = False
            shares.append(CipherShare(j + 1, n, rand[j], ct.scale_exp, digest, ct.params_id))
    residual.flags.writeable = False
    shares.append(CipherShare(n, n, residual, ct.scale_exp, digest, ct.params_id))
    return shares


def _complete_group(items: Sequence, n: int, what: str) -> None:
    idx = sorted(x.party_index for x in items)
    if idx != list(range(1, n + 1)):
        missing = sorted(set(range(1, n + 1)) - set(idx))
        raise FragError(ErrorCode.SHARE_SET_INCOMPLETE,
                        f"{what}: have parties {idx}, missing {missing}", missing=missing)


def merge(shares: Sequence[CipherShare]) -> Ciphertext:
    if not shares:
        raise FragError(ErrorCode.SHARE_SET_INCOMPLETE, "no shares")
    first = shares[0]
    for s in shares[1:]:
        if s.commitment != first.commitment or s.share_count != first.share_count:
            raise FragError(ErrorCode.COMMITMENT_MISMATCH, "shares belong to different ciphertexts")
        if s.scale_exp != first.scale_exp or s.params_id != first.params_id:
            raise FragError(ErrorCode.COMMITMENT_MISMATCH, "share metadata disagrees")
    _complete_group(shares, first.share_count, "merge")
    ctx = context_for(first.params_id)
    acc = np.array(first.data)
    for s in shares[1:]:
        K.add_mod(acc, s.data, acc, ctx.moduli)
    ct = make_ct(acc, first.scale_exp, first.params_id)
    if commitment(ct) != first.commitment:
        raise FragError(ErrorCode.COMMITMENT_MISMATCH, "merged ciphertext does not match commitment")
    return ct


def verify(item: CipherShare | PartialResult, expected_commitment: bytes) -> bool:
    try:
        if item.commitment != expected_commitment:
            return False
        n = item.share_count
        if not (isinstance(n, int) and n >= 1 and 1 <= item.party_index <= n):
            return False
        if isinstance(item, PartialResult):
            data, params_id = item.value.data, item.value.params_id
            degree_ok = item.value.degree == 2
        else:
            data, params_id = item.data, item.params_id
            degree_ok = data.shape[0] in (2, 3)
        ctx = context_for(params_id)
        return degree_ok and data.shape[1:] == (ctx.L, ctx.n)
    except (AttributeError, FragError):
        return False


def share_hom_op(share: CipherShare, enc_query_elem: Ciphertext, record_id: int = 0) -> PartialResult:
    if share.data.shape[0] != 2 or enc_query_elem.degree != 1:
        raise FragError(ErrorCode.DEPTH_EXCEEDED, "share_hom_op needs degree-1 operands")
    if share.params_id != enc_query_elem.params_id:
        raise FragError(ErrorCode.PARAMS_MISMATCH, "share and query use different parameters")
    ctx = enc_query_elem.context
    out = np.empty((3, ctx.L, ctx.n), dtype=np.uint64)
    K.tensor(share.data, enc_query_elem.data, out, ctx.r64, ctx.r64p, ctx.moduli, ctx.qinv)
    value = make_ct(out, share.scale_exp + enc_query_elem.scale_exp, share.params_id)
    return PartialResult(share.party_index, record_id, value, share.commitment, share.share_count)


def aggregate_partials(partials: Sequence[PartialResult]) -> Ciphertext:
    """Sum partials; every commitment group must hold a complete party set."""
    if not partials:
        raise FragError(ErrorCode.SHARE_SET_INCOMPLETE, "no partials")
    groups: dict[bytes, list[PartialResult]] = {}
    for p in partials:
        groups.setdefault(p.commitment, []).append(p)
    for digest, group in groups.items():
        counts = {p.share_count for p in group}
        if len(counts) != 1:
            raise FragError(ErrorCode.COMMITMENT_MISMATCH, "inconsistent share counts in one group")
        _complete_group(group, counts.pop(), f"commitment {digest.hex()[:12]}")
    first = partials[0].value
    for p in partials[1:]:
        if p.value.scale_exp != first.scale_exp:
            raise FragError(ErrorCode.SCALE_MISMATCH, f"scale_exp {p.value.scale_exp} != {first.scale_exp}")
        if p.value.params_id != first.params_id:
            raise FragError(ErrorCode.PARAMS_MISMATCH, "partials use different parameters")
        if p.value.degree != first.degree:
            raise FragError(ErrorCode.DEGREE_MISMATCH, "partials differ in degree")
    ctx = first.context
    acc = np.array(first.data)
    for p in partials[1:]:
        K.add_mod(acc, p.value.data, acc, ctx.moduli)
    return make_ct(acc, first.scale_exp, first.params_id)


def with_retries(compute: Callable[[], PartialResult | CipherShare], expected_commitment: bytes,
                 max_retries: int = MAX_RETRIES, on_retry: Callable[[int], None] | None = None):
    """Run ``compute`` until its result verifies; recompute at most ``max_retries`` times."""
    for attempt in range(max_retries + 1):
        result = compute()
        if verify(result, expected_commitment):
            return result
        if on_retry is not None and attempt < max_retries:
            on_retry(attempt + 1)
    raise FragError(ErrorCode.COMMITMENT_MISMATCH,
                    f"result failed verification after {max_retries} recomputations")


# ---------------------------------------------------------------------------
# frames


def _pack_share(commit: bytes, n: int, j: int, ct: Ciphertext) -> bytes:
    return SH_MAGIC + _SH_HEAD.pack(commit, n, j) + serialize_ct_body(ct)


def serialize_share(share: CipherShare) -> bytes:
    return _pack_share(share.commitment, share.share_count, share.party_index, share.as_ciphertext())


def serialize_partial(p: PartialResult) -> bytes:
    """Share frame carrying a degree-2 partial (record id travels outside the frame)."""
    return _pack_share(p.commitment, p.share_count, p.party_index, p.value)


def read_share_frame(buf, offset: int = 0) -> tuple[tuple[bytes, int, int, Ciphertext], int]:
    if bytes(buf[offset:offset + len(SH_MAGIC)]) != SH_MAGIC:
        raise FragError(ErrorCode.MALFORMED_FRAME, "bad share magic")
    offset += len(SH_MAGIC)
    if len(buf) - offset < _SH_HEAD.size:
        raise FragError(ErrorCode.MALFORMED_FRAME, "truncated share header")
    commit, n, j = _SH_HEAD.unpack_from(buf, offset)
    ct, end = read_ct_body(buf, offset + _SH_HEAD.size)
    return (bytes(commit), n, j, ct), end


def deserialize_share(buf: bytes) -> CipherShare:
    (commit, n, j, ct), end = read_share_frame(buf)
    if end != len(buf):
        raise FragError(ErrorCode.MALFORMED_FRAME, "trailing bytes after share frame")
    if ct.degree != 1:
        raise FragError(ErrorCode.MALFORMED_FRAME, "share frame must embed a degree-1 body")
    return CipherShare(j, n, ct.data, ct.scale_exp, commit, ct.params_id)


def deserialize_partial(buf, record_id: int = 0, offset: int = 0) -> tuple[PartialResult, int]:
    (commit, n, j, ct), end = read_share_frame(buf, offset)
    return PartialResult(j, record_id, ct, commit, n), end


def record_commitment(element_commitments: Iterable[bytes]) -> bytes:
    """Digest binding a whole record's element commitments, in order."""
    h = hashlib.sha256(b"frag-record-v1")
    for c in element_commitments:
        h.update(c)
    return h.digest()

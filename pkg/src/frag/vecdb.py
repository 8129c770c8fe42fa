"""Encrypted vector store: ingestion, inner-product scoring, persistence.

Also holds the record-level share tables used by share-split retrieval.
A table for party j < n stores only a seed; the share polynomials are
re-expanded from (seed, record_id, j) when scoring.  Party n keeps the
explicit residual.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from frag.cache import PivotCache, cache_enc_many, normalize
from frag.errors import ErrorCode, FragError
from frag.he import _kernels as K
from frag.he.cipher import Ciphertext, PublicKey, default_rng, encrypt_many, make_ct
from frag.he.codec import read_ct_frame, serialize_ct
from frag.he.params import context_for
from frag.sharing import PartialResult, commitment, record_commitment, uniform_residues

VDB_MAGIC = b"FRAGVDB1"
VDB_VERSION = 1
_VDB_HEAD = struct.Struct("<H32sIQ")
_REC_HEAD = struct.Struct("<Qd")


@dataclass(frozen=True, eq=False)
class VectorRecord:
    id: int
    elems: np.ndarray  # (m, 2, L, N) evaluation form, scale_exp 1
    params_id: bytes
    delta: float = 1.0

    @property
    def dim(self) -> int:
        return self.elems.shape[0]

    def element(self, i: int) -> Ciphertext:
        return make_ct(self.elems[i], 1, self.params_id)

    def __eq__(self, other):
        if not isinstance(other, VectorRecord):
            return NotImplemented
        return (self.id == other.id and self.params_id == other.params_id
                and np.float64(self.delta).tobytes() == np.float64(other.delta).tobytes()
                and np.array_equal(self.elems, other.elems))


@dataclass(eq=False)
class VectorStore:
    params_id: bytes
    dim: int
    records: list[VectorRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise FragError(ErrorCode.DUPLICATE_ID, f"id {r.id}")
            if r.dim != self.dim:
                raise FragError(ErrorCode.DIM_MISMATCH, f"record {r.id} has dim {r.dim}, store {self.dim}")
            seen.add(r.id)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[VectorRecord]:
        return iter(self.records)

    @property
    def ids(self) -> list[int]:
        return [r.id for r in self.records]

    def __eq__(self, other):
        if not isinstance(other, VectorStore):
            return NotImplemented
        return (self.params_id == other.params_id and self.dim == other.dim
                and len(self) == len(other) and all(a == b for a, b in zip(self.records, other.records)))


@dataclass(frozen=True, eq=False)
class EncryptedScore:
    record_id: int
    score_ct: Ciphertext

    @property
    def scale_exp(self) -> int:
        return self.score_ct.scale_exp


# ---------------------------------------------------------------------------
# ingestion


def _check_rows(plain_vectors, deltas) -> tuple[list[int], np.ndarray, list[float]]:
    ids, rows = [], []
    seen = set()
    dim = None
    for i, (rid, vec) in enumerate(plain_vectors):
        rid = int(rid)
        if not 0 <= rid < 1 << 64:
            raise FragError(ErrorCode.INVALID_CONFIG, f"row {i}: id {rid} is not a 64-bit unsigned integer", row=i)
        v = np.asarray(vec, dtype=np.float64).ravel()
        if dim is None:
            dim = len(v)
        elif len(v) != dim:
            raise FragError(ErrorCode.DIM_MISMATCH, f"row {i}: dim {len(v)} != {dim}", row=i)
        if rid in seen:
            raise FragError(ErrorCode.DUPLICATE_ID, f"row {i}: duplicate id {rid}", row=i)
        seen.add(rid)
        ids.append(rid)
        rows.append(v)
    mat = np.stack(rows) if rows else np.empty((0, 0))
    deltas = [1.0] * len(ids) if deltas is None else [float(d) for d in deltas]
    if len(deltas) != len(ids):
        raise FragError(ErrorCode.DIM_MISMATCH, "one delta per record required")
    return ids, mat, deltas


def iter_ingest(plain_vectors, pk: PublicKey, cache: PivotCache | None = None, *,
                deltas: Sequence[float] | None = None, rng: np.random.Generator | None = None
                ) -> Iterator[VectorRecord]:
    """Validate all rows, then encrypt and yield records one at a time."""
    ids, mat, deltas = _check_rows(plain_vectors, deltas)
    if cache is None:
        bad = ~np.isfinite(mat) | (np.abs(mat) > 1.0)
        if bad.any():
            i, j = map(int, np.argwhere(bad)[0])
            raise FragError(ErrorCode.PLAINTEXT_OUT_OF_RANGE, f"row {i} element {j}: {mat[i, j]} not in [-1, 1]",
                            row=i)
    else:
        for i, (row, d) in enumerate(zip(mat, deltas)):
            scaled = row * d
            worst = int(np.argmax(np.abs(scaled))) if len(row) else 0
            if len(row) and (not np.isfinite(scaled).all() or cache.cfg.grid(scaled[worst]) >> cache.cfg.pivot_count):
                raise FragError(ErrorCode.REPRESENTATION_OVERFLOW,
                                f"row {i}: |{scaled[worst]}| exceeds {cache.cfg.max_magnitude:g}", row=i)
    rng = rng or default_rng()
    for rid, row, d in zip(ids, mat, deltas):
        if cache is None:
            elems = encrypt_many(row * d, pk, rng)
        else:
            elems = _cached_elems(row * d, cache)
        elems.flags.writeable = False
        yield VectorRecord(rid, elems, pk.params_id, d)


def _cached_elems(values: np.ndarray, cache: PivotCache) -> np.ndarray:
    if cache.pool_size() < len(values):
        # bulk ingestion cannot wait on the background refill
        cache.refill(max(cache.cfg.zero_pool_size, len(values)))
    return cache_enc_many(values, cache)


def ingest(plain_vectors, pk: PublicKey, cache: PivotCache | None = None, *,
           deltas: Sequence[float] | None = None, rng: np.random.Generator | None = None,
           dim: int | None = None) -> VectorStore:
    plain_vectors = list(plain_vectors)
    records = list(iter_ingest(plain_vectors, pk, cache, deltas=deltas, rng=rng))
    if records:
        dim = records[0].dim
    return VectorStore(pk.params_id, dim or 0, records)


# ---------------------------------------------------------------------------
# scoring


@dataclass(frozen=True, eq=False)
class PreparedQuery:
    """Stacked query ciphertexts plus Shoup companions, built once per query."""
    data: np.ndarray  # (m, 2, L, N)
    comp: np.ndarray
    scale_exp: int
    params_id: bytes

    @property
    def dim(self) -> int:
        return self.data.shape[0]


def prepare_query(enc_query: Sequence[Ciphertext] | PreparedQuery) -> PreparedQuery:
    if isinstance(enc_query, PreparedQuery):
        return enc_query
    if not enc_query:
        raise FragError(ErrorCode.DIM_MISMATCH, "empty query")
    first = enc_query[0]
    for ct in enc_query:
        if ct.degree != 1:
            raise FragError(ErrorCode.DEPTH_EXCEEDED, "query elements must be degree 1")
        if ct.params_id != first.params_id:
            raise FragError(ErrorCode.PARAMS_MISMATCH, "query elements use different parameters")
        if ct.scale_exp != first.scale_exp:
            raise FragError(ErrorCode.SCALE_MISMATCH, "query elements differ in scale")
    data = np.stack([ct.data for ct in enc_query])
    return PreparedQuery(data, first.context.companions(data), first.scale_exp, first.params_id)


def dot_data(elems: np.ndarray, q: PreparedQuery) -> np.ndarray:
    ctx = context_for(q.params_id)
    out = np.empty((3, ctx.L, ctx.n), dtype=np.uint64)
    K.tensor_dot(elems, q.data, q.comp, out, ctx.moduli)
    return out


def score(record: VectorRecord, enc_query) -> EncryptedScore:
    q = prepare_query(enc_query)
    if q.dim != record.dim:
        raise FragError(ErrorCode.DIM_MISMATCH, f"query dim {q.dim} != record dim {record.dim}")
    if q.params_id != record.params_id:
        raise FragError(ErrorCode.PARAMS_MISMATCH, "query and record use different parameters")
    ct = make_ct(dot_data(record.elems, q), 1 + q.scale_exp, q.params_id)
    if record.delta != 1.0:
        # (sum_i a_i) * c equals sum_i (a_i * c) exactly mod q, so scaling the
        # sum is the same ciphertext as normalizing every element first
        ct = normalize(ct, record.delta)
    return EncryptedScore(record.id, ct)


def scan(store: VectorStore, enc_query, workers: int = 1) -> list[EncryptedScore]:
    q = prepare_query(enc_query) if len(store) else None
    if q is None:
        return []
    if q.dim != store.dim:
        raise FragError(ErrorCode.DIM_MISMATCH, f"query dim {q.dim} != store dim {store.dim}")
    if workers <= 1:
        return [score(r, q) for r in store.records]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda r: score(r, q), store.records))


# ---------------------------------------------------------------------------
# share tables


@dataclass(frozen=True, eq=False)
class ShareRecord:
    record_id: int
    commitment: bytes
    data: np.ndarray | None = None  # explicit residual (party n only)
    delta: float = 1.0


@dataclass(eq=False)
class ShareTable:
    party_index: int
    share_count: int
    params_id: bytes
    dim: int
    seed: int
    records: list[ShareRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def share_data(self, rec: ShareRecord) -> np.ndarray:
        if rec.data is not None:
            return rec.data
        return expand_share(self.params_id, self.dim, self.seed, rec.record_id, self.party_index)

    def partials(self, enc_query) -> list[PartialResult]:
        """Per-record partial scores for this party."""
        q = prepare_query(enc_query) if self.records else None
        if q is None:
            return []
        if q.dim != self.dim:
            raise FragError(ErrorCode.DIM_MISMATCH, f"query dim {q.dim} != table dim {self.dim}")
        if q.params_id != self.params_id:
            raise FragError(ErrorCode.PARAMS_MISMATCH, "query and share table use different parameters")
        out = []
        for rec in self.records:
            ct = make_ct(dot_data(self.share_data(rec), q), 1 + q.scale_exp, self.params_id)
            if rec.delta != 1.0:
                ct = normalize(ct, rec.delta)
            out.append(PartialResult(self.party_index, rec.record_id, ct, rec.commitment, self.share_count))
        return out


def expand_share(params_id: bytes, dim: int, seed: int, record_id: int, party: int) -> np.ndarray:
    rng = np.random.default_rng([seed, record_id, party])
    return uniform_residues(context_for(params_id), (dim, 2), rng)


def split_store(records: Iterable[VectorRecord], n: int, seed: int, *, params_id: bytes, dim: int
                ) -> list[ShareTable]:
    """Split every record n ways.  Accepts any iterable so callers can stream."""
    if n < 1:
        raise FragError(ErrorCode.INVALID_SHARE_COUNT, f"n={n}")
    tables = [ShareTable(j, n, params_id, dim, seed) for j in range(1, n + 1)]
    ctx = context_for(params_id)
    for rec in records:
        digest = record_commitment(commitment(rec.element(i)) for i in range(rec.dim))
        residual = np.array(rec.elems)
        for j in range(1, n):
            K.sub_mod(residual.reshape(-1, ctx.L, ctx.n),
                      expand_share(params_id, dim, seed, rec.id, j).reshape(-1, ctx.L, ctx.n),
                      residual.reshape(-1, ctx.L, ctx.n), ctx.moduli)
            tables[j - 1].records.append(ShareRecord(rec.id, digest, None, rec.delta))
        residual.flags.writeable = False
        tables[n - 1].records.append(ShareRecord(rec.id, digest, residual, rec.delta))
    return tables


def merge_record(tables: Sequence[ShareTable], record_id: int) -> np.ndarray:
    """Reassemble one record's element data from a full set of tables (testing aid)."""
    ctx = context_for(tables[0].params_id)
    acc = None
    for t in tables:
        rec = next(r for r in t.records if r.record_id == record_id)
        d = t.share_data(rec)
        if acc is None:
            acc = np.array(d)
        else:
            K.add_mod(acc.reshape(-1, ctx.L, ctx.n), d.reshape(-1, ctx.L, ctx.n),
                      acc.reshape(-1, ctx.L, ctx.n), ctx.moduli)
    return acc


# ---------------------------------------------------------------------------
# persistence


def save(store: VectorStore, path) -> None:
    try:
        with open(path, "wb") as f:
            f.write(VDB_MAGIC + _VDB_HEAD.pack(VDB_VERSION, store.params_id, store.dim, len(store)))
            for r in store.records:
                f.write(_REC_HEAD.pack(r.id, r.delta))
                for i in range(r.dim):
                    f.write(serialize_ct(r.element(i)))
    except OSError as e:
        raise FragError(ErrorCode.IO_ERROR, str(e)) from e


def load(path, params_id: bytes | None = None) -> VectorStore:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise FragError(ErrorCode.IO_ERROR, str(e)) from e
    if buf[:8] != VDB_MAGIC or len(buf) < 8 + _VDB_HEAD.size:
        raise FragError(ErrorCode.MALFORMED_FILE, "not a vector store file")
    version, pid, dim, count = _VDB_HEAD.unpack_from(buf, 8)
    if version != VDB_VERSION:
        raise FragError(ErrorCode.MALFORMED_FILE, f"unsupported store version {version}")
    if params_id is not None and pid != params_id:
        raise FragError(ErrorCode.PARAMS_MISMATCH, "store was written under other parameters")
    context_for(pid)
    off = 8 + _VDB_HEAD.size
    records = []
    try:
        for _ in range(count):
            if len(buf) - off < _REC_HEAD.size:
                raise FragError(ErrorCode.MALFORMED_FILE, "truncated record header")
            rid, delta = _REC_HEAD.unpack_from(buf, off)
            off += _REC_HEAD.size
            elems = []
            for _ in range(dim):
                ct, off = read_ct_frame(buf, off)
                if ct.params_id != pid or ct.degree != 1 or ct.scale_exp != 1:
                    raise FragError(ErrorCode.MALFORMED_FILE, f"record {rid}: foreign element frame")
                elems.append(ct.data)
            data = np.stack(elems) if elems else np.empty((0, 2, 0, 0), np.uint64)
            data.flags.writeable = False
            records.append(VectorRecord(rid, data, pid, delta))
    except FragError as e:
        if e.code == ErrorCode.MALFORMED_FRAME:
            raise FragError(ErrorCode.MALFORMED_FILE, e.message) from e
        raise
    if off != len(buf):
        raise FragError(ErrorCode.MALFORMED_FILE, "trailing bytes in store file")
    return VectorStore(pid, dim, records)


SHT_MAGIC = b"FRAGSHT1"
_SHT_HEAD = struct.Struct("<HH32sIQQ")
_SHT_REC = struct.Struct("<Qd32sB")


def save_shares(table: ShareTable, path) -> None:
    """Share table file: header, then per record id, delta, commitment and (party n) residual frames."""
    ctx = context_for(table.params_id)
    try:
        with open(path, "wb") as f:
            f.write(SHT_MAGIC + _SHT_HEAD.pack(table.party_index, table.share_count, table.params_id,
                                               table.dim, table.seed, len(table)))
            for rec in table.records:
                f.write(_SHT_REC.pack(rec.record_id, rec.delta, rec.commitment, rec.data is not None))
                if rec.data is not None:
                    f.write(ctx.to_coeffs(rec.data).astype("<u8", copy=False).tobytes())
    except OSError as e:
        raise FragError(ErrorCode.IO_ERROR, str(e)) from e


def load_shares(path) -> ShareTable:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise FragError(ErrorCode.IO_ERROR, str(e)) from e
    if buf[:8] != SHT_MAGIC or len(buf) < 8 + _SHT_HEAD.size:
        raise FragError(ErrorCode.MALFORMED_FILE, "not a share table file")
    j, n, pid, dim, seed, count = _SHT_HEAD.unpack_from(buf, 8)
    ctx = context_for(pid)
    table = ShareTable(j, n, bytes(pid), dim, seed)
    off = 8 + _SHT_HEAD.size
    body = dim * 2 * ctx.L * ctx.n
    for _ in range(count):
        if len(buf) - off < _SHT_REC.size:
            raise FragError(ErrorCode.MALFORMED_FILE, "truncated share record")
        rid, delta, digest, has_data = _SHT_REC.unpack_from(buf, off)
        off += _SHT_REC.size
        data = None
        if has_data:
            if len(buf) - off < 8 * body:
                raise FragError(ErrorCode.MALFORMED_FILE, "truncated residual")
            coeffs = np.frombuffer(buf, "<u8", body, off).astype(np.uint64).reshape(dim, 2, ctx.L, ctx.n)
            off += 8 * body
            data = ctx.to_eval(coeffs)
            data.flags.writeable = False
        table.records.append(ShareRecord(rid, bytes(digest), data, delta))
    if off != len(buf):
        raise FragError(ErrorCode.MALFORMED_FILE, "trailing bytes in share table file")
    return table

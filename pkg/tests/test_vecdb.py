import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from frag.errors import ErrorCode, FragError
from frag.he import CipherParams, decrypt, decrypt_many, encrypt, eval_mul_cipher, keygen, make_ct
from frag.he.cipher import encrypt_many
from frag.vecdb import (
    VectorRecord, VectorStore, ingest, load, load_shares, merge_record, save, save_shares, scan, score, split_store,
)
from frag.sharing import aggregate_partials


def code_of(fn, *args, **kw):
    with pytest.raises(FragError) as e:
        fn(*args, **kw)
    return e.value.code


def enc_query(q, pk, seed=0):
    return [make_ct(d, 1, pk.params_id) for d in encrypt_many(q, pk, np.random.default_rng(seed))]


def test_empty_ingest(pk):
    store = ingest([], pk)
    assert len(store) == 0 and scan(store, enc_query([0.1], pk)) == []


def test_ingest_elements_decrypt(pk, sk):
    rng = np.random.default_rng(4)
    mat = rng.normal(size=(1000, 64))
    mat /= np.linalg.norm(mat, axis=1, keepdims=True)
    store = ingest(list(zip(range(1000), mat)), pk, rng=rng)
    assert len(store) == 1000 and sum(r.dim for r in store) == 64_000
    assert store.ids == list(range(1000))
    cts = [r.element(i) for r in store for i in range(r.dim)]
    got = np.array(decrypt_many(cts, sk)).reshape(mat.shape)
    assert np.abs(got - mat).max() < 1e-6


def test_ingest_errors(pk, cache):
    assert code_of(ingest, [(1, [0.1]), (1, [0.2])], pk) == ErrorCode.DUPLICATE_ID
    assert code_of(ingest, [(1, [0.1]), (2, [0.2, 0.3])], pk) == ErrorCode.DIM_MISMATCH
    assert code_of(ingest, [(1, [1.5])], pk) == ErrorCode.PLAINTEXT_OUT_OF_RANGE
    assert code_of(ingest, [(1, [1000.0])], pk, cache) == ErrorCode.REPRESENTATION_OVERFLOW
    assert code_of(ingest, [(-1, [0.1])], pk) == ErrorCode.INVALID_CONFIG


def test_cached_ingest_matches_grid(pk, sk, cache):
    rows = [(7, [0.5, -0.25, 0.333]), (9, [1.0, 0.0, -1.0])]
    store = ingest(rows, pk, cache)
    got = [decrypt(store.records[0].element(i), sk) for i in range(3)]
    assert np.allclose(got, [0.5, -0.25, round(0.333 * 1024) / 1024], atol=1e-6)


def test_score_examples(pk, sk):
    store = ingest([(1, [1.0, 0.0, 0.0]), (2, [0.3, -0.2, 0.9])], pk)
    zero = scan(store, enc_query([0.0, 0.0, 0.0], pk))
    assert all(abs(decrypt(s.score_ct, sk)) < 1e-6 for s in zero)
    e1 = score(store.records[0], enc_query([1.0, 0.0, 0.0], pk))
    assert e1.score_ct.degree == 2 and e1.scale_exp == 2
    assert abs(decrypt(e1.score_ct, sk) - 1.0) < 1e-6


def test_score_768(pk, sk):
    rng = np.random.default_rng(8)
    v, q = rng.uniform(-1, 1, 768), rng.uniform(-1, 1, 768)
    store = ingest([(0, v)], pk, rng=rng)
    got = decrypt(score(store.records[0], enc_query(q, pk)).score_ct, sk)
    assert abs(got - v @ q) <= max(1e-6, 1e-3 * abs(v @ q))


def test_scan_matches_oracle(pk, sk):
    rng = np.random.default_rng(9)
    mat = rng.uniform(-1, 1, (100, 16))
    ids = rng.permutation(10_000)[:100]
    store = ingest(list(zip(ids, mat)), pk, rng=rng)
    q = rng.uniform(-1, 1, 16)
    scores = scan(store, enc_query(q, pk), workers=2)
    assert [s.record_id for s in scores] == list(ids)
    got = np.array(decrypt_many([s.score_ct for s in scores], sk))
    assert np.abs(got - mat @ q).max() < 1e-3


def test_score_equals_sum_of_products(pk):
    store = ingest([(1, [0.3, -0.7])], pk)
    q = enc_query([0.5, 0.5], pk)
    rec = store.records[0]
    from frag.he import eval_add
    explicit = eval_add(eval_mul_cipher(rec.element(0), q[0]), eval_mul_cipher(rec.element(1), q[1]))
    assert score(rec, q).score_ct == explicit


@given(st.permutations(range(6)))
def test_order_invariance(pk, sk, perm):
    rng = np.random.default_rng(3)
    v, q = rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)
    rec = ingest([(0, v)], pk, rng=rng).records[0]
    qc = enc_query(q, pk)
    base = decrypt(score(rec, qc).score_ct, sk)
    perm = list(perm)
    moved = VectorRecord(0, rec.elems[perm], pk.params_id)
    assert abs(decrypt(score(moved, [qc[i] for i in perm]).score_ct, sk) - base) < 2e-6


def test_delta_normalization(pk, sk, cache):
    v, q = np.array([0.5, 0.25]), np.array([0.5, -1.0])
    for delta in (0.5, 4.0, 32.0):
        rec = ingest([(0, v)], pk, cache, deltas=[delta]).records[0]
        s = score(rec, enc_query(q, pk))
        assert s.scale_exp == 3
        assert abs(decrypt(s.score_ct, sk) - v @ q) < 1e-3


def test_score_errors(pk):
    store = ingest([(1, [0.1, 0.2])], pk)
    assert code_of(scan, store, enc_query([0.1], pk)) == ErrorCode.DIM_MISMATCH
    c2 = eval_mul_cipher(encrypt(0.1, pk), encrypt(0.1, pk))
    assert code_of(score, store.records[0], [c2, c2]) == ErrorCode.DEPTH_EXCEEDED


def test_store_invariants(pk):
    rec = ingest([(1, [0.1, 0.2])], pk).records[0]
    with pytest.raises(FragError) as e:
        VectorStore(pk.params_id, 2, [rec, rec])
    assert e.value.code == ErrorCode.DUPLICATE_ID
    with pytest.raises(FragError) as e:
        VectorStore(pk.params_id, 3, [rec])
    assert e.value.code == ErrorCode.DIM_MISMATCH


def test_persistence(tmp_path, pk, cache):
    store = ingest([(5, [0.1, -0.2]), (2, [0.3, 0.4]), (9, [0.0, 1.0])], pk, cache, deltas=[1.0, 2.0, 0.5])
    path = tmp_path / "s.vdb"
    save(store, path)
    back = load(path, pk.params_id)
    assert back == store and back.ids == [5, 2, 9]
    save(back, tmp_path / "again.vdb")
    assert (tmp_path / "again.vdb").read_bytes() == path.read_bytes()
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + raw[8:])
    assert code_of(load, tmp_path / "bad") == ErrorCode.MALFORMED_FILE
    (tmp_path / "short").write_bytes(raw[:-1])
    assert code_of(load, tmp_path / "short") == ErrorCode.MALFORMED_FILE
    other, _ = keygen(CipherParams(scale_bits=30), 0)
    assert code_of(load, path, other.params_id) == ErrorCode.PARAMS_MISMATCH
    assert code_of(load, tmp_path / "nope") == ErrorCode.IO_ERROR
    assert code_of(save, store, tmp_path / "no" / "dir.vdb") == ErrorCode.IO_ERROR


def test_empty_store_round_trip(tmp_path, pk):
    store = VectorStore(pk.params_id, 0, [])
    save(store, tmp_path / "e.vdb")
    assert load(tmp_path / "e.vdb") == store


def test_share_tables(tmp_path, pk, sk):
    rng = np.random.default_rng(12)
    mat = rng.uniform(-1, 1, (5, 4))
    store = ingest(list(zip(range(10, 15), mat)), pk, rng=rng)
    tables = split_store(store.records, 3, seed=77, params_id=pk.params_id, dim=4)
    for rec in store:
        assert np.array_equal(merge_record(tables, rec.id), rec.elems)
    q = rng.uniform(-1, 1, 4)
    qc = enc_query(q, pk)
    per_party = [t.partials(qc) for t in tables]
    local = scan(store, qc)
    for i, s in enumerate(local):
        agg = aggregate_partials([p[i] for p in per_party])
        assert agg == s.score_ct
    for t in tables:
        save_shares(t, tmp_path / f"t{t.party_index}")
        back = load_shares(tmp_path / f"t{t.party_index}")
        assert (back.party_index, back.share_count, back.seed, back.dim) == (t.party_index, 3, 77, 4)
        for a, b in zip(back.records, t.records):
            assert a.record_id == b.record_id and a.commitment == b.commitment
            assert np.array_equal(back.share_data(a), t.share_data(b))
    assert tables[0].records[0].data is None and tables[2].records[0].data is not None

"""``frag`` command line.

Exit codes: 0 success, 1 other failure, 2 network, 3 contract violation,
64 usage.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from frag import bench
from frag.cache import CacheConfig, build_pivots, load_cache, save_cache
from frag.config import load_config, parse_address
from frag.errors import ErrorCode, FragError
from frag.federation import Federation, FederationConfig, Mode, Node, NodeServer, audit_complexity
from frag.federation.client import SOCKET, aggregate, client_finalize
from frag.federation.wire import parse_mode
from frag.he.cipher import keygen
from frag.he.codec import deserialize_pk, deserialize_sk, serialize_pk, serialize_sk
from frag.vecdb import ShareTable, VectorStore, iter_ingest, load, load_shares, save, save_shares, split_store

EXIT_OK, EXIT_FAIL, EXIT_NETWORK, EXIT_CONTRACT, EXIT_USAGE = 0, 1, 2, 3, 64
_EXIT = {
    ErrorCode.NODE_UNREACHABLE: EXIT_NETWORK,
    ErrorCode.BIND_FAILURE: EXIT_NETWORK,
    ErrorCode.CONTRACT_VIOLATION: EXIT_CONTRACT,
    ErrorCode.USAGE: EXIT_USAGE,
    ErrorCode.UNKNOWN_SUITE: EXIT_USAGE,
}

BENCH_HELP = """CSV columns: suite, series, axis, axis_value, median, p10, p90, unit, ops, samples,
rss_kb, stamp.  median/p10/p90 are seconds per sample unless unit says otherwise;
stamp is a ';'-joined key=value list (params digest, seed, library versions, cores)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FragError(ErrorCode.IO_ERROR, str(e)) from e


def _write(path, data: bytes, mode: int | None = None) -> None:
    try:
        if mode is not None:
            fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, mode)
            with os.fdopen(fd, "wb") as f:
                f.write(data)
            os.chmod(path, mode)
        else:
            Path(path).write_bytes(data)
    except OSError as e:
        raise FragError(ErrorCode.IO_ERROR, str(e)) from e


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _read_csv_rows(path) -> list[tuple[int, list[str]]]:
    """(line number, cells) for every non-empty row; a non-numeric first row is a header."""
    try:
        with open(path, newline="", encoding="utf-8") as f:
            rows = [(i + 1, r) for i, r in enumerate(csv.reader(f)) if r and any(c.strip() for c in r)]
    except OSError as e:
        raise FragError(ErrorCode.IO_ERROR, str(e)) from e
    if rows:
        try:
            float(rows[0][1][0])
        except ValueError:
            rows = rows[1:]
    return rows


# ---------------------------------------------------------------------------
# commands


def cmd_keygen(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    if not out.is_dir():
        raise FragError(ErrorCode.IO_ERROR, f"output directory {out} does not exist")
    pk, sk = keygen(cfg.params, args.seed)
    _write(out / "frag.pk", serialize_pk(pk))
    _write(out / "frag.sk", serialize_sk(sk), 0o600)
    print(f"wrote {out / 'frag.pk'} and {out / 'frag.sk'} (params {pk.params_id.hex()[:16]})")
    return EXIT_OK


def _cache_config(args, base: CacheConfig) -> CacheConfig:
    kw = {}
    if getattr(args, "pivots", None) is not None:
        kw["pivot_count"] = args.pivots
    if getattr(args, "frac_bits", None) is not None:
        kw["frac_bits"] = args.frac_bits
    if getattr(args, "zero_pool", None) is not None:
        kw["zero_pool_size"] = args.zero_pool
    cfg = CacheConfig(**{**base.__dict__, **kw})
    if cfg.capacity < cfg.pivot_count + cfg.zero_pool_size:
        cfg = CacheConfig(**{**cfg.__dict__, "capacity": cfg.pivot_count + cfg.zero_pool_size})
    return cfg


def cmd_cache_build(args) -> int:
    pk = deserialize_pk(_read(args.pk))
    cfg = _cache_config(args, load_config(args.config).cache)
    cache = build_pivots(pk, cfg, auto_refill=False, rng=np.random.default_rng(args.seed))
    save_cache(cache, args.out)
    lo, hi = cache.representable
    print(f"wrote {args.out}: P={cfg.pivot_count} frac_bits={cfg.frac_bits} range [-{hi:g}, {hi:g}]")
    return EXIT_OK


def cmd_ingest(args) -> int:
    pk = deserialize_pk(_read(args.pk))
    rows = _read_csv_rows(args.csv)
    lines = [ln for ln, _ in rows]
    vectors = []
    for ln, cells in rows:
        try:
            vectors.append((int(cells[0]), [float(c) for c in cells[1:]]))
        except ValueError as e:
            raise FragError(ErrorCode.MALFORMED_FILE, f"line {ln}: {e}") from e
    cache = None
    if args.cache or args.cache_file:
        if args.cache_file and Path(args.cache_file).exists():
            cache = load_cache(args.cache_file, pk, auto_refill=False)
        else:
            cfg = _cache_config(args, load_config(args.config).cache)
            cache = build_pivots(pk, cfg, auto_refill=False, rng=np.random.default_rng(args.seed))
    rng = np.random.default_rng(args.seed)
    try:
        records = list(iter_ingest(vectors, pk, cache, rng=rng))
    except FragError as e:
        if "row" in e.details:
            raise FragError(e.code, f"CSV line {lines[e.details['row']]}: {e.message}", **e.details) from e
        raise
    dim = records[0].dim if records else 0
    store = VectorStore(pk.params_id, dim, records)
    save(store, args.store)
    msg = f"wrote {args.store}: {len(store)} records x {dim} dims"
    if args.split:
        for t in split_store(records, args.split, args.seed, params_id=pk.params_id, dim=dim):
            save_shares(t, f"{args.store}.share{t.party_index}")
        msg += f"; {args.split} share tables {args.store}.share1..{args.split}"
    if cache is not None and args.cache_file:
        save_cache(cache, args.cache_file)
    print(msg)
    return EXIT_OK


def cmd_serve(args) -> int:
    if not (args.store or args.shares):
        raise FragError(ErrorCode.USAGE, "serve needs --store and/or --shares")
    # loading needs the parameter context, which the key file registers
    pk = deserialize_pk(_read(args.pk))
    store = load(args.store, pk.params_id) if args.store else None
    shares: ShareTable | None = load_shares(args.shares) if args.shares else None
    node_id = args.node_id or (shares.party_index if shares else 1)
    host, port = parse_address(args.listen)
    server = NodeServer(Node(node_id, pk.params_id, store, shares), host, port)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    h, p = server.address
    print(f"node {node_id} listening on {h}:{p}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def cmd_query(args) -> int:
    if args.k < 1:
        raise FragError(ErrorCode.USAGE, f"k must be >= 1, got {args.k}")
    cfg = load_config(args.config)
    pk = deserialize_pk(_read(args.pk))
    sk = deserialize_sk(_read(args.sk))
    nodes = [parse_address(a) for a in args.nodes.split(",")] if args.nodes else cfg.nodes
    if not nodes:
        raise FragError(ErrorCode.USAGE, "no nodes given (--nodes or config 'nodes')")
    rows = _read_csv_rows(args.query)
    if not rows:
        raise FragError(ErrorCode.DIM_MISMATCH, "query file is empty")
    q = [float(c) for c in rows[0][1]]
    mode = parse_mode(args.mode or cfg.mode)
    fcfg = FederationConfig(n=len(nodes), mode=mode, k=args.k, transport=SOCKET, addresses=nodes)
    fed = Federation(fcfg, pk)
    qid = fed.submit(q)
    agg = aggregate(fed.partials[qid], fcfg)
    top = client_finalize(agg, sk, args.k, fed.logs[qid])
    print("rank,id,score")
    for rank, (rid, s) in enumerate(top, 1):
        print(f"{rank},{rid},{s:.6f}")
    report = audit_complexity(fed.logs[qid], len(q), len(nodes), mode, pk.params_id)
    if args.audit_out:
        _write(args.audit_out, report.csv().encode())
    return EXIT_OK


def cmd_bench(args) -> int:
    pk = deserialize_pk(_read(args.pk))
    sk = deserialize_sk(_read(args.sk)) if args.sk else None
    opts = {}
    if args.quick:
        opts = {"mc": dict(reps=200), "pivots": dict(reps=100), "primitives": dict(dims=(64,)),
                "speedup": dict(records=200), "threads": dict(records=16), "weak": {}}.get(args.suite, {})
    report = bench.run_suite(args.suite, pk, sk, seed=args.seed, **opts)
    report.write(args.out)
    print(report.csv(), end="")
    return EXIT_OK


def cmd_stats(args) -> int:
    pk = deserialize_pk(_read(args.pk))
    cache = load_cache(args.cache, pk, auto_refill=False)
    row = cache.stats.as_row()
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow([*row, "entries", "pool_size", "pivot_count", "frac_bits"])
    w.writerow([*row.values(), len(cache), cache.pool_size(), cache.cfg.pivot_count, cache.cfg.frac_bits])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="frag", description="Federated encrypted vector search.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("keygen", help="write frag.pk / frag.sk")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default=".")
    s.set_defaults(fn=cmd_keygen)

    s = sub.add_parser("cache-build", help="precompute pivots and zero pool into a cache file")
    s.add_argument("--pk", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--pivots", type=int)
    s.add_argument("--frac-bits", type=int)
    s.add_argument("--zero-pool", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_cache_build)

    s = sub.add_parser("ingest", help="encrypt a CSV of id,v1..vm rows into a store file")
    s.add_argument("csv")
    s.add_argument("store")
    s.add_argument("--pk", required=True)
    s.add_argument("--config")
    s.add_argument("--cache", action="store_true", help="encrypt through pivot sums")
    s.add_argument("--cache-file", help="load (or create) a persisted pivot cache")
    s.add_argument("--pivots", type=int)
    s.add_argument("--frac-bits", type=int)
    s.add_argument("--zero-pool", type=int)
    s.add_argument("--split", type=_positive, help="also write n share tables STORE.share1..n")
    s.add_argument("--seed", type=int)
    s.set_defaults(fn=cmd_ingest)

    s = sub.add_parser("serve", help="run a node")
    s.add_argument("--pk", required=True)
    s.add_argument("--store")
    s.add_argument("--shares")
    s.add_argument("--listen", default="127.0.0.1:7400")
    s.add_argument("--node-id", type=_positive)
    s.set_defaults(fn=cmd_serve)

    s = sub.add_parser("query", help="query nodes; prints rank,id,score")
    s.add_argument("query", help="CSV file whose first row holds the query values")
    s.add_argument("--pk", required=True)
    s.add_argument("--sk", required=True)
    s.add_argument("--nodes", help="comma list of host:port, node 1 first")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--mode", choices=[m.name for m in Mode])
    s.add_argument("--config")
    s.add_argument("--audit-out", help="write the round/message audit CSV here")
    s.set_defaults(fn=cmd_query)

    s = sub.add_parser("bench", help="run a benchmark suite", description=BENCH_HELP)
    s.add_argument("suite", help="|".join(bench.SUITES))
    s.add_argument("--pk", required=True)
    s.add_argument("--sk", help="needed by the speedup suite")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--quick", action="store_true", help="reduced repetitions and corpus sizes")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("stats", help="cache counters as CSV")
    s.add_argument("--cache", required=True)
    s.add_argument("--pk", required=True)
    s.set_defaults(fn=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FragError as e:
        print(f"frag: error: {e}", file=sys.stderr)
        return _EXIT.get(e.code, EXIT_FAIL)


if __name__ == "__main__":
    sys.exit(main())

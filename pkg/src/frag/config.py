"""Flat ``key = value`` configuration files (``#`` starts a comment).

Recognised keys::

    ring_degree, moduli (comma list), noise_stddev, scale_bits, rng_seed
    pivot_count, frac_bits, zero_pool_size, ttl_seconds, capacity
    nodes (comma list of host:port), mode, k, transport
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields

from frag.cache import CacheConfig
from frag.errors import ErrorCode, FragError
from frag.he.params import CipherParams

_SECTION = "frag"


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.strip().rpartition(":")
    if not sep or not port.isdigit():
        raise FragError(ErrorCode.INVALID_CONFIG, f"address {text!r} is not host:port")
    return host or "127.0.0.1", int(port)


@dataclass
class FragConfig:
    params: CipherParams = field(default_factory=CipherParams)
    cache: CacheConfig = field(default_factory=CacheConfig)
    nodes: list[tuple[str, int]] = field(default_factory=list)
    mode: str = "LOCAL_SCORE"
    k: int = 10
    transport: str = "SOCKET"


_PARAM_KEYS = {f.name: f.type for f in fields(CipherParams)}
_CACHE_KEYS = {f.name for f in fields(CacheConfig)}


def parse_config(text: str) -> FragConfig:
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(f"[{_SECTION}]\n" + text)
    except configparser.Error as e:
        raise FragError(ErrorCode.INVALID_CONFIG, str(e).splitlines()[0]) from e
    params, cache, cfg = {}, {}, FragConfig()
    try:
        for key, raw in cp[_SECTION].items():
            if key == "moduli":
                params[key] = tuple(int(v, 0) for v in raw.split(",") if v.strip())
            elif key == "noise_stddev":
                params[key] = float(raw)
            elif key in _PARAM_KEYS:
                params[key] = int(raw, 0)
            elif key == "ttl_seconds":
                cache[key] = float(raw)
            elif key in _CACHE_KEYS:
                cache[key] = int(raw, 0)
            elif key == "nodes":
                cfg.nodes = [parse_address(a) for a in raw.split(",") if a.strip()]
            elif key == "mode":
                cfg.mode = raw.strip().upper()
            elif key == "k":
                cfg.k = int(raw)
            elif key == "transport":
                cfg.transport = raw.strip().upper()
            else:
                raise FragError(ErrorCode.INVALID_CONFIG, f"unknown key {key!r}")
    except ValueError as e:
        raise FragError(ErrorCode.INVALID_CONFIG, str(e)) from e
    cfg.params = CipherParams(**params).validate()
    cfg.cache = CacheConfig(**cache).validate(cfg.params.scale_bits)
    return cfg


def load_config(path) -> FragConfig:
    if path is None:
        return FragConfig()
    try:
        with open(path, encoding="utf-8") as f:
            return parse_config(f.read())
    except OSError as e:
        raise FragError(ErrorCode.IO_ERROR, str(e)) from e

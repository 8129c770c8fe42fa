"""Error codes shared by every layer (library, wire ERROR frames, CLI)."""

from __future__ import annotations

from enum import IntEnum


class ErrorCode(IntEnum):
    # values double as the 2-byte code carried in ERROR frames
    INVALID_PARAMS = 1
    PLAINTEXT_OUT_OF_RANGE = 2
    DEGREE_UNSUPPORTED = 3
    PARAMS_MISMATCH = 4
    SCALE_MISMATCH = 5
    DEGREE_MISMATCH = 6
    DEPTH_EXCEEDED = 7
    MALFORMED_FRAME = 8
    INVALID_SHARE_COUNT = 9
    SHARE_SET_INCOMPLETE = 10
    COMMITMENT_MISMATCH = 11
    INVALID_CONFIG = 12
    REPRESENTATION_OVERFLOW = 13
    ZERO_POOL_EMPTY = 14
    DIVIDE_BY_ZERO_SCALE = 15
    DUPLICATE_ID = 16
    DIM_MISMATCH = 17
    IO_ERROR = 18
    MALFORMED_FILE = 19
    NODE_UNREACHABLE = 20
    UNKNOWN_MODE = 21
    DUPLICATE_PARTIAL = 22
    CONTRACT_VIOLATION = 23
    BIND_FAILURE = 24
    UNKNOWN_SUITE = 25
    USAGE = 26


class FragError(Exception):
    """Every failure raised by this package carries an :class:`ErrorCode`."""

    def __init__(self, code: ErrorCode, message: str = "", **details):
        self.code = ErrorCode(code)
        self.message = message
        self.details = details
        super().__init__(f"{self.code.name}: {message}" if message else self.code.name)

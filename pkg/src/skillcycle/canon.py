"""Canonical JSON serialization and digests.

Every persisted or wire-visible value in this package goes through
``canonical_dumps``: keys sorted lexicographically, no insignificant
whitespace, ASCII-escaped. One value, one byte sequence — this is what
makes logs, reports, and stores byte-reproducible.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone


_ENCODER = json.JSONEncoder(sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def canonical_dumps(value) -> str:
    return _ENCODER.encode(value)


def canonical_bytes(value) -> bytes:
    return canonical_dumps(value).encode("ascii")


def digest(value) -> str:
    """Short stable content digest (first 16 hex chars of SHA-256)."""
    return hashlib.sha256(canonical_bytes(value)).hexdigest()[:16]


def rfc3339(epoch_seconds: float) -> str:
    dt = datetime.fromtimestamp(epoch_seconds, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")

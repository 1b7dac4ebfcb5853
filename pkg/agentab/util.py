from __future__ import annotations

import hashlib
import json
import time
from datetime import datetime
from typing import Any

import dateutil.tz as tz
from pydantic import BaseModel

BOLD = "\033[1m"
R = "\033[31m"
G = "\033[32m"
B = "\033[34m"
NC = "\033[0m"
Y = "\033[33m"


def elapsed_time_string(start_time: float) -> str:
    elapsed_time = time.monotonic() - start_time
    if elapsed_time > 60:
        return f"{G}{elapsed_time//60:.0f}m {elapsed_time%60:.0f}s{NC}"
    else:
        return f"{G}{elapsed_time:.1f}s{NC}"


def canonical_json(value: Any) -> str:
    """Serialise to JSON with a stable key order and no whitespace variance"""
    if isinstance(value, BaseModel):
        value = value.model_dump(mode="json")
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def fingerprint(value: Any) -> str:
    """A sha256 hex digest of the canonical JSON form of a value"""
    return hashlib.sha256(canonical_json(value).encode("utf-8")).hexdigest()


def stable_hash(*parts: Any) -> int:
    """Hash arbitrary parts to a 64-bit integer, independent of PYTHONHASHSEED"""
    digest = hashlib.blake2b(
        "\x1f".join(str(p) for p in parts).encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


def derive_seed(seed: int, *parts: Any) -> int:
    """Derive a child seed from a parent seed and some identifying parts"""
    return stable_hash(seed, *parts) & 0x7FFF_FFFF_FFFF_FFFF


def utc_timestamp(ts: float) -> str:
    """Convert a unix timestamp to an ISO 8601 UTC string"""
    return datetime.fromtimestamp(ts, tz=tz.UTC).isoformat()

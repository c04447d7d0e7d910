"""Canonical JSON and 64-bit FNV-1a fingerprints."""

from __future__ import annotations

import json
from typing import Any

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK
    return h


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=True)


def fingerprint(obj: Any) -> str:
    """Hex FNV-1a of the canonical JSON form of ``obj``."""
    return f"{fnv1a64(canonical_json(obj).encode('utf-8')):016x}"

"""Canonical JSON serialization and digests.

Every artifact that gets hashed (genesis files, transactions, blocks,
clearing results) goes through the same canonical form: keys sorted,
no insignificant whitespace, UTF-8, lowercase hex digests.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

ZERO_DIGEST = "0" * 64


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_of(obj: Any) -> str:
    return sha256_hex(canonical_json(obj))

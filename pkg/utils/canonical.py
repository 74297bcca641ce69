"""
Canonical serialization and hashing helpers.
"""
import hashlib
import json
from typing import Any


def canonical_json(obj: Any, pretty: bool = False) -> str:
    """Deterministic JSON text: sorted keys, fixed separators, UTF-8 safe."""
    if pretty:
        return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + '\n'
    return json.dumps(obj, sort_keys=True, separators=(',', ':'), ensure_ascii=False)


def sha256_hex(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()


def json_hash(obj: Any) -> str:
    return sha256_hex(canonical_json(obj).encode('utf-8'))


def to_native(value: Any) -> Any:
    """Unwrap numpy/pandas scalars into plain Python values."""
    if value is None:
        return None
    item = getattr(value, 'item', None)
    if callable(item) and not isinstance(value, (str, bytes)):
        try:
            return item()
        except (TypeError, ValueError):
            return value
    return value

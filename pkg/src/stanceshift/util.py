"""Shared plumbing: seed derivation, canonical JSON, volatile-field stripping."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import Any

import numpy as np


class ValidationError(ValueError):
    """Invalid user input (files, config, labels). The CLI maps this to exit code 1."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, batch_ids=()):
        super().__init__(message)
        self.batch_ids = tuple(batch_ids)


_MASK64 = (1 << 64) - 1

# Output keys that legitimately vary between otherwise identical runs.  Anything
# not listed here must be byte-stable for a fixed seed.
VOLATILE_KEYS = frozenset({"created_at", "wall_clock_sec"})


def subseed(seed: int, *tags: int | str) -> int:
    """Derive a stable 64-bit stream seed from a base seed and a tag path.

    Every subsystem (split, init, sampler, generator, ...) draws its own seed
    through this function so that streams stay independent and reproducible
    regardless of call order.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update((int(seed) & _MASK64).to_bytes(8, "little"))
    for tag in tags:
        if isinstance(tag, str):
            h.update(b"s" + tag.encode("utf-8"))
        else:
            h.update(b"i" + (int(tag) & _MASK64).to_bytes(8, "little"))
    return int.from_bytes(h.digest(), "little")


def rng_for(seed: int, *tags: int | str) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, *tags))


def stable_json_dumps(obj: Any) -> str:
    """Canonical JSON used for every serialized report and manifest."""
    return json.dumps(obj, indent=2, ensure_ascii=True, allow_nan=False)


def strip_volatile(obj: Any) -> Any:
    """Recursively drop volatile keys (timestamps, wall clock) from an object."""
    if isinstance(obj, dict):
        return {k: strip_volatile(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, (list, tuple)):
        return [strip_volatile(v) for v in obj]
    return obj


def stable_digest(obj: Any) -> str:
    """SHA-256 of the canonical JSON with volatile keys removed."""
    payload = stable_json_dumps(strip_volatile(obj)).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def asdict_plain(obj: Any) -> Any:
    """dataclasses.asdict with tuples flattened to lists, for JSON/YAML output."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: asdict_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: asdict_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [asdict_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def require_keys(data: dict, cls, path: str) -> None:
    """Reject unknown keys when building a config dataclass from a mapping."""
    if not isinstance(data, dict):
        raise ValidationError(f"{path}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"{path}: unknown keys {unknown}; known keys are {sorted(known)}")

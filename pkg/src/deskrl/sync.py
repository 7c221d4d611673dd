"""Versioned weight publication over a dumb blob store.

The store contract is get/put/list, nothing else: readers reconstruct any
published version from objects alone and never talk to the writer. Each
version is either a full snapshot or a byte-XOR delta against its parent,
zero-run-length compressed. The manifest (a single JSON object at a fixed
key) is written only after every object it references, so a crash at any
put boundary leaves a consistent prefix.

Wire format of a delta payload:
    varint(raw_len) then records until raw_len bytes are produced
    record = 0x00 varint(n) n literal bytes
           | 0x01 varint(n)            (n zero bytes)
Zero runs shorter than MIN_ZERO_RUN are folded into neighboring literals;
a separate record costs more than it saves below that.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

MANIFEST_KEY = "weights/manifest.json"
SNAPSHOT_INTERVAL = 25
MIN_ZERO_RUN = 9

_LITERAL = 0
_ZEROS = 1


class SyncError(Exception):
    pass


class IntegrityError(SyncError):
    pass


class VersionConflictError(SyncError):
    pass


class SimulatedCrash(RuntimeError):
    """Raised by FaultInjectingStore in place of a process kill."""


class HotloadWarning(UserWarning):
    pass


class Store(Protocol):
    def get(self, key: str) -> bytes: ...

    def put(self, key: str, data: bytes) -> None: ...

    def list(self, prefix: str) -> list[str]: ...


class MemoryStore:
    def __init__(self) -> None:
        self._objects: dict[str, bytes] = {}

    def get(self, key: str) -> bytes:
        try:
            return self._objects[key]
        except KeyError:
            raise SyncError(f"missing object {key!r}") from None

    def put(self, key: str, data: bytes) -> None:
        self._objects[key] = bytes(data)

    def list(self, prefix: str) -> list[str]:
        return sorted(k for k in self._objects if k.startswith(prefix))


class LocalDirStore:
    """Directory-backed store; puts are atomic via write-new-then-rename."""

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, key: str) -> Path:
        if key.startswith("/") or ".." in key.split("/"):
            raise SyncError(f"bad key {key!r}")
        return self.root / key

    def get(self, key: str) -> bytes:
        path = self._path(key)
        try:
            return path.read_bytes()
        except FileNotFoundError:
            raise SyncError(f"missing object {key!r}") from None

    def put(self, key: str, data: bytes) -> None:
        path = self._path(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.parent / f".{path.name}.tmp.{os.getpid()}"
        tmp.write_bytes(data)
        os.replace(tmp, path)

    def list(self, prefix: str) -> list[str]:
        keys = []
        for path in self.root.rglob("*"):
            if path.is_file() and not path.name.startswith("."):
                key = path.relative_to(self.root).as_posix()
                if key.startswith(prefix):
                    keys.append(key)
        return sorted(keys)


class FaultInjectingStore:
    """Passes through to an inner store until the put allowance runs out,
    then raises SimulatedCrash instead of writing."""

    def __init__(self, inner: Store, puts_before_crash: int) -> None:
        self.inner = inner
        self.remaining = puts_before_crash

    def get(self, key: str) -> bytes:
        return self.inner.get(key)

    def put(self, key: str, data: bytes) -> None:
        if self.remaining <= 0:
            raise SimulatedCrash(f"simulated crash before put of {key!r}")
        self.remaining -= 1
        self.inner.put(key, data)

    def list(self, prefix: str) -> list[str]:
        return self.inner.list(prefix)


# --- delta codec ------------------------------------------------------------


def _write_varint(out: bytearray, value: int) -> None:
    while value >= 0x80:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    out.append(value)


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    shift = 0
    while True:
        if pos >= len(data):
            raise IntegrityError("truncated varint in delta payload")
        byte = data[pos]
        pos += 1
        value |= (byte & 0x7F) << shift
        if byte < 0x80:
            return value, pos
        shift += 7


def encode_delta(parent: bytes, child: bytes) -> bytes:
    """XOR child against parent and run-length compress the zeros."""

    if len(parent) != len(child):
        raise SyncError(
            f"delta requires equal sizes, got {len(parent)} vs {len(child)}"
        )
    xor = np.frombuffer(parent, dtype=np.uint8) ^ np.frombuffer(child, dtype=np.uint8)
    out = bytearray()
    _write_varint(out, len(xor))
    nz = np.flatnonzero(xor)
    if len(nz) == 0:
        if len(xor) > 0:
            out.append(_ZEROS)
            _write_varint(out, len(xor))
        return bytes(out)

    # Literal spans cover consecutive nonzero bytes plus interior zero gaps
    # too short to be worth their own record; edge gaps fold the same way.
    gaps = np.diff(nz) - 1
    breaks = np.flatnonzero(gaps >= MIN_ZERO_RUN)
    starts = np.concatenate(([nz[0]], nz[breaks + 1])).astype(np.int64)
    ends = (np.concatenate((nz[breaks], [nz[-1]])) + 1).astype(np.int64)
    if 0 < starts[0] < MIN_ZERO_RUN:
        starts[0] = 0
    tail = len(xor) - int(ends[-1])
    if 0 < tail < MIN_ZERO_RUN:
        ends[-1] = len(xor)
        tail = 0

    xor_bytes = xor.tobytes()
    pos = 0
    for start, end in zip(starts.tolist(), ends.tolist()):
        if start > pos:
            out.append(_ZEROS)
            _write_varint(out, start - pos)
        out.append(_LITERAL)
        _write_varint(out, end - start)
        out += xor_bytes[start:end]
        pos = end
    if tail > 0:
        out.append(_ZEROS)
        _write_varint(out, tail)
    return bytes(out)


def apply_delta(parent: bytes, delta: bytes) -> bytes:
    raw_len, pos = _read_varint(delta, 0)
    if raw_len != len(parent):
        raise IntegrityError(
            f"delta expects parent of {raw_len} bytes, got {len(parent)}"
        )
    xor = bytearray()
    while pos < len(delta):
        kind = delta[pos]
        pos += 1
        n, pos = _read_varint(delta, pos)
        if kind == _LITERAL:
            if pos + n > len(delta):
                raise IntegrityError("truncated literal in delta payload")
            xor += delta[pos : pos + n]
            pos += n
        elif kind == _ZEROS:
            xor += bytes(n)
        else:
            raise IntegrityError(f"unknown delta record type {kind}")
    if len(xor) != raw_len:
        raise IntegrityError(
            f"delta decodes to {len(xor)} bytes, header says {raw_len}"
        )
    result = np.frombuffer(parent, dtype=np.uint8) ^ np.frombuffer(
        bytes(xor), dtype=np.uint8
    )
    return result.tobytes()


# --- manifest and publication -----------------------------------------------


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _object_key(version: int, shard: str, kind: str) -> str:
    return f"weights/v{version}/{shard}.{kind}"


def read_manifest(store: Store) -> dict:
    try:
        raw = store.get(MANIFEST_KEY)
    except SyncError:
        return {"entries": []}
    return json.loads(raw.decode("utf-8"))


def manifest_head(store: Store) -> int | None:
    entries = read_manifest(store)["entries"]
    return entries[-1]["version"] if entries else None


def publish(
    store: Store,
    version: int,
    shards: Mapping[str, bytes],
    force_full: bool = False,
    *,
    snapshot_interval: int = SNAPSHOT_INTERVAL,
    parent_shards: Mapping[str, bytes] | None = None,
) -> dict:
    """Write shard objects, then append the manifest entry atomically.

    Deltas are computed against parent_shards when the caller kept its
    previous upload cached, or against a reconstruction of the parent
    otherwise. Every snapshot_interval-th version (and any shard whose
    shape changed) is stored full to bound the chain.
    """

    if not shards:
        raise SyncError("nothing to publish")
    manifest = read_manifest(store)
    entries = manifest["entries"]
    if entries:
        last = entries[-1]["version"]
        if version != last + 1:
            raise VersionConflictError(
                f"expected version {last + 1}, got {version}"
            )
    elif version < 0:
        raise VersionConflictError(f"first version must be >= 0, got {version}")

    full = force_full or not entries or version % snapshot_interval == 0
    parent_version = entries[-1]["version"] if entries else None
    if not full and parent_shards is None:
        parent_shards = reconstruct(store, parent_version)
    if not full and set(parent_shards) != set(shards):
        full = True

    entry_shards: dict[str, dict] = {}
    kind = "full" if full else "delta"
    for name in sorted(shards):
        data = bytes(shards[name])
        if full:
            payload = data
        else:
            parent = bytes(parent_shards[name])
            if len(parent) != len(data):
                raise SyncError(
                    f"shard {name!r} changed size; publish with force_full"
                )
            payload = encode_delta(parent, data)
        store.put(_object_key(version, name, kind), payload)
        entry_shards[name] = {
            "digest": _digest(data),
            "size": len(data),
            "stored_size": len(payload),
        }
    entry = {
        "version": version,
        "parent": None if full else parent_version,
        "kind": kind,
        "shards": entry_shards,
    }
    manifest["entries"] = entries + [entry]
    store.put(MANIFEST_KEY, json.dumps(manifest).encode("utf-8"))
    return entry


def reconstruct(store: Store, version: int) -> dict[str, bytes]:
    """Walk back to the nearest full snapshot, apply deltas forward, and
    verify each step's digests. Never returns partially-verified bytes."""

    manifest = read_manifest(store)
    by_version = {e["version"]: e for e in manifest["entries"]}
    if version not in by_version:
        raise SyncError(f"version {version} not in manifest")
    chain = []
    v: int | None = version
    while v is not None:
        entry = by_version.get(v)
        if entry is None:
            raise IntegrityError(f"manifest chain references missing version {v}")
        chain.append(entry)
        v = entry["parent"]
    chain.reverse()
    if chain[0]["kind"] != "full":
        raise IntegrityError(
            f"chain for version {version} does not start at a full snapshot"
        )

    shards: dict[str, bytes] = {}
    for entry in chain:
        for name, meta in entry["shards"].items():
            payload = store.get(_object_key(entry["version"], name, entry["kind"]))
            if entry["kind"] == "full":
                data = payload
            else:
                data = apply_delta(shards[name], payload)
            if _digest(data) != meta["digest"]:
                raise IntegrityError(
                    f"digest mismatch for shard {name!r} at version {entry['version']}"
                )
            shards[name] = data
    return shards


def poll_and_hotload(engine, store: Store) -> int:
    """Adopt the manifest head if it is newer than the engine's version.

    Skips intermediate versions. A failed reconstruction leaves the engine
    untouched and surfaces a HotloadWarning; sampling continues at the old
    version.
    """

    head = manifest_head(store)
    current = engine.version
    if head is None or head <= current:
        return current
    try:
        shards = reconstruct(store, head)
    except SyncError as exc:
        warnings.warn(
            f"hotload of version {head} failed, staying at {current}: {exc}",
            HotloadWarning,
            stacklevel=2,
        )
        return current
    engine.adopt(head, shards)
    return head


@dataclass
class WeightPublisher:
    """Writer-side convenience: tracks the version counter and keeps the
    previous upload cached so deltas never need a store round-trip."""

    store: Store
    snapshot_interval: int = SNAPSHOT_INTERVAL
    _cache: dict[str, bytes] | None = None
    _next_version: int | None = None

    def publish(self, version: int, shards: Mapping[str, bytes], force_full: bool = False) -> dict:
        if self._next_version is not None and version != self._next_version:
            raise VersionConflictError(
                f"expected version {self._next_version}, got {version}"
            )
        entry = publish(
            self.store,
            version,
            shards,
            force_full,
            snapshot_interval=self.snapshot_interval,
            parent_shards=self._cache,
        )
        self._cache = {k: bytes(v) for k, v in shards.items()}
        self._next_version = version + 1
        return entry

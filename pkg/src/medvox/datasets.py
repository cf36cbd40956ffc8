"""Datasets with deterministic-prefix caching, in memory and on disk.

The deterministic prefix of a pipeline (every step before the first random
one) is computed once per item and memoized; the random suffix runs on every
access with (item_index, epoch) seeding, so cached and uncached datasets are
bit-identical. Cached payloads are MVOL bytes, never live arrays.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
import struct
import threading
import uuid

from .core import FormatError, MetaVolume, mvol_dumps, mvol_loads
from .nifti import nifti_load
from .pipeline import Pipeline, compose_apply_range

logger = logging.getLogger(__name__)

MVLD_MAGIC = b"MVLD"


def load_item(descriptor):
    """Load one item descriptor: a path or a dict of key -> path."""
    if isinstance(descriptor, dict):
        return {k: _load_path(p) for k, p in descriptor.items()}
    return _load_path(descriptor)


def _load_path(path: str) -> MetaVolume:
    if str(path).endswith(".mvol"):
        with open(path, "rb") as f:
            from .core import mvol_read
            return mvol_read(f)
    return nifti_load(str(path))


class DataSource:
    """Ordered, indexable list of item descriptors."""

    def __init__(self, items):
        self.items = list(items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, index: int):
        if not 0 <= index < len(self.items):
            raise IndexError(f"index {index} out of range for {len(self.items)} items")
        return self.items[index]


def _serialize_item(item) -> bytes:
    if isinstance(item, MetaVolume):
        return mvol_dumps(item)
    out = io.BytesIO()
    out.write(MVLD_MAGIC)
    out.write(struct.pack("<H", len(item)))
    for key, vol in item.items():
        kb = key.encode("utf-8")
        blob = mvol_dumps(vol)
        out.write(struct.pack("<I", len(kb)))
        out.write(kb)
        out.write(struct.pack("<Q", len(blob)))
        out.write(blob)
    return out.getvalue()


def _deserialize_item(raw: bytes):
    if raw[:4] == b"MVOL":
        return mvol_loads(raw)
    if raw[:4] != MVLD_MAGIC:
        raise FormatError("bad_magic", "neither MVOL nor MVLD payload")
    pos = 4
    (count,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    out = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        key = raw[pos : pos + klen].decode("utf-8")
        pos += klen
        (blen,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        out[key] = mvol_loads(raw[pos : pos + blen])
        pos += blen
    return out


class Dataset:
    """Plain dataset: load + full pipeline on every access. Counts executions."""

    def __init__(self, source: DataSource, pipeline: Pipeline):
        self.source = source
        self.pipeline = pipeline
        self.prefix_executions = 0
        self.suffix_executions = 0

    def __len__(self):
        return len(self.source)

    @property
    def _split(self) -> int:
        return self.pipeline.deterministic_prefix_len

    def _run_prefix(self, index: int):
        item = load_item(self.source[index])
        item = compose_apply_range(self.pipeline, item, index, 0, 0, self._split)
        self.prefix_executions += 1
        return item

    def _run_suffix(self, item, index: int, epoch: int):
        if self._split < len(self.pipeline.steps):
            self.suffix_executions += 1
        return compose_apply_range(self.pipeline, item, index, epoch,
                                   self._split, len(self.pipeline.steps))

    def get(self, index: int, epoch: int = 0):
        return self._run_suffix(self._run_prefix(index), index, epoch)


class CacheDataset(Dataset):
    """Memoizes the deterministic prefix in memory for the first
    floor(cache_rate * len) indices; payloads are MVOL bytes."""

    def __init__(self, source, pipeline, cache_rate: float = 1.0):
        super().__init__(source, pipeline)
        if not 0.0 <= cache_rate <= 1.0:
            raise ValueError("cache_rate must be in [0, 1]")
        self.cache_limit = int(cache_rate * len(source))
        self._memo: dict[int, bytes] = {}
        self._lock = threading.Lock()
        self._inflight: dict[int, threading.Lock] = {}

    def get(self, index: int, epoch: int = 0):
        if index >= self.cache_limit:
            return super().get(index, epoch)
        with self._lock:
            payload = self._memo.get(index)
            if payload is None:
                gate = self._inflight.setdefault(index, threading.Lock())
            else:
                gate = None
        if payload is None:
            with gate:   # single-flight: one computation, concurrent callers wait
                with self._lock:
                    payload = self._memo.get(index)
                if payload is None:
                    payload = _serialize_item(self._run_prefix(index))
                    with self._lock:
                        self._memo[index] = payload
        item = _deserialize_item(payload)
        return self._run_suffix(item, index, epoch)


def cache_key(descriptor, pipeline: Pipeline) -> str:
    """SHA-256 over the canonical descriptor and the deterministic-prefix config."""
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":"))
    prefix = [s.to_obj() for s in pipeline.steps[: pipeline.deterministic_prefix_len]]
    cfg = json.dumps(prefix, sort_keys=True, separators=(",", ":"))
    h = hashlib.sha256()
    h.update(desc.encode("utf-8"))
    h.update(b"\x00")
    h.update(cfg.encode("utf-8"))
    return h.hexdigest()


class PersistentDataset(Dataset):
    """Disk-backed prefix cache: '<cache_dir>/<64-hex>.mvol' (or .mvold for dicts),
    written atomically via temp-file + rename. Corrupt entries are recomputed."""

    def __init__(self, source, pipeline, cache_dir: str):
        super().__init__(source, pipeline)
        self.cache_dir = cache_dir
        os.makedirs(cache_dir, exist_ok=True)
        self.corrupt_warnings = 0

    def _entry_path(self, index: int) -> str:
        descriptor = self.source[index]
        ext = ".mvold" if isinstance(descriptor, dict) else ".mvol"
        return os.path.join(self.cache_dir, cache_key(descriptor, self.pipeline) + ext)

    def get(self, index: int, epoch: int = 0):
        path = self._entry_path(index)
        item = None
        if os.path.exists(path):
            try:
                with open(path, "rb") as f:
                    item = _deserialize_item(f.read())
            except (FormatError, struct.error, ValueError) as exc:
                self.corrupt_warnings += 1
                logger.warning("corrupt cache entry %s (%s); recomputing", path, exc)
                item = None
        if item is None:
            item = self._run_prefix(index)
            payload = _serialize_item(item)
            tmp = path + f".tmp-{uuid.uuid4().hex}"
            with open(tmp, "wb") as f:
                f.write(payload)
            os.replace(tmp, path)
            item = _deserialize_item(payload)
        return self._run_suffix(item, index, epoch)

"""Core data model: metadata-carrying volumes, transform traces, RNG, MVOL container.

A MetaVolume bundles a channel-first float32 array with a 4x4 world affine
(voxel index -> millimetres, RAS+), an ordered metadata map and the stack of
transforms that produced it. Everything else in the package is built on top
of these types.
"""
from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_INV_2_53 = 2.0 ** -53

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
MVOL_DTYPE_F32 = 1


class FormatError(Exception):
    """Malformed container bytes. `code` names the specific failure."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class NonInvertibleError(Exception):
    """Raised when inversion hits a record whose transform cannot be undone."""


class TransformError(Exception):
    """A transform failed; `step` carries the pipeline step name when known."""

    def __init__(self, message: str, step: str | None = None):
        super().__init__(message)
        self.step = step


def _mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 generator: bit-exact, trivially portable, splittable.

    The scalar and array methods draw from the same stream: `u64_array(n)`
    is equivalent to n calls of `next_u64`. Gaussians come from Box-Muller
    with the cosine branch emitted first; the sine branch is cached.
    """

    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64
        self._spare: float | None = None

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & MASK64
        return _mix64(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        idx = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & MASK64
        return z

    def next_float(self) -> float:
        """Uniform double in [0, 1): 53-bit mantissa scaling."""
        return (self.next_u64() >> 11) * _INV_2_53

    def float_array(self, n: int) -> np.ndarray:
        return (self.u64_array(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return min(int(self.next_float() * n), n - 1)

    def next_gauss(self) -> float:
        if self._spare is not None:
            z = self._spare
            self._spare = None
            return z
        u1 = self.next_float()
        u2 = self.next_float()
        if u1 <= 0.0:
            u1 = _INV_2_53
        r = math.sqrt(-2.0 * math.log(u1))
        t = 2.0 * math.pi * u2
        self._spare = r * math.sin(t)
        return r * math.cos(t)

    def gauss_array(self, n: int) -> np.ndarray:
        """n standard normals; consumes 2*ceil(n/2) uniforms, spare cached on odd n."""
        self._spare = None
        m = (n + 1) // 2
        u = self.float_array(2 * m)
        u1 = np.maximum(u[0::2], _INV_2_53)
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        t = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(t)
        out[1::2] = r * np.sin(t)
        if n % 2 == 1:
            self._spare = float(out[-1])
        return out[:n]

    def spawn(self) -> "Rng":
        """Independent generator reseeded from this stream."""
        return Rng(self.next_u64())


def derive_seed(base: int, *keys: int) -> int:
    """Chain SplitMix64 outputs over (base, *keys); order-sensitive."""
    s = int(base) & MASK64
    for k in keys:
        s = Rng(s ^ (int(k) & MASK64)).next_u64()
    return s


@dataclass
class TraceRecord:
    """One applied transform: identity, gate outcome and inversion payload."""

    transform_id: str
    do_transform: bool
    orig_size: tuple[int, ...]
    orig_affine: np.ndarray
    extra: dict = field(default_factory=dict)

    def to_obj(self) -> dict:
        return {
            "transform_id": self.transform_id,
            "do_transform": self.do_transform,
            "orig_size": list(self.orig_size),
            "orig_affine": [float(x) for x in np.asarray(self.orig_affine).ravel()],
            "extra": self.extra,
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "TraceRecord":
        return cls(
            transform_id=obj["transform_id"],
            do_transform=bool(obj["do_transform"]),
            orig_size=tuple(int(d) for d in obj["orig_size"]),
            orig_affine=np.asarray(obj["orig_affine"], dtype=np.float64).reshape(4, 4),
            extra=obj.get("extra", {}),
        )

    def __eq__(self, other):
        if not isinstance(other, TraceRecord):
            return NotImplemented
        return (
            self.transform_id == other.transform_id
            and self.do_transform == other.do_transform
            and self.orig_size == other.orig_size
            and np.array_equal(self.orig_affine, other.orig_affine)
            and self.extra == other.extra
        )


@dataclass
class MetaVolume:
    """Channel-first float32 volume with world affine, metadata and trace stack."""

    data: np.ndarray
    affine: np.ndarray
    meta: dict = field(default_factory=dict)
    applied: list[TraceRecord] = field(default_factory=list)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.data.ndim < 2 or self.data.ndim > 4:
            raise ValueError(f"data must have 1-3 spatial dims plus channel, got shape {self.data.shape}")
        if self.data.shape[0] < 1 or any(d < 1 for d in self.data.shape[1:]):
            raise ValueError(f"all dims must be >= 1, got shape {self.data.shape}")
        if self.affine.shape != (4, 4):
            raise ValueError("affine must be 4x4")
        if not np.array_equal(self.affine[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("affine last row must be (0,0,0,1)")
        if abs(np.linalg.det(self.affine[:3, :3])) < 1e-300:
            raise ValueError("affine upper-left 3x3 is singular")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, ...]:
        return self.data.shape[1:]

    @property
    def rank(self) -> int:
        return self.data.ndim - 1

    def evolve(self, data=None, affine=None, meta=None, applied=None) -> "MetaVolume":
        """Copy with selected fields replaced; meta and trace are shallow-copied."""
        return MetaVolume(
            data=self.data if data is None else data,
            affine=self.affine if affine is None else affine,
            meta=dict(self.meta) if meta is None else meta,
            applied=list(self.applied) if applied is None else applied,
        )

    def copy(self) -> "MetaVolume":
        return MetaVolume(self.data.copy(), self.affine.copy(), dict(self.meta), list(self.applied))

    def __eq__(self, other):
        if not isinstance(other, MetaVolume):
            return NotImplemented
        return (
            np.array_equal(self.data, other.data)
            and np.array_equal(self.affine, other.affine)
            and list(self.meta.items()) == list(other.meta.items())
            and self.applied == other.applied
        )


def identity_affine() -> np.ndarray:
    return np.eye(4, dtype=np.float64)


def volume_to_world(v: MetaVolume, index) -> np.ndarray:
    """World position (mm) of a voxel index; index length equals the spatial rank."""
    idx = tuple(int(i) for i in index)
    if len(idx) != v.rank:
        raise IndexError(f"index length {len(idx)} != spatial rank {v.rank}")
    for i, d in zip(idx, v.spatial_shape):
        if i < 0 or i >= d:
            raise IndexError(f"index {idx} out of bounds for dims {v.spatial_shape}")
    h = np.zeros(4, dtype=np.float64)
    h[: len(idx)] = idx
    h[3] = 1.0
    return (v.affine @ h)[:3]


def _json_canonical(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def _meta_to_pairs(meta: dict) -> list:
    # array-of-pairs keeps key order through JSON round-trips
    return [[k, v] for k, v in meta.items()]


def mvol_write(v: MetaVolume, sink) -> int:
    """Serialize to the MVOL container; returns bytes written. Bit-exact."""
    ndim = v.data.ndim
    blob = _json_canonical({
        "meta": _meta_to_pairs(v.meta),
        "applied": [r.to_obj() for r in v.applied],
    })
    out = bytearray()
    out += MVOL_MAGIC
    out += struct.pack("<BBBB", MVOL_VERSION, MVOL_DTYPE_F32, ndim, 0)
    out += struct.pack(f"<{ndim}Q", *v.data.shape)
    out += struct.pack("<16d", *v.affine.ravel())
    out += struct.pack("<I", len(blob))
    out += blob
    out += v.data.astype("<f4", copy=False).tobytes()
    sink.write(bytes(out))
    return len(out)


def mvol_dumps(v: MetaVolume) -> bytes:
    buf = io.BytesIO()
    mvol_write(v, buf)
    return buf.getvalue()


def mvol_read(source) -> MetaVolume:
    """Parse an MVOL container; exact inverse of mvol_write."""
    raw = source.read()
    return mvol_loads(raw)


def mvol_loads(raw: bytes) -> MetaVolume:
    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError("truncated", f"MVOL truncated while reading {what}")
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    pos = 0
    magic = take(4, "magic")
    if magic != MVOL_MAGIC:
        raise FormatError("bad_magic", f"not an MVOL container (magic {magic!r})")
    version, dtype, ndim, _ = struct.unpack("<BBBB", take(4, "header"))
    if version != MVOL_VERSION:
        raise FormatError("unsupported_version", f"MVOL version {version} unsupported")
    if dtype != MVOL_DTYPE_F32:
        raise FormatError("unsupported_dtype", f"MVOL dtype code {dtype} unsupported")
    if not 2 <= ndim <= 4:
        raise FormatError("bad_ndim", f"MVOL ndim {ndim} outside 2..4")
    dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, "dims"))
    affine = np.array(struct.unpack("<16d", take(128, "affine"))).reshape(4, 4)
    (blob_len,) = struct.unpack("<I", take(4, "json length"))
    blob = json.loads(take(blob_len, "json blob").decode("utf-8"))
    count = int(np.prod(dims))
    data = np.frombuffer(take(4 * count, "voxel data"), dtype="<f4").reshape(dims)
    meta = {k: val for k, val in blob.get("meta", [])}
    applied = [TraceRecord.from_obj(o) for o in blob.get("applied", [])]
    return MetaVolume(data=data.copy(), affine=affine, meta=meta, applied=applied)

"""Voxel resampling kernels: nearest, trilinear and Catmull-Rom tricubic.

All samplers take continuous voxel coordinates of shape (S, *out_shape) and
gather from a single-channel array. Out-of-range behavior follows the
padding mode: "zeros" (constant 0), "border" (clamp) or "reflect" (mirror
about edge voxel centers).
"""
from __future__ import annotations

import itertools

import numpy as np

MODES = ("nearest", "trilinear", "tricubic")
PADDINGS = ("zeros", "border", "reflect")

_NP_PAD = {"zeros": "constant", "border": "edge", "reflect": "reflect"}


def _check(mode: str, padding: str, rank: int):
    if mode not in MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if padding not in PADDINGS:
        raise ValueError(f"unknown padding mode {padding!r}")
    if mode == "tricubic" and rank != 3:
        raise ValueError("tricubic interpolation requires 3 spatial dims")


def _reflect_coords(c: np.ndarray, dim: int) -> np.ndarray:
    if dim == 1:
        return np.zeros_like(c)
    period = 2.0 * (dim - 1)
    c = np.abs(c) % period
    return np.where(c > dim - 1, period - c, c)


def _prepare_coords(coords: np.ndarray, shape: tuple[int, ...], padding: str, halo: int):
    """Map far out-of-range coordinates into the padded index range."""
    out = np.empty_like(coords, dtype=np.float64)
    for ax, dim in enumerate(shape):
        c = coords[ax].astype(np.float64, copy=False)
        if padding == "border":
            c = np.clip(c, 0.0, dim - 1.0)
        elif padding == "reflect":
            c = _reflect_coords(c, dim)
        else:
            c = np.clip(c, -halo, dim - 1.0 + halo)
        out[ax] = c
    return out


def _catmull_rom_weights(t: np.ndarray):
    # Catmull-Rom kernel, a = -0.5; taps at offsets -1, 0, 1, 2
    t2 = t * t
    t3 = t2 * t
    return (
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    )


def sample_channel(data: np.ndarray, coords: np.ndarray, mode: str, padding: str) -> np.ndarray:
    """Sample one channel at continuous voxel coordinates; returns float64."""
    rank = data.ndim
    _check(mode, padding, rank)
    if coords.shape[0] != rank:
        raise ValueError(f"coords leading dim {coords.shape[0]} != rank {rank}")
    out_shape = coords.shape[1:]

    if mode == "nearest":
        halo = 1
        c = _prepare_coords(coords, data.shape, padding, halo)
        padded = np.pad(data.astype(np.float64, copy=False), halo, mode=_NP_PAD[padding])
        idx = tuple(
            np.clip(np.floor(c[ax] + 0.5).astype(np.int64) + halo, 0, padded.shape[ax] - 1)
            for ax in range(rank)
        )
        return padded[idx].reshape(out_shape)

    halo = 1 if mode == "trilinear" else 2
    c = _prepare_coords(coords, data.shape, padding, halo)
    padded = np.pad(data.astype(np.float64, copy=False), halo, mode=_NP_PAD[padding])
    i0 = [np.floor(c[ax]).astype(np.int64) for ax in range(rank)]
    frac = [c[ax] - i0[ax] for ax in range(rank)]

    if mode == "trilinear":
        weights = [(1.0 - frac[ax], frac[ax]) for ax in range(rank)]
        offsets = (0, 1)
        base = 0
    else:
        weights = [_catmull_rom_weights(frac[ax]) for ax in range(rank)]
        offsets = (-1, 0, 1, 2)
        base = 0

    acc = np.zeros(out_shape, dtype=np.float64)
    for combo in itertools.product(range(len(offsets)), repeat=rank):
        w = weights[0][combo[0]]
        for ax in range(1, rank):
            w = w * weights[ax][combo[ax]]
        idx = tuple(
            np.clip(i0[ax] + offsets[combo[ax]] + halo, 0, padded.shape[ax] - 1)
            for ax in range(rank)
        )
        acc += w * padded[idx].reshape(out_shape)
    return acc


def sample_volume(data: np.ndarray, coords: np.ndarray, mode: str, padding: str) -> np.ndarray:
    """Sample a channel-first array; returns float32 of shape (C, *out_shape)."""
    out = np.stack([sample_channel(ch, coords, mode, padding) for ch in data])
    return np.ascontiguousarray(out, dtype=np.float32)


def affine_coords(matrix: np.ndarray, out_shape: tuple[int, ...]) -> np.ndarray:
    """Continuous input coords for each output voxel under a homogeneous map.

    `matrix` is (S+1)x(S+1) mapping output voxel index to input voxel coords.
    """
    rank = len(out_shape)
    idx = np.indices(out_shape, dtype=np.float64)
    lin = matrix[:rank, :rank]
    off = matrix[:rank, rank]
    coords = np.tensordot(lin, idx, axes=1)
    coords += off.reshape((rank,) + (1,) * rank)
    return coords


def homogeneous(rank: int, linear=None, offset=None) -> np.ndarray:
    """Build an (S+1)x(S+1) homogeneous matrix from linear part and offset."""
    m = np.eye(rank + 1, dtype=np.float64)
    if linear is not None:
        m[:rank, :rank] = linear
    if offset is not None:
        m[:rank, rank] = offset
    return m

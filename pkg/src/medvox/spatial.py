"""Geometry-aware transforms.

Every operation returns a new MetaVolume with an updated affine and a
TraceRecord pushed on the applied stack. Inverse functions (consumed by
pipeline.invert) undo the data change, restore the recorded affine and pop
nothing themselves; popping is the inverter loop's job.
"""
from __future__ import annotations

import numpy as np

from .core import MetaVolume, NonInvertibleError, Rng, TraceRecord, TransformError
from .interp import affine_coords, homogeneous, sample_volume

_WORLD_LETTERS = (("L", "R"), ("P", "A"), ("I", "S"))
_LETTER_TO_AXIS = {
    "R": (0, 1), "L": (0, -1),
    "A": (1, 1), "P": (1, -1),
    "S": (2, 1), "I": (2, -1),
}


def _record(v: MetaVolume, tid: str, do_transform: bool, extra: dict) -> TraceRecord:
    return TraceRecord(
        transform_id=tid,
        do_transform=do_transform,
        orig_size=tuple(v.spatial_shape),
        orig_affine=v.affine.copy(),
        extra=extra,
    )


def _emit(v: MetaVolume, data, affine, rec: TraceRecord) -> MetaVolume:
    return MetaVolume(data=data, affine=affine, meta=dict(v.meta), applied=list(v.applied) + [rec])


def _noop(v: MetaVolume, tid: str, extra: dict) -> MetaVolume:
    rec = _record(v, tid, False, extra)
    return _emit(v, v.data.copy(), v.affine.copy(), rec)


def axis_codes(affine: np.ndarray) -> str:
    """Anatomical code per data axis: argmax of |column|, ties to lower axis."""
    rot = affine[:3, :3]
    codes = []
    taken = set()
    for j in range(3):
        col = rot[:, j]
        if not np.any(col):
            raise ValueError("singular direction matrix: zero column")
        wa = int(np.argmax(np.abs(col)))
        if wa in taken:
            raise ValueError("ambiguous direction matrix: two columns dominate the same axis")
        taken.add(wa)
        codes.append(_WORLD_LETTERS[wa][1 if col[wa] > 0 else 0])
    return "".join(codes)


def _voxel_map_affine(v: MetaVolume, matrix: np.ndarray) -> np.ndarray:
    """World affine after composing a voxel-index map (new index -> old index)."""
    full = np.eye(4, dtype=np.float64)
    rank = v.rank
    full[:rank, :rank] = matrix[:rank, :rank]
    full[:rank, 3] = matrix[:rank, rank]
    return v.affine @ full


def orientation_to(v: MetaVolume, codes: str) -> MetaVolume:
    """Permute/flip data axes so the affine's anatomical codes equal `codes`."""
    if v.rank != 3:
        raise ValueError("orientation_to requires 3 spatial dims")
    codes = codes.upper()
    if len(codes) != 3 or any(c not in _LETTER_TO_AXIS for c in codes):
        raise ValueError(f"bad orientation codes {codes!r}")
    want = [_LETTER_TO_AXIS[c] for c in codes]
    if len({w[0] for w in want}) != 3:
        raise ValueError(f"orientation codes {codes!r} repeat a world axis")
    cur = axis_codes(v.affine)
    have = [_LETTER_TO_AXIS[c] for c in cur]
    perm = []
    flips = []
    for wa, sign in want:
        j = next(j for j, (wj, _) in enumerate(have) if wj == wa)
        perm.append(j)
        flips.append(have[j][1] != sign)

    data = np.transpose(v.data, (0,) + tuple(p + 1 for p in perm))
    flip_axes = [k + 1 for k, f in enumerate(flips) if f]
    if flip_axes:
        data = np.flip(data, axis=flip_axes)
    data = np.ascontiguousarray(data)

    m = np.eye(4, dtype=np.float64)
    m[:3, :3] = 0.0
    for k in range(3):
        j = perm[k]
        dj = v.spatial_shape[j]
        m[j, k] = -1.0 if flips[k] else 1.0
        if flips[k]:
            m[j, 3] += dj - 1
    affine = v.affine @ m
    rec = _record(v, "orientation", True, {"codes": codes, "perm": perm, "flips": flips})
    return _emit(v, data, affine, rec)


def _invert_orientation(rec: TraceRecord, v: MetaVolume) -> MetaVolume:
    perm = rec.extra["perm"]
    flips = rec.extra["flips"]
    data = v.data
    flip_axes = [k + 1 for k, f in enumerate(flips) if f]
    if flip_axes:
        data = np.flip(data, axis=flip_axes)
    inv_perm = [0] * len(perm)
    for k, j in enumerate(perm):
        inv_perm[j] = k
    data = np.ascontiguousarray(np.transpose(data, (0,) + tuple(p + 1 for p in inv_perm)))
    return v.evolve(data=data, affine=rec.orig_affine.copy())


def _flip_data_affine(v: MetaVolume, axes):
    axes = sorted(set(int(a) for a in axes))
    for a in axes:
        if a < 0 or a >= v.rank:
            raise ValueError(f"flip axis {a} out of range for rank {v.rank}")
    if not axes:
        return v.data.copy(), v.affine.copy(), axes
    data = np.ascontiguousarray(np.flip(v.data, axis=[a + 1 for a in axes]))
    m = np.eye(4, dtype=np.float64)
    for a in axes:
        m[a, a] = -1.0
        m[a, 3] = v.spatial_shape[a] - 1
    return data, v.affine @ m, axes


def flip(v: MetaVolume, axes) -> MetaVolume:
    """Reverse data along spatial axes; world position of every voxel preserved."""
    data, affine, axes = _flip_data_affine(v, axes)
    rec = _record(v, "flip", True, {"axes": axes})
    return _emit(v, data, affine, rec)


def rand_flip(v: MetaVolume, rng: Rng, axes, prob: float = 0.5) -> MetaVolume:
    gate = rng.next_float() < prob
    if not gate:
        return _noop(v, "rand_flip", {"axes": sorted(set(int(a) for a in axes))})
    data, affine, axes = _flip_data_affine(v, axes)
    rec = _record(v, "rand_flip", True, {"axes": axes})
    return _emit(v, data, affine, rec)


def _invert_flip(rec: TraceRecord, v: MetaVolume) -> MetaVolume:
    data = np.ascontiguousarray(np.flip(v.data, axis=[a + 1 for a in rec.extra["axes"]])) \
        if rec.extra["axes"] else v.data.copy()
    return v.evolve(data=data, affine=rec.orig_affine.copy())


def resample_to_grid(v: MetaVolume, target_affine: np.ndarray, target_dims, mode: str,
                     padding: str = "zeros") -> tuple[np.ndarray, np.ndarray]:
    """Resample onto the grid defined by (target_affine, target_dims)."""
    rank = v.rank
    vox_map = np.linalg.inv(v.affine) @ target_affine
    m = homogeneous(rank)
    m[:rank, :rank] = vox_map[:rank, :rank]
    m[:rank, rank] = vox_map[:rank, 3]
    coords = affine_coords(m, tuple(int(d) for d in target_dims))
    data = sample_volume(v.data, coords, mode, padding)
    return data, np.asarray(target_affine, dtype=np.float64)


def spacing_to(v: MetaVolume, new_spacing, mode: str = "trilinear", padding: str = "zeros") -> MetaVolume:
    """Resample to a new voxel spacing (mm per axis); voxel (0,..,0) stays put."""
    rank = v.rank
    new_spacing = [float(s) for s in new_spacing]
    if len(new_spacing) != rank or any(s <= 0 for s in new_spacing):
        raise ValueError(f"spacing must be {rank} positive values, got {new_spacing}")
    cols = v.affine[:3, :rank]
    old_spacing = np.linalg.norm(cols, axis=0)
    new_dims = []
    for d, so, sn in zip(v.spatial_shape, old_spacing, new_spacing):
        new_dims.append(max(1, int(np.floor(d * so / sn + 0.5))))   # round half away from zero
    affine = v.affine.copy()
    for ax in range(rank):
        affine[:3, ax] = cols[:, ax] / old_spacing[ax] * new_spacing[ax]
    data, affine = resample_to_grid(v, affine, new_dims, mode, padding)
    rec = _record(v, "spacing", True, {"new_spacing": new_spacing, "mode": mode, "padding": padding})
    return _emit(v, data, affine, rec)


def _invert_resample(rec: TraceRecord, v: MetaVolume) -> MetaVolume:
    mode = rec.extra.get("mode", "trilinear")
    padding = rec.extra.get("padding", "zeros")
    data, affine = resample_to_grid(v, rec.orig_affine, rec.orig_size, mode, padding)
    return v.evolve(data=data, affine=affine.copy())


def _center(shape) -> np.ndarray:
    return (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0


def _rotation_matrix(rank: int, angles) -> np.ndarray:
    angles = [float(a) for a in np.atleast_1d(angles)]
    if rank == 2:
        if len(angles) != 1:
            raise ValueError("2D rotation takes one angle")
        c, s = np.cos(angles[0]), np.sin(angles[0])
        return np.array([[c, -s], [s, c]])
    if len(angles) != 3:
        raise ValueError("3D rotation takes three angles (about axes 0, 1, 2)")
    rot = np.eye(3)
    for ax, theta in enumerate(angles):
        c, s = np.cos(theta), np.sin(theta)
        r = np.eye(3)
        idx = [i for i in range(3) if i != ax]
        r[idx[0], idx[0]] = c
        r[idx[0], idx[1]] = -s
        r[idx[1], idx[0]] = s
        r[idx[1], idx[1]] = c
        rot = r @ rot
    return rot


def _matrix_resample(v: MetaVolume, tid: str, matrix: np.ndarray, mode: str, padding: str,
                     extra: dict) -> MetaVolume:
    """Resample with a voxel map (output index -> input coords); dims unchanged."""
    coords = affine_coords(matrix, v.spatial_shape)
    data = sample_volume(v.data, coords, mode, padding)
    affine = _voxel_map_affine(v, matrix)
    extra = dict(extra)
    extra["matrix"] = [float(x) for x in matrix.ravel()]
    extra["mode"] = mode
    extra["padding"] = padding
    rec = _record(v, tid, True, extra)
    return _emit(v, data, affine, rec)


def _invert_matrix_resample(rec: TraceRecord, v: MetaVolume) -> MetaVolume:
    rank = len(rec.orig_size)
    m = np.asarray(rec.extra["matrix"], dtype=np.float64).reshape(rank + 1, rank + 1)
    inv = np.linalg.inv(m)
    coords = affine_coords(inv, rec.orig_size)
    data = sample_volume(v.data, coords, rec.extra.get("mode", "trilinear"),
                         rec.extra.get("padding", "zeros"))
    return v.evolve(data=data, affine=rec.orig_affine.copy())


def rotate(v: MetaVolume, angles, mode: str = "trilinear", padding: str = "zeros") -> MetaVolume:
    """Rotate about the spatial center; output voxel x samples c + R(x - c)."""
    rank = v.rank
    if rank not in (2, 3):
        raise ValueError("rotate requires 2 or 3 spatial dims")
    rot = _rotation_matrix(rank, angles)
    c = _center(v.spatial_shape)
    m = homogeneous(rank, rot, c - rot @ c)
    return _matrix_resample(v, "rotate", m, mode, padding,
                            {"angles": [float(a) for a in np.atleast_1d(angles)]})


def zoom(v: MetaVolume, factors, mode: str = "trilinear", padding: str = "zeros") -> MetaVolume:
    """Zoom about the spatial center; factor > 1 magnifies. Dims unchanged."""
    rank = v.rank
    factors = [float(f) for f in np.broadcast_to(factors, (rank,))]
    if any(f == 0 for f in factors):
        raise ValueError("zoom factor must be nonzero")
    lin = np.diag([1.0 / f for f in factors])
    c = _center(v.spatial_shape)
    m = homogeneous(rank, lin, c - lin @ c)
    return _matrix_resample(v, "zoom", m, mode, padding, {"factors": factors})


def affine_resample(v: MetaVolume, rotation=None, scale=None, shear=None, translation=None,
                    mode: str = "trilinear", padding: str = "zeros") -> MetaVolume:
    """Parametric affine about the spatial center, then voxel translation."""
    rank = v.rank
    rot = _rotation_matrix(rank, rotation) if rotation is not None else np.eye(rank)
    if scale is not None:
        scale = [float(s) for s in np.broadcast_to(scale, (rank,))]
        if any(s == 0 for s in scale):
            raise ValueError("scale must be nonzero per axis")
    else:
        scale = [1.0] * rank
    sh = np.eye(rank)
    if shear is not None:
        shear = list(np.atleast_1d(shear).astype(float))
        off = [(i, j) for i in range(rank) for j in range(rank) if i != j]
        if len(shear) != len(off):
            raise ValueError(f"shear takes {len(off)} values for rank {rank}")
        for (i, j), s in zip(off, shear):
            sh[i, j] = s
    trans = np.asarray(translation, dtype=float) if translation is not None else np.zeros(rank)
    lin = rot @ sh @ np.diag(scale)
    if abs(np.linalg.det(lin)) < 1e-12:
        raise ValueError("composed affine matrix is singular")
    c = _center(v.spatial_shape)
    m = homogeneous(rank, lin, c - lin @ c) @ homogeneous(rank, None, trans)
    return _matrix_resample(v, "affine", m, mode, padding, {
        "rotation": None if rotation is None else [float(a) for a in np.atleast_1d(rotation)],
        "scale": scale,
        "translation": [float(t) for t in trans],
    })


def crop_pad(v: MetaVolume, start, size, pad_mode: str = "zeros") -> MetaVolume:
    """Extract [start, start+size) per axis; out-of-bounds filled per pad_mode."""
    rank = v.rank
    start = [int(s) for s in start]
    size = [int(s) for s in size]
    if len(start) != rank or len(size) != rank:
        raise ValueError(f"start/size must have {rank} entries")
    if any(s < 1 for s in size):
        raise ValueError(f"size must be >= 1 per axis, got {size}")
    data = _crop_pad_data(v.data, start, size, pad_mode)
    m = np.eye(4, dtype=np.float64)
    m[:rank, 3] = start
    affine = v.affine @ m
    rec = _record(v, "crop_pad", True,
                  {"start": start, "size": size, "pad_mode": pad_mode, "inverse_fill": 0})
    return _emit(v, data, affine, rec)


def _crop_pad_data(data: np.ndarray, start, size, pad_mode: str) -> np.ndarray:
    np_mode = {"zeros": "constant", "edge": "edge", "border": "edge", "reflect": "reflect"}
    if pad_mode not in np_mode:
        raise ValueError(f"unknown pad mode {pad_mode!r}")
    dims = data.shape[1:]
    before = [max(0, -s) for s in start]
    after = [max(0, s + n - d) for s, n, d in zip(start, size, dims)]
    if any(before) or any(after):
        pad = [(0, 0)] + list(zip(before, after))
        data = np.pad(data, pad, mode=np_mode[pad_mode])
    sl = tuple([slice(None)] + [slice(s + b, s + b + n) for s, b, n in zip(start, before, size)])
    return np.ascontiguousarray(data[sl])


def _invert_crop_pad(rec: TraceRecord, v: MetaVolume) -> MetaVolume:
    start = [-s for s in rec.extra["start"]]
    data = _crop_pad_data(v.data, start, list(rec.orig_size), "zeros")
    return v.evolve(data=data, affine=rec.orig_affine.copy())


def warp(v: MetaVolume, field: np.ndarray, mode: str = "trilinear", padding: str = "zeros") -> MetaVolume:
    """Dense-field warp: output(x) = input(x + field(x)). Not invertible."""
    field = np.asarray(field, dtype=np.float64)
    rank = v.rank
    if field.shape != (rank, *v.spatial_shape):
        raise ValueError(f"field shape {field.shape} != ({rank}, *{v.spatial_shape})")
    coords = np.indices(v.spatial_shape, dtype=np.float64) + field
    data = sample_volume(v.data, coords, mode, padding)
    rec = _record(v, "warp", True, {"mode": mode, "padding": padding, "invertible": False})
    return _emit(v, data, v.affine.copy(), rec)


def rand_elastic_3d(v: MetaVolume, rng: Rng, sigma_range=(8.0, 16.0), magnitude_range=(0.0, 2.0),
                    prob: float = 0.5, mode: str = "trilinear", padding: str = "zeros",
                    rotate_range: float = 0.05, scale_range: float = 0.05) -> MetaVolume:
    """Coarse-grid Gaussian displacement + small random affine, applied with prob.

    The gate is drawn first and every parameter is drawn regardless of the
    gate outcome, so RNG consumption per call is independent of the roll.
    """
    if v.rank != 3:
        raise ValueError("rand_elastic_3d requires 3 spatial dims")
    gate = rng.next_float() < prob
    spacing = rng.uniform(*sigma_range)
    magnitude = rng.uniform(*magnitude_range)
    angles = [rng.uniform(-rotate_range, rotate_range) for _ in range(3)]
    scales = [1.0 + rng.uniform(-scale_range, scale_range) for _ in range(3)]
    dims = v.spatial_shape
    ctrl = tuple(max(2, int(np.ceil(d / max(spacing, 1.0))) + 1) for d in dims)
    grid = rng.gauss_array(3 * int(np.prod(ctrl))).reshape((3,) + ctrl) * magnitude
    if not gate:
        return _noop(v, "rand_elastic_3d", {"spacing": spacing, "magnitude": magnitude})
    # upsample control offsets trilinearly to a per-voxel displacement field
    idx = np.indices(dims, dtype=np.float64)
    ctrl_coords = np.stack([idx[ax] / max(spacing, 1.0) for ax in range(3)])
    field = sample_volume(grid, ctrl_coords, "trilinear", "border").astype(np.float64)
    rot = _rotation_matrix(3, angles) @ np.diag(scales)
    c = _center(dims)
    coords = np.tensordot(rot, idx - c.reshape(3, 1, 1, 1), axes=1) + c.reshape(3, 1, 1, 1)
    coords += field
    data = sample_volume(v.data, coords, mode, padding)
    rec = _record(v, "rand_elastic_3d", True, {
        "spacing": spacing, "magnitude": magnitude, "angles": angles, "scales": scales,
        "invertible": False,
    })
    return _emit(v, data, v.affine.copy(), rec)


def _not_invertible(rec: TraceRecord, v: MetaVolume) -> MetaVolume:
    raise NonInvertibleError(f"transform {rec.transform_id!r} is not invertible")


SPATIAL_INVERTERS = {
    "orientation": _invert_orientation,
    "flip": _invert_flip,
    "rand_flip": _invert_flip,
    "spacing": _invert_resample,
    "rotate": _invert_matrix_resample,
    "zoom": _invert_matrix_resample,
    "affine": _invert_matrix_resample,
    "crop_pad": _invert_crop_pad,
    "warp": _not_invertible,
    "rand_elastic_3d": _not_invertible,
}

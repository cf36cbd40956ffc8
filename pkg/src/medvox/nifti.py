"""NIfTI-1 single-file reader/writer and synthetic labeled volume generation.

Only uncompressed little-endian .nii files are handled; datatype codes 2
(uint8), 4 (int16), 16 (float32) and 64 (float64). The affine comes from the
sform when sform_code > 0, else the qform quaternion, else diag(pixdim).
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .core import FormatError, MetaVolume, Rng, identity_affine

HEADER_SIZE = 348
_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 64: np.float64}


def _quaternion_affine(b, c, d, qx, qy, qz, pixdim) -> np.ndarray:
    # NIfTI-1 standard decode: a recovered from unit-quaternion constraint
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    rot = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
    ])
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
    aff = identity_affine()
    aff[:3, :3] = rot * scale
    aff[:3, 3] = (qx, qy, qz)
    return aff


def nifti_load(path: str) -> MetaVolume:
    """Read an uncompressed NIfTI-1 single file into a MetaVolume."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raise FormatError(
            "compressed",
            f"{path}: compressed NIfTI (.nii.gz) unsupported; gunzip the file first",
        )
    if len(raw) < HEADER_SIZE:
        raise FormatError("truncated", f"{path}: file shorter than the 348-byte header")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        if struct.unpack_from(">i", raw, 0)[0] == 348:
            raise FormatError("big_endian", f"{path}: big-endian NIfTI unsupported")
        raise FormatError("bad_header", f"{path}: sizeof_hdr {sizeof_hdr} != 348")
    magic = raw[344:348]
    if magic != b"n+1\x00":
        raise FormatError("bad_magic", f"{path}: magic {magic!r} is not single-file NIfTI-1")

    dim = struct.unpack_from("<8h", raw, 40)
    (datatype,) = struct.unpack_from("<h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset,) = struct.unpack_from("<f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    qb, qc, qd = struct.unpack_from("<3f", raw, 256)
    qx, qy, qz = struct.unpack_from("<3f", raw, 268)
    srow = np.array(struct.unpack_from("<12f", raw, 280)).reshape(3, 4)

    if datatype not in _DTYPES:
        raise FormatError("unsupported_dtype", f"{path}: NIfTI datatype code {datatype} unsupported")
    ndim = dim[0]
    if ndim < 2 or ndim > 4:
        if ndim > 4 and all(d <= 1 for d in dim[5 : ndim + 1]):
            ndim = 4
        else:
            raise FormatError("bad_ndim", f"{path}: dim[0]={dim[0]} unsupported")
    shape = [max(1, dim[i + 1]) for i in range(ndim)]

    count = int(np.prod(shape))
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder("<")
    offset = int(vox_offset)
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise FormatError("truncated", f"{path}: data section truncated ({len(raw)} < {need} bytes)")
    arr = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    arr = arr.reshape(shape, order="F").astype(np.float32)
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        arr = arr * np.float32(scl_slope) + np.float32(scl_inter)

    if ndim == 4 and shape[3] > 1:
        data = np.moveaxis(arr, 3, 0)          # channels from the t dimension
    elif ndim == 4:
        data = arr[..., 0][np.newaxis]
    else:
        data = arr[np.newaxis]

    if sform_code > 0:
        affine = identity_affine()
        affine[:3, :] = srow
    elif qform_code > 0:
        affine = _quaternion_affine(qb, qc, qd, qx, qy, qz, pixdim)
    else:
        affine = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0, 1.0])
    if data.ndim - 1 < 3:
        # keep the 4x4 model; unused spatial axes stay identity
        for ax in range(data.ndim - 1, 3):
            affine[ax, ax] = affine[ax, ax] if affine[ax, ax] != 0 else 1.0

    meta = {
        "filename": os.path.abspath(path),
        "orig_datatype": int(datatype),
        "pixdim": [float(p) for p in pixdim[1 : data.ndim]],
    }
    return MetaVolume(data=np.ascontiguousarray(data), affine=affine, meta=meta, applied=[])


def nifti_save(v: MetaVolume, path: str) -> None:
    """Write a MetaVolume as a float32 NIfTI-1 single file (sform_code=1)."""
    if v.rank != 3:
        raise ValueError(f"nifti_save requires 3 spatial dims, got {v.rank}")
    channels = v.channels
    spatial = v.spatial_shape
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, 348)
    if channels == 1:
        dim = (3, *spatial, 1, 1, 1, 1)
    else:
        dim = (4, *spatial, channels, 1, 1, 1)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, 16)   # float32
    struct.pack_into("<h", hdr, 72, 32)   # bitpix
    spacing = np.linalg.norm(v.affine[:3, :3], axis=0)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)   # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 0, 1)       # qform_code, sform_code
    struct.pack_into("<12f", hdr, 280, *v.affine[:3, :].ravel())
    hdr[344:348] = b"n+1\x00"

    arr = np.moveaxis(v.data, 0, -1)
    if channels == 1:
        arr = arr[..., 0]
    payload = np.asfortranarray(arr, dtype="<f4").tobytes(order="F")
    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00\x00\x00\x00")
        f.write(payload)


def synth_volume(rng: Rng, dims, num_objects: int = 1, noise_sigma: float = 0.0):
    """Random ellipsoids of intensity 1 on background 0, plus Gaussian noise.

    Returns (image, label) MetaVolumes sharing an identity affine; the label
    is the binary mask before noise.
    """
    dims = tuple(int(d) for d in dims)
    if any(d < 8 for d in dims):
        raise ValueError(f"dims {dims} too small to place an object (need >= 8 per axis)")
    if num_objects < 1:
        raise ValueError("num_objects must be >= 1")
    rank = len(dims)
    grid = np.indices(dims, dtype=np.float64)
    mask = np.zeros(dims, dtype=bool)
    for _ in range(num_objects):
        center = [rng.uniform(0.25 * d, 0.75 * d) for d in dims]
        semi = [rng.uniform(d / 8.0, d / 4.0) for d in dims]
        q = np.zeros(dims, dtype=np.float64)
        for ax in range(rank):
            q += ((grid[ax] - center[ax]) / semi[ax]) ** 2
        mask |= q <= 1.0
    image = mask.astype(np.float32)
    if noise_sigma > 0:
        noise = rng.gauss_array(image.size).reshape(dims) * noise_sigma
        image = (image + noise).astype(np.float32)
    label = mask.astype(np.float32)
    aff = identity_affine()
    img_v = MetaVolume(image[np.newaxis], aff.copy(), {"synthetic": 1}, [])
    lbl_v = MetaVolume(label[np.newaxis], aff.copy(), {"synthetic": 1}, [])
    return img_v, lbl_v

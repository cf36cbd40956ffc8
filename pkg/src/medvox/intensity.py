"""Intensity and physics-based transforms, including naive-DFT k-space spikes."""
from __future__ import annotations

import numpy as np

from .core import MetaVolume, NonInvertibleError, Rng, TraceRecord
from .spatial import _emit, _noop, _record


def normalize_intensity(v: MetaVolume, nonzero_only: bool = False) -> MetaVolume:
    """Per-channel (x - mean) / std with population std; zero-std channels zero out."""
    data = v.data.astype(np.float64)
    means, stds = [], []
    out = np.empty_like(data)
    for c in range(v.channels):
        ch = data[c]
        mask = ch != 0 if nonzero_only else np.ones_like(ch, dtype=bool)
        if nonzero_only and not mask.any():
            raise ValueError(f"channel {c} is all zeros; nonzero_only normalization undefined")
        mean = float(ch[mask].mean())
        std = float(ch[mask].std())
        means.append(mean)
        stds.append(std)
        if std == 0.0:
            out[c] = 0.0
        elif nonzero_only:
            out[c] = np.where(mask, (ch - mean) / std, ch)
        else:
            out[c] = (ch - mean) / std
    rec = _record(v, "normalize_intensity", True,
                  {"mean": means, "std": stds, "nonzero_only": nonzero_only})
    return _emit(v, out.astype(np.float32), v.affine.copy(), rec)


def _invert_normalize(rec: TraceRecord, v: MetaVolume) -> MetaVolume:
    data = v.data.astype(np.float64)
    out = np.empty_like(data)
    nonzero_only = rec.extra["nonzero_only"]
    for c in range(data.shape[0]):
        mean = rec.extra["mean"][c]
        std = rec.extra["std"][c]
        ch = data[c]
        if nonzero_only and std != 0.0:
            out[c] = np.where(ch != 0, ch * std + mean, ch)
        else:
            out[c] = ch * std + mean
    return v.evolve(data=out.astype(np.float32), affine=rec.orig_affine.copy())


def scale_intensity_range(v: MetaVolume, in_min: float, in_max: float, out_min: float,
                          out_max: float, clip: bool = False) -> MetaVolume:
    """Linear map [in_min, in_max] -> [out_min, out_max], optional clipping."""
    if not in_max > in_min:
        raise ValueError(f"degenerate input range [{in_min}, {in_max}]")
    data = (v.data.astype(np.float64) - in_min) / (in_max - in_min) * (out_max - out_min) + out_min
    if clip:
        data = np.clip(data, min(out_min, out_max), max(out_min, out_max))
    rec = _record(v, "scale_intensity_range", True,
                  {"in_min": in_min, "in_max": in_max, "out_min": out_min,
                   "out_max": out_max, "clip": clip})
    return _emit(v, data.astype(np.float32), v.affine.copy(), rec)


def _invert_scale_range(rec: TraceRecord, v: MetaVolume) -> MetaVolume:
    e = rec.extra
    if e["clip"]:
        raise NonInvertibleError("scale_intensity_range with clip=True is not invertible")
    if e["out_max"] == e["out_min"]:
        raise NonInvertibleError("scale_intensity_range with degenerate output range is not invertible")
    data = (v.data.astype(np.float64) - e["out_min"]) / (e["out_max"] - e["out_min"]) \
        * (e["in_max"] - e["in_min"]) + e["in_min"]
    return v.evolve(data=data.astype(np.float32), affine=rec.orig_affine.copy())


def rand_gaussian_noise(v: MetaVolume, rng: Rng, mean: float = 0.0, sigma: float = 0.1,
                        prob: float = 1.0) -> MetaVolume:
    """Add i.i.d. Gaussian noise with probability prob; gate drawn first."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    gate = rng.next_float() < prob
    noise = rng.gauss_array(v.data.size).reshape(v.data.shape) * sigma + mean
    if not gate:
        return _noop(v, "rand_gaussian_noise", {"mean": mean, "sigma": sigma})
    data = (v.data.astype(np.float64) + noise).astype(np.float32)
    rec = _record(v, "rand_gaussian_noise", True,
                  {"mean": mean, "sigma": sigma, "invertible": False})
    return _emit(v, data, v.affine.copy(), rec)


def _dft_matrix(n: int, inverse: bool) -> np.ndarray:
    sign = 2j if inverse else -2j
    k = np.arange(n)
    return np.exp(sign * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def _separable_dft(x: np.ndarray, inverse: bool) -> np.ndarray:
    out = np.asarray(x, dtype=np.complex128)
    for ax in range(out.ndim):
        w = _dft_matrix(out.shape[ax], inverse)
        out = np.moveaxis(np.tensordot(w, np.moveaxis(out, ax, 0), axes=1), 0, ax)
    return out


def dft3(channel: np.ndarray) -> np.ndarray:
    """Unitary separable DFT (1/sqrt(N) per axis) of a real spatial array."""
    return _separable_dft(channel, inverse=False)


def idft3(kspace: np.ndarray) -> np.ndarray:
    """Inverse unitary DFT; returns the real part (input assumed Hermitian)."""
    return _separable_dft(kspace, inverse=True).real


def rand_kspace_spike(v: MetaVolume, rng: Rng, spike_gain_range=(5.0, 10.0), prob: float = 1.0,
                      num_spikes: int = 1) -> MetaVolume:
    """Inject localized RF spikes in k-space, one (or num_spikes) per channel.

    The spiked bin is set to gain * max|K| preserving its phase; the
    conjugate-symmetric bin mirrors the conjugate so the output stays real.
    """
    if spike_gain_range[0] <= 0:
        raise ValueError("spike gain must be > 0")
    gate = rng.next_float() < prob
    dims = v.spatial_shape
    n = int(np.prod(dims))
    draws = []
    for _ in range(v.channels):
        for _ in range(num_spikes):
            u = rng.next_float()
            g = rng.uniform(*spike_gain_range)
            lin = 1 + min(int(u * (n - 1)), n - 2)   # excludes the zero-frequency bin
            draws.append((lin, g))
    if not gate:
        return _noop(v, "rand_kspace_spike", {"num_spikes": num_spikes})
    out = np.empty_like(v.data, dtype=np.float32)
    locations, gains = [], []
    di = iter(draws)
    for c in range(v.channels):
        kspace = dft3(v.data[c].astype(np.float64))
        for _ in range(num_spikes):
            lin, g = next(di)
            loc = np.unravel_index(lin, dims)
            mirror = tuple((-i) % d for i, d in zip(loc, dims))
            peak = float(np.abs(kspace).max())
            phase = np.angle(kspace[loc])
            val = g * peak * np.exp(1j * phase)
            kspace[loc] = val
            if mirror != loc:
                kspace[mirror] = np.conj(val)
            locations.append([int(i) for i in loc])
            gains.append(float(g))
        out[c] = idft3(kspace).astype(np.float32)
    rec = _record(v, "rand_kspace_spike", True,
                  {"locations": locations, "gains": gains, "invertible": False})
    return _emit(v, out, v.affine.copy(), rec)


def _not_invertible(rec: TraceRecord, v: MetaVolume) -> MetaVolume:
    raise NonInvertibleError(f"transform {rec.transform_id!r} is not invertible")


INTENSITY_INVERTERS = {
    "normalize_intensity": _invert_normalize,
    "scale_intensity_range": _invert_scale_range,
    "rand_gaussian_noise": _not_invertible,
    "rand_kspace_spike": _not_invertible,
}

"""Command-line front end.

Exit codes: 0 ok, 2 usage/config error, 3 I/O error, 4 transform/inversion error.
"""
from __future__ import annotations

import functools
import json
import math
import os
import sys
import time

import click
import numpy as np

from .core import (FormatError, MetaVolume, NonInvertibleError, Rng, TraceRecord,
                   TransformError)
from .datasets import CacheDataset, DataSource, Dataset, PersistentDataset
from .inference import sliding_window_infer
from .metrics import dice_metric
from .nifti import nifti_load, nifti_save, synth_volume
from .pipeline import Pipeline, compose_apply, invert


def guarded(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            fn(*args, **kwargs)
        except (TransformError, NonInvertibleError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(4)
        except (FileNotFoundError, FormatError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
    return wrapper


def _load_pipeline(path: str, seed: int | None) -> Pipeline:
    with open(path) as f:
        cfg = json.load(f)
    p = Pipeline.from_config(cfg)
    if seed is not None:
        p = p.with_seed(seed)
    return p


def _parse_ints(text: str, n: int | None = None) -> list[int]:
    vals = [int(x) for x in str(text).split(",")]
    if n is not None and len(vals) == 1:
        vals = vals * n
    return vals


def _write_trace(path: str, volume: MetaVolume):
    with open(path, "w") as f:
        json.dump({"applied": [r.to_obj() for r in volume.applied]}, f, indent=1)


def _read_trace(path: str) -> list[TraceRecord]:
    with open(path) as f:
        obj = json.load(f)
    return [TraceRecord.from_obj(o) for o in obj["applied"]]


@click.group()
def main():
    """Medical-volume pipeline engine: transforms, caching, inference, metrics."""


@main.command("transform")
@click.option("--in", "inputs", multiple=True, required=True, help="input .nii path")
@click.option("--out", "outputs", multiple=True, required=True, help="output .nii path")
@click.option("--pipeline", "pipeline_path", required=True)
@click.option("--seed", type=int, default=None)
@click.option("--key", "keys", multiple=True, help="dict key per input (optional)")
@click.option("--label-key", "label_keys", multiple=True)
@guarded
def cmd_transform(inputs, outputs, pipeline_path, seed, keys, label_keys):
    """Apply a pipeline config to NIfTI inputs; writes a .trace.json sidecar."""
    if len(inputs) != len(outputs):
        raise ValueError("--in and --out counts must match")
    if keys and len(keys) != len(inputs):
        raise ValueError("--key count must match --in count")
    p = _load_pipeline(pipeline_path, seed)
    if keys:
        item = {k: nifti_load(path) for k, path in zip(keys, inputs)}
        for step in p.steps:
            if step.keys is None:
                step.keys = list(keys)
            step.label_keys = list(set(step.label_keys) | set(label_keys))
        result = compose_apply(p, item)
        for k, out_path in zip(keys, outputs):
            nifti_save(result[k], out_path)
            _write_trace(out_path + ".trace.json", result[k])
    else:
        if len(inputs) != 1:
            raise ValueError("multiple inputs require --key bindings")
        result = compose_apply(p, nifti_load(inputs[0]))
        nifti_save(result, outputs[0])
        _write_trace(outputs[0] + ".trace.json", result)


@main.command("invert")
@click.option("--in", "input_path", required=True)
@click.option("--trace", "trace_path", required=True)
@click.option("--out", "output_path", required=True)
@guarded
def cmd_invert(input_path, trace_path, output_path):
    """Undo the transforms recorded in a trace sidecar."""
    v = nifti_load(input_path)
    applied = _read_trace(trace_path)
    v = v.evolve(applied=applied)
    if applied:
        v = invert(v)
    nifti_save(v, output_path)


def _gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return arr
    r = max(1, int(math.ceil(3.0 * sigma)))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    k /= k.sum()
    out = arr.astype(np.float64)
    for ax in range(2, out.ndim):   # spatial axes of a (B, C, ...) batch
        out = np.apply_along_axis(lambda m: np.convolve(m, k, mode="same"), ax, out)
    return out


def make_predictor(spec: str):
    """Stub predictors: identity | threshold:<t> | blur-threshold:<sigma>,<t>."""
    if spec == "identity":
        return lambda batch: batch
    if spec.startswith("threshold:"):
        t = float(spec.split(":", 1)[1])
        return lambda batch: (np.asarray(batch) >= t).astype(np.float32)
    if spec.startswith("blur-threshold:"):
        parts = spec.split(":", 1)[1].split(",")
        if len(parts) != 2:
            raise ValueError(f"bad predictor spec {spec!r}: expected blur-threshold:<sigma>,<t>")
        sigma, t = float(parts[0]), float(parts[1])
        return lambda batch: (_gaussian_blur(np.asarray(batch), sigma) >= t).astype(np.float32)
    raise ValueError(f"unknown predictor spec {spec!r}")


@main.command("infer")
@click.option("--in", "input_path", required=True)
@click.option("--out", "output_path", required=True)
@click.option("--predictor", "predictor_spec", default="identity")
@click.option("--roi", default="32", help="window size, scalar or comma list")
@click.option("--overlap", type=float, default=0.25)
@click.option("--blend", type=click.Choice(["constant", "gaussian"]), default="gaussian")
@click.option("--batch", type=int, default=4)
@guarded
def cmd_infer(input_path, output_path, predictor_spec, roi, overlap, blend, batch):
    """Sliding-window inference with a stub predictor."""
    predictor = make_predictor(predictor_spec)
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    v = nifti_load(input_path)
    roi_size = _parse_ints(roi, v.rank)
    out = sliding_window_infer(v, roi_size, overlap, blend, batch, predictor)
    nifti_save(out, output_path)


@main.command("benchmark-cache")
@click.option("--dataset-dir", required=True)
@click.option("--pipeline", "pipeline_path", required=True)
@click.option("--epochs", type=int, default=3)
@click.option("--mode", type=click.Choice(["none", "memory", "persistent"]), default="none")
@click.option("--cache-dir", default=None, help="persistent cache dir (default $MEDVOX_CACHE_DIR)")
@click.option("--seed", type=int, default=0)
@click.option("--json", "as_json", is_flag=True)
@guarded
def cmd_benchmark_cache(dataset_dir, pipeline_path, epochs, mode, cache_dir, seed, as_json):
    """Iterate a directory of .nii items and report cache execution counters."""
    paths = sorted(
        os.path.join(dataset_dir, f) for f in os.listdir(dataset_dir) if f.endswith(".nii")
    )
    if not paths:
        raise FileNotFoundError(f"no .nii files in {dataset_dir}")
    source = DataSource(paths)
    p = _load_pipeline(pipeline_path, seed)
    if mode == "memory":
        ds = CacheDataset(source, p, cache_rate=1.0)
    elif mode == "persistent":
        cache_dir = cache_dir or os.environ.get("MEDVOX_CACHE_DIR")
        if not cache_dir:
            raise ValueError("persistent mode needs --cache-dir or $MEDVOX_CACHE_DIR")
        ds = PersistentDataset(source, p, cache_dir)
    else:
        ds = Dataset(source, p)
    epoch_times = []
    for epoch in range(epochs):
        t0 = time.perf_counter()
        for i in range(len(ds)):
            ds.get(i, epoch)
        epoch_times.append(time.perf_counter() - t0)
    report = {
        "mode": mode,
        "items": len(ds),
        "epochs": epochs,
        "prefix_executions": ds.prefix_executions,
        "suffix_executions": ds.suffix_executions,
        "epoch_seconds": [round(t, 4) for t in epoch_times],
    }
    if as_json:
        click.echo(json.dumps(report))
    else:
        click.echo(f"{'mode':>20}: {mode}")
        click.echo(f"{'items':>20}: {len(ds)}")
        click.echo(f"{'epochs':>20}: {epochs}")
        click.echo(f"{'prefix-executions':>20}: {ds.prefix_executions}")
        click.echo(f"{'suffix-executions':>20}: {ds.suffix_executions}")
        for i, t in enumerate(epoch_times):
            click.echo(f"{f'epoch {i} seconds':>20}: {t:.4f}")


def write_ppm(path: str, rgb: np.ndarray):
    """Binary PPM (P6) from an (H, W, 3) uint8 array."""
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(rgb, dtype=np.uint8).tobytes())


def _to_gray(stack: np.ndarray) -> np.ndarray:
    lo, hi = float(stack.min()), float(stack.max())
    if hi > lo:
        g = (stack - lo) / (hi - lo)
    else:
        g = np.zeros_like(stack)
    return (g * 255.0 + 0.5).astype(np.uint8)


def _tile_grid(slices: np.ndarray) -> np.ndarray:
    n, h, w = slices.shape
    g = math.ceil(math.sqrt(n))
    grid = np.zeros((g * h, g * w), dtype=slices.dtype)
    for i in range(n):
        r, c = divmod(i, g)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = slices[i]
    return grid


@main.command("montage")
@click.option("--in", "input_path", required=True)
@click.option("--out", "output_path", required=True)
@click.option("--axis", type=int, default=2)
@click.option("--every", type=int, default=1)
@guarded
def cmd_montage(input_path, output_path, axis, every):
    """Tile every k-th slice into a near-square grayscale grid (PPM P6)."""
    v = nifti_load(input_path)
    if v.rank != 3:
        raise ValueError("montage requires 3 spatial dims")
    if not 0 <= axis < 3:
        raise ValueError(f"axis must be 0..2, got {axis}")
    if every < 1:
        raise ValueError("--every must be >= 1")
    slices = np.moveaxis(v.data[0], axis, 0)[::every]
    gray = _to_gray(slices.astype(np.float64))
    grid = _tile_grid(gray)
    write_ppm(output_path, np.repeat(grid[:, :, np.newaxis], 3, axis=2))


@main.command("blend")
@click.option("--image", "image_path", required=True)
@click.option("--label", "label_path", required=True)
@click.option("--out", "output_path", required=True)
@click.option("--alpha", type=float, default=0.5)
@click.option("--axis", type=int, default=2)
@click.option("--slice", "slice_index", type=int, default=None, help="default: middle slice")
@guarded
def cmd_blend(image_path, label_path, output_path, alpha, axis, slice_index):
    """Superimpose a label in red over a grayscale image slice (PPM P6)."""
    img = nifti_load(image_path)
    lbl = nifti_load(label_path)
    if img.rank != 3 or img.spatial_shape != lbl.spatial_shape:
        raise ValueError("image and label must be 3D with matching dims")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    dim = img.spatial_shape[axis]
    idx = dim // 2 if slice_index is None else slice_index
    img_slice = np.take(img.data[0], idx, axis=axis).astype(np.float64)
    lbl_slice = np.take(lbl.data[0], idx, axis=axis) > 0.5
    gray = _to_gray(img_slice)
    rgb = np.repeat(gray[:, :, np.newaxis], 3, axis=2).astype(np.float64)
    red = np.array([255.0, 0.0, 0.0])
    rgb[lbl_slice] = (1.0 - alpha) * rgb[lbl_slice] + alpha * red
    write_ppm(output_path, (rgb + 0.5).astype(np.uint8))


@main.command("synth")
@click.option("--out-dir", required=True)
@click.option("--count", type=int, default=1)
@click.option("--dims", default="32,32,32")
@click.option("--objects", type=int, default=1)
@click.option("--noise", type=float, default=0.0)
@click.option("--seed", type=int, default=0)
@guarded
def cmd_synth(out_dir, count, dims, objects, noise, seed):
    """Write (image, label) synthetic NIfTI pairs: img_%03d.nii / lbl_%03d.nii."""
    os.makedirs(out_dir, exist_ok=True)
    dims = _parse_ints(dims, 3)
    rng = Rng(seed)
    for i in range(count):
        image, label = synth_volume(rng, dims, num_objects=objects, noise_sigma=noise)
        nifti_save(image, os.path.join(out_dir, f"img_{i:03d}.nii"))
        nifti_save(label, os.path.join(out_dir, f"lbl_{i:03d}.nii"))


@main.command("dice")
@click.option("--pred", "pred_path", required=True)
@click.option("--truth", "truth_path", required=True)
@click.option("--json", "as_json", is_flag=True)
@guarded
def cmd_dice(pred_path, truth_path, as_json):
    """Per-class and mean Dice between two label volumes."""
    pred = nifti_load(pred_path)
    truth = nifti_load(truth_path)
    if pred.spatial_shape != truth.spatial_shape:
        raise ValueError(
            f"shape mismatch: {pred.spatial_shape} vs {truth.spatial_shape}")
    p = np.rint(pred.data[0]).astype(np.int64)
    t = np.rint(truth.data[0]).astype(np.int64)
    classes = sorted(set(np.unique(p)) | set(np.unique(t)))
    classes = [int(c) for c in classes if c > 0] or [1]
    p_hot = np.stack([(p == c).astype(np.float32) for c in classes])
    t_hot = np.stack([(t == c).astype(np.float32) for c in classes])
    scores, aggregate = dice_metric(p_hot, t_hot)
    if as_json:
        click.echo(json.dumps({
            "classes": classes,
            "dice": [None if np.isnan(s) else float(s) for s in scores],
            "mean": None if np.isnan(aggregate) else float(aggregate),
        }))
    else:
        for c, s in zip(classes, scores):
            click.echo(f"class {c}: {'undefined' if np.isnan(s) else f'{s:.6f}'}")
        click.echo(f"mean: {'undefined' if np.isnan(aggregate) else f'{aggregate:.6f}'}")


if __name__ == "__main__":
    main()

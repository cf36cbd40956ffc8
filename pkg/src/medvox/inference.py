"""Sliding-window inference with blended aggregation, plus a minimal
event-driven evaluation engine."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import MetaVolume

BLEND_MODES = ("constant", "gaussian")


def plan_window_starts(dim: int, roi: int, overlap: float) -> list[int]:
    roi = min(roi, dim)
    interval = max(1, math.floor(roi * (1.0 - overlap)))
    if dim <= roi:
        return [0]
    n = math.ceil((dim - roi) / interval) + 1
    starts = sorted({min(i * interval, dim - roi) for i in range(n)})
    return starts


@dataclass
class WindowPlan:
    roi_size: tuple[int, ...]
    overlap: float
    origins: list[tuple[int, ...]]
    importance_map: np.ndarray
    blend_mode: str


def plan_windows(spatial_dims, roi_size, overlap: float,
                 blend_mode: str = "constant") -> WindowPlan:
    """Window origins covering the volume; origins clamped so windows fit."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    spatial_dims = tuple(int(d) for d in spatial_dims)
    roi_size = tuple(min(int(r), d) for r, d in zip(roi_size, spatial_dims))
    if any(r < 1 for r in roi_size):
        raise ValueError("roi_size must be >= 1 per axis")
    per_axis = [plan_window_starts(d, r, overlap) for d, r in zip(spatial_dims, roi_size)]
    origins = [tuple(o) for o in itertools.product(*per_axis)]
    return WindowPlan(
        roi_size=roi_size,
        overlap=overlap,
        origins=origins,
        importance_map=make_importance_map(roi_size, blend_mode),
        blend_mode=blend_mode,
    )


def make_importance_map(roi_size, blend_mode: str) -> np.ndarray:
    """Per-window blend weights: all ones, or a separable Gaussian with
    sigma = 0.125 * roi per axis, peak 1, floor-clamped at 1e-3."""
    roi_size = tuple(int(r) for r in roi_size)
    if blend_mode == "constant":
        return np.ones(roi_size, dtype=np.float32)
    if blend_mode != "gaussian":
        raise ValueError(f"unknown blend mode {blend_mode!r}")
    out = np.ones(roi_size, dtype=np.float64)
    for ax, r in enumerate(roi_size):
        center = (r - 1) / 2.0
        sigma = 0.125 * r
        x = np.arange(r, dtype=np.float64)
        g = np.exp(-((x - center) ** 2) / (2.0 * sigma * sigma))
        shape = [1] * len(roi_size)
        shape[ax] = r
        out = out * g.reshape(shape)
    out /= out.max()
    return np.maximum(out, 1e-3).astype(np.float32)


def sliding_window_infer(v: MetaVolume, roi_size, overlap: float, blend_mode: str,
                         batch_size: int, predictor) -> MetaVolume:
    """Predict overlapping windows and blend them back with the importance map.

    The predictor maps a (B, C, *roi) batch to (B, C', *roi); accumulation
    runs in float64 and the result is emitted as float32.
    """
    rank = v.rank
    roi_req = tuple(int(r) for r in np.broadcast_to(roi_size, (rank,)))
    dims = v.spatial_shape
    pad_after = [max(0, r - d) for r, d in zip(roi_req, dims)]
    data = v.data
    if any(pad_after):
        data = np.pad(data, [(0, 0)] + [(0, p) for p in pad_after])
    padded_dims = data.shape[1:]
    plan = plan_windows(padded_dims, roi_req, overlap, blend_mode)
    roi = plan.roi_size
    weight_map = plan.importance_map.astype(np.float64)

    out_sum = None
    weight = np.zeros(padded_dims, dtype=np.float64)
    origins = plan.origins
    for i in range(0, len(origins), max(1, batch_size)):
        chunk = origins[i : i + max(1, batch_size)]
        batch = np.stack([
            data[(slice(None),) + tuple(slice(o, o + r) for o, r in zip(org, roi))]
            for org in chunk
        ])
        pred = np.asarray(predictor(batch), dtype=np.float64)
        if pred.shape[0] != len(chunk) or pred.shape[2:] != roi:
            raise ValueError(
                f"predictor output shape {pred.shape} does not match batch {len(chunk)} x roi {roi}")
        if out_sum is None:
            out_sum = np.zeros((pred.shape[1],) + padded_dims, dtype=np.float64)
        for org, window in zip(chunk, pred):
            sl = tuple(slice(o, o + r) for o, r in zip(org, roi))
            out_sum[(slice(None),) + sl] += window * weight_map
            weight[sl] += weight_map
    assert weight.min() > 0.0, "window plan left voxels uncovered"
    out = out_sum / weight
    crop = tuple(slice(0, d) for d in dims)
    out = np.ascontiguousarray(out[(slice(None),) + crop], dtype=np.float32)
    meta = dict(v.meta)
    if any(pad_after):
        meta["sys.sw_padded"] = [int(p) for p in pad_after]
    return MetaVolume(out, v.affine.copy(), meta, [])


class Events(Enum):
    STARTED = "started"
    EPOCH_STARTED = "epoch_started"
    ITERATION_STARTED = "iteration_started"
    ITERATION_COMPLETED = "iteration_completed"
    EPOCH_COMPLETED = "epoch_completed"
    COMPLETED = "completed"
    EXCEPTION_RAISED = "exception_raised"


@dataclass
class EngineState:
    epoch: int = 0
    iteration: int = 0
    output: object = None
    exception: BaseException | None = None
    exception_handled: bool = False
    extra: dict = field(default_factory=dict)


class Engine:
    """Runs step_fn over data for max_epochs, firing handlers per event."""

    def __init__(self):
        self._handlers: list[tuple[Events, object]] = []

    def add_handler(self, event: Events, fn) -> "Engine":
        self._handlers.append((event, fn))
        return self

    def _fire(self, event: Events, state: EngineState):
        for kind, fn in self._handlers:
            if kind is event:
                fn(state)

    def run(self, data, step_fn, max_epochs: int = 1) -> EngineState:
        state = EngineState()
        self._fire(Events.STARTED, state)
        try:
            for epoch in range(1, max_epochs + 1):
                state.epoch = epoch
                self._fire(Events.EPOCH_STARTED, state)
                for item in data:
                    state.iteration += 1
                    self._fire(Events.ITERATION_STARTED, state)
                    state.output = step_fn(state, item)
                    self._fire(Events.ITERATION_COMPLETED, state)
                self._fire(Events.EPOCH_COMPLETED, state)
            self._fire(Events.COMPLETED, state)
        except BaseException as exc:
            state.exception = exc
            self._fire(Events.EXCEPTION_RAISED, state)
            if not state.exception_handled:
                raise
        return state


def engine_run(data, step_fn, handlers=(), max_epochs: int = 1) -> EngineState:
    engine = Engine()
    for kind, fn in handlers:
        engine.add_handler(kind, fn)
    return engine.run(data, step_fn, max_epochs)


def evaluate(items, predictor, metric, roi_size, overlap: float = 0.25,
             blend_mode: str = "gaussian", batch_size: int = 4) -> float:
    """Sliding-window inference over {image, label} items, accumulating a metric."""
    metric.reset()

    def step(state, item):
        pred = sliding_window_infer(item["image"], roi_size, overlap, blend_mode,
                                    batch_size, predictor)
        metric.accumulate(pred.data, item["label"].data)
        return pred

    engine_run(items, step, max_epochs=1)
    return metric.aggregate()

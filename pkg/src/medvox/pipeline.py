"""Transform composition: keyed application, derived seeding, inversion, TTA.

Pipelines are built from named steps resolved through a transform registry,
so the same step list can come from code or from a JSON config:
{"seed": u64, "steps": [{"name": str, "args": {...}, "keys": [...], "label_keys": [...]}]}.

Per-step RNG seeds are chained from (base_seed, epoch, item_index, step_index),
which makes outputs independent of execution order and caching.
"""
from __future__ import annotations

import secrets
from dataclasses import dataclass, field

import numpy as np

from . import intensity, spatial
from .core import (MetaVolume, NonInvertibleError, Rng, TraceRecord, TransformError,
                   derive_seed)


@dataclass(frozen=True)
class TransformSpec:
    fn: object
    random: bool
    invertible: bool
    has_mode: bool   # accepts a `mode` kwarg that labels override with nearest


TRANSFORMS: dict[str, TransformSpec] = {
    "orientation": TransformSpec(spatial.orientation_to, False, True, False),
    "spacing": TransformSpec(spatial.spacing_to, False, True, True),
    "flip": TransformSpec(spatial.flip, False, True, False),
    "rand_flip": TransformSpec(spatial.rand_flip, True, True, False),
    "rotate": TransformSpec(spatial.rotate, False, True, True),
    "zoom": TransformSpec(spatial.zoom, False, True, True),
    "affine": TransformSpec(spatial.affine_resample, False, True, True),
    "crop_pad": TransformSpec(spatial.crop_pad, False, True, False),
    "rand_elastic_3d": TransformSpec(spatial.rand_elastic_3d, True, False, True),
    "warp": TransformSpec(spatial.warp, False, False, True),
    "normalize_intensity": TransformSpec(intensity.normalize_intensity, False, True, False),
    "scale_intensity_range": TransformSpec(intensity.scale_intensity_range, False, True, False),
    "rand_gaussian_noise": TransformSpec(intensity.rand_gaussian_noise, True, False, False),
    "rand_kspace_spike": TransformSpec(intensity.rand_kspace_spike, True, False, False),
}

INVERTERS = dict(spatial.SPATIAL_INVERTERS)
INVERTERS.update(intensity.INTENSITY_INVERTERS)
SPATIAL_IDS = frozenset(spatial.SPATIAL_INVERTERS)


@dataclass
class Step:
    name: str
    args: dict = field(default_factory=dict)
    keys: list | None = None
    label_keys: list = field(default_factory=list)

    def to_obj(self) -> dict:
        return {"name": self.name, "args": self.args,
                "keys": self.keys, "label_keys": self.label_keys}

    @classmethod
    def from_obj(cls, obj: dict) -> "Step":
        return cls(name=obj["name"], args=dict(obj.get("args", {})),
                   keys=obj.get("keys"), label_keys=list(obj.get("label_keys", [])))


_global_seed_rng: Rng | None = None


def set_determinism(seed: int | None) -> None:
    """Seed (or unseed) the default base_seed source for new Pipelines."""
    global _global_seed_rng
    _global_seed_rng = None if seed is None else Rng(seed)


def _default_base_seed() -> int:
    if _global_seed_rng is not None:
        return _global_seed_rng.next_u64()
    return secrets.randbits(64)


class Pipeline:
    def __init__(self, steps, base_seed: int | None = None):
        self.steps: list[Step] = []
        for s in steps:
            step = s if isinstance(s, Step) else Step.from_obj(s)
            if step.name not in TRANSFORMS:
                raise ValueError(f"unknown transform {step.name!r}")
            self.steps.append(step)
        self.base_seed = _default_base_seed() if base_seed is None else int(base_seed)

    @property
    def deterministic_prefix_len(self) -> int:
        for i, step in enumerate(self.steps):
            if TRANSFORMS[step.name].random:
                return i
        return len(self.steps)

    def config(self) -> dict:
        return {"seed": self.base_seed, "steps": [s.to_obj() for s in self.steps]}

    @classmethod
    def from_config(cls, cfg: dict) -> "Pipeline":
        return cls(cfg.get("steps", []), base_seed=cfg.get("seed"))

    def with_seed(self, seed: int) -> "Pipeline":
        return Pipeline(self.steps, base_seed=seed)

    def __call__(self, item, item_index: int = 0, epoch: int = 0):
        return compose_apply(self, item, item_index, epoch)


def _step_label(step: Step, index: int) -> str:
    return f"{step.name}[{index}]"


def _run_step(step: Step, volume: MetaVolume, seed: int, as_label: bool) -> MetaVolume:
    spec = TRANSFORMS[step.name]
    kwargs = dict(step.args)
    if as_label and spec.has_mode:
        kwargs["mode"] = "nearest"
    if spec.random:
        return spec.fn(volume, Rng(seed), **kwargs)
    return spec.fn(volume, **kwargs)


def _apply_step(step: Step, index: int, item, seed: int):
    try:
        if isinstance(item, MetaVolume):
            return _run_step(step, item, seed, as_label=False)
        out = dict(item)
        keys = step.keys if step.keys is not None else list(item.keys())
        for key in keys:
            if key not in item:
                raise KeyError(f"bound key {key!r} missing from data dict")
            out[key] = _run_step(step, item[key], seed, as_label=key in step.label_keys)
        return out
    except (NonInvertibleError, TransformError):
        raise
    except Exception as exc:
        raise TransformError(f"step {_step_label(step, index)} failed: {exc}",
                             step=_step_label(step, index)) from exc


def compose_apply_range(p: Pipeline, item, item_index: int, epoch: int,
                        start: int, stop: int):
    """Apply steps [start, stop); seeds use absolute step indices."""
    for i in range(start, stop):
        seed = derive_seed(p.base_seed, epoch, item_index, i)
        item = _apply_step(p.steps[i], i, item, seed)
    return item


def compose_apply(p: Pipeline, item, item_index: int = 0, epoch: int = 0):
    """Apply the full pipeline with deterministic per-(item, epoch, step) seeding."""
    return compose_apply_range(p, item, item_index, epoch, 0, len(p.steps))


def one_of(steps, weights, rng: Rng, item):
    """Apply exactly one step, chosen by normalized weights with one draw."""
    steps = [s if isinstance(s, Step) else Step.from_obj(s) for s in steps]
    weights = [float(w) for w in weights]
    if len(weights) != len(steps):
        raise ValueError("weights length must match steps")
    if any(w < 0 for w in weights):
        raise ValueError("weights must be >= 0")
    total = sum(weights)
    if total <= 0:
        raise ValueError("at least one weight must be > 0")
    u = rng.next_float() * total
    chosen = len(weights) - 1
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if u < acc:
            chosen = i
            break
    seed = rng.next_u64()
    item = _apply_step(steps[chosen], chosen, item, seed)

    def mark(vol: MetaVolume) -> MetaVolume:
        rec = TraceRecord("one_of", True, tuple(vol.spatial_shape), vol.affine.copy(),
                          {"chosen": chosen, "name": steps[chosen].name})
        return vol.evolve(applied=list(vol.applied) + [rec])

    if isinstance(item, MetaVolume):
        return mark(item)
    return {k: mark(v) for k, v in item.items()}


def _invert_one_of(rec: TraceRecord, v: MetaVolume) -> MetaVolume:
    return v.copy()


INVERTERS["one_of"] = _invert_one_of


def _invert_volume(v: MetaVolume, depth: int | None, spatial_only: bool) -> MetaVolume:
    if depth is None:
        depth = len(v.applied)
        if depth == 0:
            raise NonInvertibleError("applied stack is empty; nothing to invert")
    for _ in range(depth):
        if not v.applied:
            raise NonInvertibleError("applied stack exhausted before requested depth")
        rec = v.applied[-1]
        remaining = v.applied[:-1]
        if not rec.do_transform:
            v = v.evolve(applied=remaining)
            continue
        if spatial_only and rec.transform_id not in SPATIAL_IDS and rec.transform_id != "one_of":
            v = v.evolve(applied=remaining)
            continue
        inverter = INVERTERS.get(rec.transform_id)
        if inverter is None:
            raise NonInvertibleError(f"unknown transform {rec.transform_id!r} in trace")
        v = inverter(rec, v)
        v = v.evolve(applied=remaining)
    return v


def invert(item, depth: int | None = None, spatial_only: bool = False):
    """Pop trace records last-in-first-out, applying each inverse."""
    if isinstance(item, MetaVolume):
        return _invert_volume(item, depth, spatial_only)
    return {k: _invert_volume(v, depth, spatial_only) for k, v in item.items()}


def tta(p: Pipeline, image: MetaVolume, predictor, n_runs: int, rng: Rng):
    """Test-time augmentation: augment, predict, invert, aggregate.

    Returns (mean, std) MetaVolumes; std is the population standard deviation
    over runs. Predictions inherit the augmented input's trace so spatial
    augmentations can be undone on them.
    """
    for i, step in enumerate(p.steps):
        spec = TRANSFORMS[step.name]
        if spec.random and not spec.invertible and step.name in (
                "rand_elastic_3d",):
            raise NonInvertibleError(
                f"step {_step_label(step, i)} is a non-invertible spatial augmentation")
    stack = []
    for _ in range(n_runs):
        run = p.with_seed(rng.next_u64())
        aug = compose_apply(run, image, 0, 0)
        out = predictor(aug)
        if isinstance(out, np.ndarray):
            out = MetaVolume(out, aug.affine.copy(), dict(aug.meta), list(aug.applied))
        else:
            out = out.evolve(affine=aug.affine.copy(), applied=list(aug.applied))
        if aug.applied:
            out = _invert_volume(out, None, spatial_only=True)
        stack.append(out.data.astype(np.float64))
    arr = np.stack(stack)
    mean = arr.mean(axis=0).astype(np.float32)
    std = arr.std(axis=0).astype(np.float32)
    base = MetaVolume(mean, image.affine.copy(), dict(image.meta), [])
    return base, base.evolve(data=std)

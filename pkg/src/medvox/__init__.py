"""medvox: metadata-carrying medical volumes with invertible transforms,
deterministic-prefix caching and sliding-window inference."""

from .core import (FormatError, MetaVolume, NonInvertibleError, Rng, TraceRecord,
                   TransformError, derive_seed, identity_affine, mvol_dumps,
                   mvol_loads, mvol_read, mvol_write, volume_to_world)
from .datasets import CacheDataset, DataSource, Dataset, PersistentDataset, cache_key
from .inference import (Engine, EngineState, Events, WindowPlan, engine_run, evaluate,
                        make_importance_map, plan_windows, sliding_window_infer)
from .intensity import (dft3, idft3, normalize_intensity, rand_gaussian_noise,
                        rand_kspace_spike, scale_intensity_range)
from .metrics import (DiceMetric, bending_energy, dice_loss, dice_metric, focal_loss,
                      generalized_dice_loss, mse_loss, occlusion_sensitivity,
                      tversky_loss)
from .nifti import nifti_load, nifti_save, synth_volume
from .pipeline import (Pipeline, Step, compose_apply, invert, one_of,
                       set_determinism, tta)
from .spatial import (affine_resample, axis_codes, crop_pad, flip, orientation_to,
                      rand_elastic_3d, rand_flip, rotate, spacing_to, warp, zoom)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

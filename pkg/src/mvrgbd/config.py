"""Flat key=value configuration with typed keys and strict validation.

One namespace covers every tunable: schedule, depth sampling, camera rig,
network widths, training, and extraction thresholds. Files hold ``key =
value`` lines (``#`` comments allowed); unknown keys are rejected so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataset as ds
from . import schedule as sched
from .denoiser import DenoiserConfig
from .engine import TrainConfig
from .errors import ConfigError


@dataclass(frozen=True)
class _Key:
    kind: type
    default: object
    help: str


_BOOL_TRUE = {"true", "1", "yes", "on"}
_BOOL_FALSE = {"false", "0", "no", "off"}

SPEC: dict[str, _Key] = {
    "seed": _Key(int, 0, "root seed; every stage derives its own stream from it"),
    # diffusion schedule and depth sampling
    "schedule_T": _Key(int, 100, "number of diffusion steps"),
    "beta_start": _Key(float, 1e-3, "first beta of the linear schedule"),
    "beta_end": _Key(float, 0.2, "last beta of the linear schedule"),
    "depth_k": _Key(float, 1.0, "scale of the depth-sample spread sigma(t)"),
    "depth_D": _Key(int, 3, "depth samples per frustum ray"),
    "schedule_form": _Key(str, "reciprocal",
                          "sigma(t) law: 'reciprocal' or 'verbatim'"),
    "omega": _Key(float, 2.0, "classifier-free guidance weight at sampling"),
    # camera rig and renderer
    "num_views": _Key(int, 16, "cameras on the orbit rig"),
    "elevation_deg": _Key(float, 30.0, "rig elevation above the equator"),
    "radius": _Key(float, 2.0, "rig orbit radius"),
    "image_size": _Key(int, 32, "square image resolution"),
    "near": _Key(float, 1.0, "near depth bound"),
    "far": _Key(float, 3.0, "far depth bound"),
    "num_scenes": _Key(int, 10, "scenes generated by gen-data"),
    # denoiser
    "base_channels": _Key(int, 48, "UNet width at full resolution"),
    "feature_channels": _Key(int, 32, "first-conv tap width shared with the gather"),
    "emb_dim": _Key(int, 128, "conditioning embedding width"),
    "time_dim": _Key(int, 64, "sinusoidal step-feature width"),
    "heads": _Key(int, 4, "attention heads (UNet and aggregator)"),
    "agg_hidden": _Key(int, 48, "aggregator transformer width"),
    "agg_out": _Key(int, 64, "aggregated frustum feature width"),
    "agg_layers": _Key(int, 2, "aggregator transformer depth"),
    "agg_time_dim": _Key(int, 32, "aggregator step-feature width"),
    "use_frustum_attention": _Key(bool, True,
                                  "false trains/samples the ablated model"),
    # training
    "steps": _Key(int, 2000, "optimizer steps"),
    "batch_size": _Key(int, 1, "scenes per optimizer step"),
    "learning_rate": _Key(float, 1e-4, "Adam learning rate"),
    "views_per_sample": _Key(int, 5, "views drawn per scene (first conditions)"),
    "cfg_dropout": _Key(float, 0.1, "chance a step trains unconditionally"),
    "checkpoint_every": _Key(int, 500, "checkpoint cadence in steps (0: final only)"),
    # extraction and evaluation
    "depth_threshold": _Key(float, 0.98,
                            "foreground rule: depth < threshold * far"),
}


def defaults() -> dict:
    return {name: key.default for name, key in SPEC.items()}


def parse_value(name: str, text: str):
    """One typed value; raises ConfigError naming the key on any problem."""
    if name not in SPEC:
        raise ConfigError(f"unknown config key '{name}'")
    kind = SPEC[name].kind
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ConfigError(f"{name}: expected a boolean, got '{text}'")
    try:
        value = kind(text)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got '{text}'") from None
    if name == "schedule_form" and value not in ("reciprocal", "verbatim"):
        raise ConfigError(f"schedule_form: '{value}' is not 'reciprocal' or 'verbatim'")
    return value


def load_config(path) -> dict:
    """Defaults overlaid with a config file; strict about every line."""
    values = defaults()
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got '{line}'")
            name, text = line.split("=", 1)
            name = name.strip()
            try:
                values[name] = parse_value(name, text)
            except ConfigError as e:
                raise ConfigError(f"{path}:{lineno}: {e}") from None
    return values


def apply_overrides(values: dict, overrides) -> dict:
    """Apply ``key=value`` strings (from --set flags) on top of ``values``."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        name, text = item.split("=", 1)
        values[name.strip()] = parse_value(name.strip(), text)
    return values


def describe() -> str:
    """One line per key for --help: name, default, meaning."""
    width = max(len(name) for name in SPEC)
    lines = ["config keys (file or --set, defaults shown):"]
    for name, key in SPEC.items():
        default = str(key.default).lower() if key.kind is bool else key.default
        lines.append(f"  {name:<{width}}  = {default!s:<12} {key.help}")
    return "\n".join(lines)


# -- object builders -------------------------------------------------------

def build_schedule(values: dict) -> sched.NoiseSchedule:
    return sched.linear_schedule(values["schedule_T"], values["beta_start"],
                                 values["beta_end"])


def build_depth_params(values: dict) -> sched.DepthSampleParams:
    return sched.DepthSampleParams(
        k=values["depth_k"], D=values["depth_D"],
        schedule_form=sched.ScheduleForm(values["schedule_form"]))


def build_rig(values: dict) -> list:
    return ds.make_rig(num_views=values["num_views"],
                       elevation_deg=values["elevation_deg"],
                       radius=values["radius"],
                       image_size=values["image_size"])


def build_denoiser_config(values: dict) -> DenoiserConfig:
    return DenoiserConfig(
        image_size=values["image_size"],
        base_channels=values["base_channels"],
        heads=values["heads"],
        feature_channels=values["feature_channels"],
        emb_dim=values["emb_dim"],
        time_dim=values["time_dim"],
        frustum_grid=values["image_size"] // 2,
        agg_hidden=values["agg_hidden"],
        agg_out=values["agg_out"],
        agg_layers=values["agg_layers"],
        agg_time_dim=values["agg_time_dim"],
        use_frustum_attention=values["use_frustum_attention"],
    )


def build_train_config(values: dict, out_dir=None, seed=None) -> TrainConfig:
    return TrainConfig(
        steps=values["steps"],
        batch_size=values["batch_size"],
        learning_rate=values["learning_rate"],
        views_per_sample=values["views_per_sample"],
        cfg_dropout=values["cfg_dropout"],
        seed=values["seed"] if seed is None else seed,
        checkpoint_every=values["checkpoint_every"],
        out_dir=out_dir,
    )


_STAGES = {"gen-data": 0, "train": 1, "sample": 2, "eval": 3, "bench": 4}


def stage_seed(root: int, stage: str) -> int:
    """Deterministic per-stage child of the root seed."""
    seq = np.random.SeedSequence(entropy=int(root), spawn_key=(_STAGES[stage],))
    return int(seq.generate_state(1, dtype=np.uint64)[0] % (2 ** 63))

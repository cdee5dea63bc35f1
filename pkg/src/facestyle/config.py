"""Run configuration: one nested dict of every tunable, plus builders.

A run is reproducible from (config, seed). The command line reads a JSON
file shaped like DEFAULTS, deep-merges it over a scale preset, and hands
the merged dict to the builder helpers below; the same dict feeds the
checkpoint fingerprint so stale artifacts are caught at load time.
"""

import copy
import json

from .checkpoint import config_fingerprint
from .deform import DeformConfig
from .losses import LossWeights
from .mage import MageConfig
from .morphable import MorphConfig, build_toy_model
from .render import RenderConfig
from .training import Schedule

DEFAULTS = {
    "seed": 0,
    "morphable": {
        "k_shape": 16,
        "k_expr": 8,
        "n_lat": 24,
        "n_lon": 25,
        "coeff_low": -2.0,
        "coeff_high": 2.0,
        "basis_amplitude": 0.008,
        "max_modes": 8,
        "laplacian_cap": 0.1,
        "freq_scale": 1.5,
    },
    "deform": {
        "d_s": 64,
        "d_e": 32,
        "map_hidden": 64,
        "siren_hidden": 64,
        "siren_layers": 3,
        "omega0": 30.0,
        "hyper_hidden": 128,
        "head_scale": 1e-2,
    },
    # latent widths are taken from the deform section so the two nets
    # cannot drift apart
    "mage": {
        "feat_hidden": 64,
        "feat_dim": 128,
        "mapper_hidden": 256,
        "n_points": 512,
        "pretrain_iterations": 1500,
        "pretrain_rate": 1e-3,
        "heldout_count": 32,
    },
    "weights": {
        "lambda_vert": 80.0,
        "lambda_clip": 2e-3,
        "lambda_in": 6e-3,
        "lambda_across": 6e-3,
        "lambda_style": 4e-3,
    },
    "render": {
        "resolution": 64,
        "sigma": 1e-4,
        "gamma": 1e-4,
    },
    "train_ds": {
        "sampling": "sims",
        "initial_rate": 1e-3,
        "final_rate": 3e-6,
        "iterations": 5000,
        "decay": "linear",
        "pool_size": 2000,
        "batch": 8,
    },
    "train_dt": {
        "initial_rate": 1e-4,
        "final_rate": 3e-5,
        "iterations": 300,
        "decay": "linear",
        "style_mode": "pseudo",
    },
    "train_mage": {
        "initial_rate": 3e-4,
        "final_rate": 5e-5,
        "iterations": 3000,
        "decay": "linear",
    },
    "ablate": {
        "seeds": [0, 1, 2],
        "eval_count": 20,
        "eval_seed": 9000,
    },
}

# Scale presets. "desk" is the default operating point and runs the whole
# pipeline on a laptop. "paper" is the published operating point for the
# source-field stage (far longer schedule, much larger draw pool); it is
# kept for completeness, not for interactive use.
PRESETS = {
    "desk": {},
    "paper": {
        "train_ds": {
            "initial_rate": 1e-6,
            "final_rate": 1e-6,
            "iterations": 400000,
            "decay": "constant",
            "pool_size": 100000,
            "batch": 1,
        },
        "train_dt": {
            "initial_rate": 3e-5,
            "final_rate": 1e-5,
            "iterations": 2000,
        },
        "train_mage": {
            "iterations": 12000,
        },
    },
}

_CHOICE_KEYS = {
    ("train_ds", "sampling"): ("sims", "hybrid", "vertex"),
    ("train_ds", "decay"): ("linear", "constant"),
    ("train_dt", "decay"): ("linear", "constant"),
    ("train_mage", "decay"): ("linear", "constant"),
    ("train_dt", "style_mode"): ("pseudo", "direct"),
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def preset_config(name: str = "desk") -> dict:
    """Defaults with one scale preset merged on top."""
    if name not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise ValueError(f"unknown preset {name!r} (choose from: {known})")
    return merge_config(default_config(), PRESETS[name])


def merge_config(base: dict, override: dict, _path: str = "") -> dict:
    """Deep-merge override into base, rejecting keys base does not have.

    Mutates and returns ``base``. Every leaf in ``override`` must name an
    existing leaf of the same kind (section vs value), so typos fail loud
    instead of silently training with defaults.
    """
    for key, value in override.items():
        where = f"{_path}{key}"
        if key not in base:
            raise ValueError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValueError(f"config key {where!r} must be a section")
            merge_config(base[key], value, _path=where + ".")
        else:
            if isinstance(value, dict):
                raise ValueError(f"config key {where!r} is not a section")
            base[key] = value
    return base


def validate_config(cfg: dict):
    """Cross-field checks shared by every entry point."""
    for (section, key), allowed in _CHOICE_KEYS.items():
        value = cfg[section][key]
        if value not in allowed:
            raise ValueError(
                f"config key {section}.{key} must be one of {allowed}, "
                f"got {value!r}"
            )
    for section in ("train_ds", "train_dt", "train_mage"):
        if cfg[section]["iterations"] < 0:
            raise ValueError(f"config key {section}.iterations must be >= 0")
    if cfg["train_ds"]["batch"] < 1:
        raise ValueError("config key train_ds.batch must be >= 1")
    if cfg["render"]["resolution"] < 4:
        raise ValueError("config key render.resolution must be at least 4")


def load_config(path=None, preset: str = "desk") -> dict:
    """Preset defaults, optionally overridden by a JSON file."""
    cfg = preset_config(preset)
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            override = json.load(fh)
        if not isinstance(override, dict):
            raise ValueError("config file must hold a JSON object")
        merge_config(cfg, override)
    validate_config(cfg)
    return cfg


def fingerprint(cfg: dict) -> str:
    return config_fingerprint(cfg)


# ---------------------------------------------------------------------------
# builders: config dict -> the objects the library actually consumes


def build_morphable(cfg: dict, seed=None):
    if seed is None:
        seed = cfg["seed"]
    return build_toy_model(MorphConfig(**cfg["morphable"]), seed=seed)


def build_deform_config(cfg: dict) -> DeformConfig:
    return DeformConfig(**cfg["deform"])


def build_mage_config(cfg: dict) -> MageConfig:
    return MageConfig(
        d_s=cfg["deform"]["d_s"],
        d_e=cfg["deform"]["d_e"],
        **cfg["mage"],
    )


def build_weights(cfg: dict) -> LossWeights:
    return LossWeights(**cfg["weights"])


def build_render_config(cfg: dict) -> RenderConfig:
    return RenderConfig(**cfg["render"])


def build_schedule(cfg: dict, stage: str) -> Schedule:
    """Learning-rate schedule for one of the train_* sections."""
    section = cfg[stage]
    return Schedule(
        initial_rate=section["initial_rate"],
        final_rate=section["final_rate"],
        total_iterations=section["iterations"],
        decay=section["decay"],
    )

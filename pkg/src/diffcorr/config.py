"""JSON run configuration: strict keys, documented defaults, manifest echo."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .synth import CORRUPTION_KINDS, TEXTURE_KINDS

# Structural settings live in the config file; command-line flags are
# reserved for paths, seeds and sweep axes.
DEFAULTS: dict = {
    "data": {
        "resolution": 128,
        "count": 200,
        "magnitude": 24.0,
        "textures": list(TEXTURE_KINDS),
        "seed": 0,
        "corruption_kind": None,  # one of CORRUPTION_KINDS or null
        "corruption_severity": 3,
        "corrupt_both": False,
    },
    "model": {
        "extractor_seed": 0,
        "extractor_channels": 32,
        "base_channels": 32,
        "radius": 7,
        "time_dim": 64,
        "use_init": True,
        "use_local_cost": True,
        "temperature": 0.02,
    },
    "diffusion": {
        "T": 5,
        "eta": 0.0,
        "hypotheses": 3,
        "steps": None,  # null: use all T steps
    },
    "train": {
        "lr": 1e-4,
        "iters": 5000,
        "batch": 2,
        "seed": 0,
        "weight_decay": 0.0,
        "log_every": 50,
        "ckpt_every": 1000,
    },
    "cascade": {
        "factor": 4,
        "finetune_lr": 3e-5,
        "finetune_iters": 600,
        "batch": 1,
        "cond_noise_px": 1.0,
        "train_subset": 400,
    },
}


def _merge(defaults: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(defaults[key], dict) and not isinstance(value, dict):
            raise ConfigError(f"{where} must be a section object")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value, where)
        else:
            out[key] = value
    return out


def _validate(cfg: dict) -> None:
    data = cfg["data"]
    if data["corruption_kind"] is not None and data["corruption_kind"] not in CORRUPTION_KINDS:
        raise ConfigError(
            f"data.corruption_kind {data['corruption_kind']!r} not in {sorted(CORRUPTION_KINDS)}"
        )
    if not 1 <= int(data["corruption_severity"]) <= 5:
        raise ConfigError("data.corruption_severity must be in 1..5")
    for t in data["textures"]:
        if t not in TEXTURE_KINDS:
            raise ConfigError(f"data.textures entry {t!r} not in {sorted(TEXTURE_KINDS)}")
    if int(data["resolution"]) % 4:
        raise ConfigError("data.resolution must be divisible by 4")
    if cfg["model"]["radius"] % 2 == 0:
        raise ConfigError("model.radius must be odd")
    if int(cfg["diffusion"]["T"]) < 1:
        raise ConfigError("diffusion.T must be >= 1")
    steps = cfg["diffusion"]["steps"]
    if steps is not None and not 1 <= int(steps) <= int(cfg["diffusion"]["T"]):
        raise ConfigError("diffusion.steps must lie in 1..T")
    if cfg["cascade"]["factor"] != 4:
        raise ConfigError("cascade.factor is fixed at 4")


def load_config(path=None) -> dict:
    """Defaults merged with the JSON file at ``path``; unknown keys rejected."""
    if path is None:
        cfg = copy.deepcopy(DEFAULTS)
    else:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(DEFAULTS, raw, "")
    _validate(cfg)
    return cfg


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, command: str, cfg: dict, extras: dict) -> None:
    """Reproducibility record: effective config, arguments, artifact digests."""
    manifest = {
        "schema_version": 1,
        "tool_version": __version__,
        "command": command,
        "config": cfg,
        **extras,
    }
    Path(path).write_text(json.dumps(manifest, indent=1, sort_keys=True))

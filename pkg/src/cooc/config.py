"""Flat key=value configuration files with typed parsing and override merging.

The key set is exactly ``TrainConfig.to_flat_dict()``: top-level training
keys plus ``arch.``-prefixed architecture keys and ``aug.``-prefixed
augmentation keys. ``loss.`` and ``probe.`` prefixes are accepted as aliases
for their unprefixed counterparts (``loss.w_s`` = ``w_s``,
``probe.lr`` = ``probe_lr``).
"""

from __future__ import annotations

import difflib
import os

from .augment import AugmentationPolicy
from .rf import ArchConfig
from .trainer import TrainConfig

_ALIASES = {
    "loss.w_s": "w_s",
    "loss.tau": "tau",
    "loss.grid_target": "grid_target",
    "loss.proj_hidden": "proj_hidden",
    "loss.proj_out": "proj_out",
    "probe.lr": "probe_lr",
    "probe.eval_layer": "eval_layer",
}

_BOOL_TRUE = ("1", "true", "yes", "on")
_BOOL_FALSE = ("0", "false", "no", "off")


def known_keys():
    base = set(TrainConfig().to_flat_dict())
    return base | set(_ALIASES)


def _convert(key, raw, default):
    if isinstance(default, bool):
        low = str(raw).strip().lower()
        if low in _BOOL_TRUE:
            return True
        if low in _BOOL_FALSE:
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ValueError(f"{key}: expected {type(default).__name__}, got {raw!r}") from None
    return str(raw)


def read_config_file(path):
    """Parse a key=value file into a flat string dict (comments with #)."""
    flat = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            flat[key.strip()] = value.strip()
    return flat


def resolve_config(file_flat=None, overrides=None, env=None):
    """Merge file keys and overrides (overrides win) into a TrainConfig.

    ``env`` supplies the ``COOC_SEED`` fallback when neither source sets a
    seed. Unknown keys raise with the nearest valid key named.
    """
    env = os.environ if env is None else env
    merged = dict(file_flat or {})
    merged.update(overrides or {})

    valid = known_keys()
    normalized = {}
    for key, raw in merged.items():
        canon = _ALIASES.get(key, key)
        if canon not in valid and not (canon.startswith("arch.") or canon.startswith("aug.")):
            hint = difflib.get_close_matches(key, sorted(valid), n=1)
            suffix = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ValueError(f"unknown config key {key!r}{suffix}")
        if canon.startswith("arch.") or canon.startswith("aug."):
            prefix = canon.split(".", 1)[0] + "."
            known_sub = set(ArchConfig().to_flat_dict() if prefix == "arch."
                            else AugmentationPolicy().to_flat_dict())
            if canon not in known_sub:
                hint = difflib.get_close_matches(canon, sorted(known_sub), n=1)
                suffix = f"; did you mean {hint[0]!r}?" if hint else ""
                raise ValueError(f"unknown config key {key!r}{suffix}")
        normalized[canon] = raw

    if "seed" not in normalized and env.get("COOC_SEED"):
        normalized["seed"] = env["COOC_SEED"]

    arch_flat = {k: v for k, v in normalized.items() if k.startswith("arch.")}
    aug_flat = {k: v for k, v in normalized.items() if k.startswith("aug.")}
    defaults = TrainConfig()
    kwargs = {}
    for key, raw in normalized.items():
        if key.startswith(("arch.", "aug.")):
            continue
        kwargs[key] = _convert(key, raw, getattr(defaults, key))
    if arch_flat:
        base_flat = defaults.arch.to_flat_dict()
        base_flat.update({k: str(v) for k, v in arch_flat.items()})
        kwargs["arch"] = ArchConfig.from_flat_dict({k: str(v) for k, v in base_flat.items()})
    if aug_flat:
        base_flat = defaults.policy.to_flat_dict()
        base_flat.update({k: str(v) for k, v in aug_flat.items()})
        kwargs["policy"] = AugmentationPolicy.from_flat_dict({k: str(v) for k, v in base_flat.items()})
    return TrainConfig(**kwargs)


def parse_config(path=None, overrides=None, env=None):
    file_flat = read_config_file(path) if path else {}
    return resolve_config(file_flat, overrides, env=env)

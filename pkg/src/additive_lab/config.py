"""Experiment configuration: preset defaults, overrides and validation."""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

__all__ = ["ConfigError", "PRESETS", "resolve_config", "load_config", "dump_config"]


class ConfigError(ValueError):
    """Bad configuration; the message names the offending key path."""


_ETA_RAW_HE3 = 0.3 * math.sqrt(6.0)  # eta0 = 0.3 on the raw He_3 label scale

_TARGET = {"d": 64, "M": 16, "p": 3, "link": None, "mode": "canonical", "noise_std": 0.0}
_NETWORK = {
    "J": 8192, "activation": "relu", "q": None, "normalization": "sqrt_i",
    "C_b": 1.0, "C_b_init": None, "init_bias": "uniform",
}
_OUTPUT = {"trace_csv": True, "scatter_tasks": [0, 1], "save_network": False}

PRESETS = {
    "figure1": {
        "target": dict(_TARGET),
        "network": dict(_NETWORK),
        "train": {
            "T1": 1_000_000, "eta0": _ETA_RAW_HE3, "step_rule": "anneal", "anneal_start": None,
            "snapshot_every": 250_000, "gradient_scale": "network",
        },
        "acceptance": {"min_localized_fraction": 15 / 16, "hi": 0.9, "lo": 0.2},
        "output": dict(_OUTPUT),
    },
    "figure1_ntk": {
        "target": dict(_TARGET),
        "network": dict(_NETWORK),
        "ntk": {"steps": 1_000_000, "eta": 3e-4, "snapshot_every": 250_000},
        "acceptance": {"max_kappa_change": 0.1},
        "output": dict(_OUTPUT),
    },
    "theorem1_scaled": {
        "target": dict(_TARGET, d=16, M=4),
        "network": dict(_NETWORK, J=1024, C_b=3.0, C_b_init=1.0),
        "train": {
            "T1": 200_000, "T2": 20_000, "eta0": _ETA_RAW_HE3, "step_rule": "anneal",
            "anneal_start": None, "snapshot_every": 50_000, "gradient_scale": "network",
            "r": 2, "lambda_bar": 0.0, "tune_lambda": True,
            "lambda_grid": [1e-4, 1e-3, 1e-2, 1e-1, 1.0],
        },
        "evaluation": {"samples": 100_000, "metric": "L1"},
        "acceptance": {"max_error": 0.2, "min_baseline_ratio": 2.0},
        "output": dict(_OUTPUT, trace_csv=False),
    },
    "superortho": {
        "superortho": {"L_max": 6},
        "acceptance": {"tol_k1": 1e-10, "tol_k2l2": 1e-6},
    },
    "csq_census": {
        "census": {"d": 256, "A": 64, "p": 3, "queries": 100, "taus": [0.1, 0.2, 0.3, 0.5]},
        "acceptance": {"max_overlap": 0.180, "max_correlation": 5.9e-3},
    },
    "bihari_sweep": {
        "bihari": {
            "cases": 100, "T": 5000, "form": "published",
            "a0_range": [0.01, 0.3], "c_range": [1e-5, 1e-2], "p_values": [3, 4, 5],
        },
        "acceptance": {"max_violations": 0},
    },
    "custom": {
        "target": dict(_TARGET, d=None, M=None, p=None),
        "network": dict(_NETWORK, J=None),
        "train": {
            "T1": None, "T2": None, "eta0": None, "step_rule": "anneal", "anneal_start": None,
            "snapshot_every": 10_000, "gradient_scale": "network", "r": 2,
            "lambda_bar": 0.0, "tune_lambda": True, "lambda_grid": [1e-4, 1e-3, 1e-2, 1e-1, 1.0],
        },
        "evaluation": {"samples": 100_000, "metric": "L1"},
        "acceptance": {"max_error": None},
        "output": dict(_OUTPUT),
    },
}

# keys a custom config must set explicitly
_REQUIRED = {
    "custom": ["target.d", "target.M", "target.p", "network.J", "train.T1", "train.T2", "train.eta0"],
}

# keys whose default is None but whose type is still fixed
_NULLABLE = {
    "target.link": list, "network.q": int, "network.C_b_init": float,
    "train.anneal_start": int, "acceptance.max_error": float,
    "target.d": int, "target.M": int, "target.p": int, "network.J": int,
    "train.T1": int, "train.T2": int, "train.eta0": float,
}

_CHOICES = {
    "target.mode": ("canonical", "sphere", "hypercube"),
    "network.activation": ("relu", "randomized_poly"),
    "network.normalization": ("sqrt_i", "sqrt_factorial"),
    "network.init_bias": ("zero", "uniform"),
    "train.step_rule": ("constant", "anneal"),
    "train.gradient_scale": ("network", "neuron"),
    "evaluation.metric": ("L1", "L2"),
    "bihari.form": ("published", "corrected"),
}


def _check_value(path: str, default, value):
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{path}: null is not allowed")
    kind = _NULLABLE.get(path) if default is None else type(default)
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
    elif kind is int:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        value = int(value)
    elif kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{path}: expected a finite number, got {value!r}")
        value = float(value)
    elif kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        if path in _CHOICES and value not in _CHOICES[path]:
            raise ConfigError(f"{path}: {value!r} is not one of {list(_CHOICES[path])}")
    elif kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        for i, v in enumerate(value):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path}[{i}]: expected a number, got {v!r}")
    return value


def _merge(defaults: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigError(f"{path}: unknown key")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected an object")
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            out[key] = _check_value(path, defaults[key], value)
    return out


def _get(cfg: dict, path: str):
    node = cfg
    for part in path.split("."):
        node = node[part]
    return node


def resolve_config(raw: dict, preset: str | None = None, seed: int | None = None,
                   out_dir: str | None = None, overrides: dict | None = None) -> dict:
    """Fill preset defaults into ``raw`` and validate every key.

    Explicit ``preset``/``seed``/``out_dir`` arguments and dotted-path
    ``overrides`` take precedence over the file contents.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    name = preset or raw.pop("preset", None)
    raw.pop("preset", None)
    if name is None:
        raise ConfigError("preset: required key missing")
    if name not in PRESETS:
        raise ConfigError(f"preset: unknown preset {name!r}; expected one of {sorted(PRESETS)}")
    top = {"seed": 0, "out_dir": f"runs/{name}"}
    for key in ("seed", "out_dir"):
        if key in raw:
            top[key] = _check_value(key, top[key], raw.pop(key))
    body = _merge(PRESETS[name], raw)
    for path, value in (overrides or {}).items():
        head, _, leaf = path.rpartition(".")
        try:
            section = _get(body, head) if head else body
        except KeyError:
            raise ConfigError(f"{path}: unknown key for preset {name}") from None
        if leaf not in section:
            raise ConfigError(f"{path}: unknown key for preset {name}")
        section[leaf] = _check_value(path, PRESETS[name][head][leaf] if head else None, value)
    if seed is not None:
        top["seed"] = int(seed)
    if out_dir is not None:
        top["out_dir"] = str(out_dir)
    missing = [k for k in _REQUIRED.get(name, []) if _get(body, k) is None]
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))
    return {"preset": name, **top, **body}


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: no such config file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"

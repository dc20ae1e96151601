"""Run configuration: sectioned key=value files with full validation.

The format is deliberately small: ``[section]`` headers, one
``key = value`` per line, ``#`` comments, typed scalars (int, float,
bool, string) and inline lists ``[a, b, c]``.  Every diagnostic names
the offending line; unknown keys, duplicate keys, and type errors are
rejected rather than ignored.  Hyperparameters that are left out fall
back to per-model defaults mirroring the published training recipes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .neurons import ModelKind
from .surrogates import Surrogate

_REQUIRED = object()

# per-model training defaults applied when [training]/[model] keys are absent
MODEL_DEFAULTS = {
    ModelKind.BRF: {"lr": 0.003, "schedule": "linear", "clip": 1.0, "surrogate": "double_gaussian"},
    ModelKind.SE_ADLIF: {"lr": 0.01, "schedule": "constant", "clip": 10.0, "surrogate": "slayer"},
    ModelKind.ALIF: {"lr": 0.01, "schedule": "constant", "clip": 10.0, "surrogate": "slayer"},
}

SCHEMA = {
    "network": {
        "input_dim": (int, _REQUIRED),
        "hidden": (list, _REQUIRED),  # entries "kind:m" or "kind:m:norec"
        "classes": (int, _REQUIRED),
    },
    "model": {
        "surrogate": (str, None),
        "slayer_alpha": (float, 5.0),
        "slayer_c": (float, 0.2),
        "theta": (float, 1.0),
        "omega_init": (str, None),       # "uniform:lo:hi" / "normal:mu:sd"
        "b_offset_init": (str, None),
        "tau_u_init": (str, None),
        "tau_w_init": (str, None),
        "tau_a_init": (str, None),
        "tau_out_init": (str, None),
    },
    "training": {
        "lam": (int, _REQUIRED),
        "lr": (float, None),
        "schedule": (str, None),
        "epochs": (int, 1),
        "batch_size": (int, 32),
        "clip": (float, None),
        "precision": (str, "f64"),
        "seed": (int, 0),
        "t0": (int, 0),
        "prediction": (str, "mean"),
        "early_stop_train_acc": (float, None),
        "workers": (int, None),
    },
    "dataset": {
        "kind": (str, _REQUIRED),  # cue | container | idx
        "delay": (int, 1000),
        "samples": (int, 256),
        "t_pat": (int, 20),
        "p_active": (float, 0.5),
        "data_seed": (int, 0),
        "split": (list, None),
        "path": (str, None),
        "images": (str, None),
        "labels": (str, None),
        "test_images": (str, None),
        "test_labels": (str, None),
        "limit_train": (int, None),
    },
    "output": {
        "dir": (str, "runs/out"),
    },
}

_INIT_KEYS = {
    "omega_init": "omega",
    "b_offset_init": "b_offset",
    "tau_u_init": "tau_u",
    "tau_w_init": "tau_w",
    "tau_a_init": "tau_a",
    "tau_out_init": "tau_out",
}


def _parse_scalar(text: str, line_no: int):
    text = text.strip()
    if not text:
        raise ConfigError(f"line {line_no}: empty value")
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_text(text: str) -> dict:
    """Raw sectioned parse with line-number diagnostics."""
    sections: dict[str, dict] = {}
    current: str | None = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in SCHEMA:
                raise ConfigError(f"line {line_no}: unknown section [{current}]")
            sections.setdefault(current, {})
            continue
        if current is None:
            raise ConfigError(f"line {line_no}: key outside of any [section]")
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key = value")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in SCHEMA[current]:
            raise ConfigError(f"line {line_no}: unknown key {key!r} in [{current}]")
        if key in sections[current]:
            raise ConfigError(f"line {line_no}: duplicate key {key!r} in [{current}]")
        value = value.strip()
        if value.startswith("[") and value.endswith("]"):
            inner = value[1:-1].strip()
            items = [s.strip() for s in inner.split(",")] if inner else []
            parsed = [_parse_scalar(i, line_no) for i in items]
        else:
            parsed = _parse_scalar(value, line_no)
        want = SCHEMA[current][key][0]
        if want is list and not isinstance(parsed, list):
            parsed = [parsed]
        elif want is float and isinstance(parsed, (int, bool)):
            parsed = float(parsed)
        elif want is int and isinstance(parsed, bool):
            raise ConfigError(f"line {line_no}: {key} expects an integer")
        elif not isinstance(parsed, want) and not (want is str):
            raise ConfigError(
                f"line {line_no}: {key} expects {want.__name__}, got {parsed!r}"
            )
        if want is str and not isinstance(parsed, str):
            parsed = str(parsed)
        sections[current][key] = parsed
    return sections


@dataclass
class HiddenSpec:
    kind: ModelKind
    m: int
    recurrent: bool


@dataclass
class RunConfig:
    """Fully validated run description."""

    input_dim: int
    hidden: list
    classes: int
    lam: int
    lr: float
    schedule: str
    epochs: int
    batch_size: int
    clip: float | None
    precision: str
    seed: int
    t0: int
    prediction: str
    surrogate: Surrogate
    theta: float
    init: dict
    dataset: dict
    out_dir: str
    early_stop_train_acc: float | None = None
    workers: int | None = None
    raw: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def _parse_hidden_entry(entry: str) -> HiddenSpec:
    parts = str(entry).split(":")
    if len(parts) not in (2, 3):
        raise ConfigError(f"hidden entry {entry!r} must be kind:m[:norec]")
    try:
        kind = ModelKind(parts[0])
    except ValueError as exc:
        raise ConfigError(f"unknown model kind {parts[0]!r}") from exc
    try:
        m = int(parts[1])
    except ValueError as exc:
        raise ConfigError(f"hidden width must be an integer in {entry!r}") from exc
    rec = True
    if len(parts) == 3:
        if parts[2] not in ("rec", "norec"):
            raise ConfigError(f"hidden flag must be rec/norec in {entry!r}")
        rec = parts[2] == "rec"
    return HiddenSpec(kind=kind, m=m, recurrent=rec)


def _parse_init_spec(text: str, key: str):
    parts = str(text).split(":")
    if len(parts) != 3 or parts[0] not in ("uniform", "normal"):
        raise ConfigError(f"{key} must be uniform:lo:hi or normal:mu:sd, got {text!r}")
    try:
        return (parts[0], float(parts[1]), float(parts[2]))
    except ValueError as exc:
        raise ConfigError(f"{key} has non-numeric bounds: {text!r}") from exc


def build_run_config(sections: dict) -> RunConfig:
    """Apply defaults, cross-validate, and assemble a RunConfig."""
    merged: dict[str, dict] = {}
    for section, keys in SCHEMA.items():
        got = sections.get(section, {})
        merged[section] = {}
        for key, (_, default) in keys.items():
            if key in got:
                merged[section][key] = got[key]
            elif default is _REQUIRED:
                raise ConfigError(f"missing required key {key!r} in [{section}]")
            else:
                merged[section][key] = default
    hidden = [_parse_hidden_entry(e) for e in merged["network"]["hidden"]]
    if not hidden:
        raise ConfigError("at least one hidden layer is required")
    lead = hidden[0].kind
    defaults = MODEL_DEFAULTS[lead]
    tr = merged["training"]
    lr = tr["lr"] if tr["lr"] is not None else defaults["lr"]
    schedule = tr["schedule"] if tr["schedule"] is not None else defaults["schedule"]
    clip = tr["clip"] if tr["clip"] is not None else defaults["clip"]
    if isinstance(clip, (int, float)) and clip <= 0:
        clip = None  # disabled
    surr_kind = merged["model"]["surrogate"] or defaults["surrogate"]
    if surr_kind in ("dg", "double_gaussian"):
        surrogate = Surrogate(kind="double_gaussian")
    elif surr_kind == "slayer":
        surrogate = Surrogate(
            kind="slayer",
            alpha=merged["model"]["slayer_alpha"],
            c=merged["model"]["slayer_c"],
        )
    else:
        raise ConfigError(f"unknown surrogate {surr_kind!r}")
    if schedule not in ("constant", "linear", "cosine"):
        raise ConfigError(f"unknown schedule {schedule!r}")
    if tr["lam"] < 1:
        raise ConfigError(f"lam must be >= 1, got {tr['lam']}")
    if tr["epochs"] < 1 or tr["batch_size"] < 1:
        raise ConfigError("epochs and batch_size must be positive")
    if tr["precision"] not in ("f32", "f64"):
        raise ConfigError(f"precision must be f32 or f64, got {tr['precision']!r}")
    if tr["prediction"] not in ("mean", "sum_softmax", "per_step"):
        raise ConfigError(f"unknown prediction mode {tr['prediction']!r}")
    init = {}
    for key, name in _INIT_KEYS.items():
        if merged["model"][key] is not None:
            init[name] = _parse_init_spec(merged["model"][key], key)
    ds = dict(merged["dataset"])
    if ds["kind"] not in ("cue", "container", "idx"):
        raise ConfigError(f"unknown dataset kind {ds['kind']!r}")
    if ds["split"] is not None:
        ds["split"] = [float(f) for f in ds["split"]]
    else:
        ds["split"] = [0.8, 0.1, 0.1] if ds["kind"] == "cue" else [0.9, 0.1]
    if ds["kind"] == "container":
        if not ds["path"]:
            raise ConfigError("dataset kind 'container' requires path")
        if not os.path.exists(ds["path"]):
            raise ConfigError(f"dataset file not found: {ds['path']}")
    if ds["kind"] == "idx":
        for key in ("images", "labels"):
            if not ds[key]:
                raise ConfigError(f"dataset kind 'idx' requires {key}")
            if not os.path.exists(ds[key]):
                raise ConfigError(f"dataset file not found: {ds[key]}")
        for key in ("test_images", "test_labels"):
            if ds[key] and not os.path.exists(ds[key]):
                raise ConfigError(f"dataset file not found: {ds[key]}")
    if ds["kind"] == "cue" and ds["delay"] < 0:
        raise ConfigError(f"cue delay must be >= 0, got {ds['delay']}")
    return RunConfig(
        input_dim=merged["network"]["input_dim"],
        hidden=hidden,
        classes=merged["network"]["classes"],
        lam=tr["lam"],
        lr=float(lr),
        schedule=schedule,
        epochs=tr["epochs"],
        batch_size=tr["batch_size"],
        clip=clip,
        precision=tr["precision"],
        seed=tr["seed"],
        t0=tr["t0"],
        prediction=tr["prediction"],
        surrogate=surrogate,
        theta=merged["model"]["theta"],
        init=init,
        dataset=ds,
        out_dir=merged["output"]["dir"],
        early_stop_train_acc=tr["early_stop_train_acc"],
        workers=tr["workers"],
        raw=merged,
    )


def parse_config(text: str) -> RunConfig:
    return build_run_config(parse_text(text))


def load_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())

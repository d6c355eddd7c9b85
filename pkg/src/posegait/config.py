"""Run configuration: YAML schema, defaults and validation.

Validation collects every problem before raising so that a broken config is
reported in one pass.
"""
from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

from .loss import LossError, SupConSpec, TripletLossSpec
from .model import BackboneConfig, ModelConfigError, backbone_config_from_mapping, config_problems
from .protocols import ProtocolError, ProtocolSpec, get_protocol, protocol_from_mapping
from .sampling import SamplerError, SamplerSpec
from .transforms import TransformSpec, load_preset

# environment overrides, paths only
ENV_DATA = "POSEGAIT_DATA"
ENV_OUTPUT = "POSEGAIT_OUTPUT"


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in problems))


DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "dtype": "float32",
    "data": {"index": None, "protocol": "synthetic"},
    "sampler": {"kind": "triplet", "batch_size": None, "P": 8, "K": 4},
    "transforms": "vanilla_gaittr",
    "model": {
        "family": "gait_tr_like",
        "num_layers": 4,
        "width": 32,
        "embedding_dim": 64,
        "heads": 4,
        "kernel_size": 9,
        "activation": "relu",
    },
    "loss": {"kind": "triplet", "variant": "batch_hard", "margin": 0.2},
    "optimizer": {"kind": "adam", "max_lr": 0.001, "weight_decay": 0.0, "betas": [0.9, 0.999], "eps": 1e-8},
    "schedule": {"total_steps": 300, "pct_start": 0.3, "div": 25.0, "final_div": 1.0e4},
    "output": {"dir": "runs/default", "log": "log.csv", "checkpoint": "final.ckpt", "checkpoint_every": 0},
}

_SCHEMA: dict[str, Any] = {
    "seed": int,
    "dtype": str,
    "data": {"index": (str, type(None)), "protocol": (str, dict)},
    "sampler": {"kind": str, "batch_size": (int, type(None)), "P": (int, type(None)), "K": (int, type(None))},
    "transforms": (str, dict),
    "model": dict,  # checked by the model config builder
    "loss": {
        "kind": str,
        "variant": str,
        "margin": (int, float),
        "distance": str,
        "temperature": (int, float),
        "views": str,
        "normalize": bool,
    },
    "optimizer": {"kind": str, "max_lr": (int, float), "weight_decay": (int, float), "betas": list, "eps": (int, float)},
    "schedule": {"total_steps": int, "pct_start": (int, float), "div": (int, float), "final_div": (int, float)},
    "output": {"dir": str, "log": str, "checkpoint": str, "checkpoint_every": int},
}

_LOSS_KEYS = {
    "triplet": {"kind", "variant", "margin", "distance"},
    "supcon": {"kind", "temperature", "views", "normalize"},
}


def _check_schema(raw: Mapping[str, Any], schema: Mapping[str, Any], prefix: str, problems: list[str]) -> None:
    for key, value in raw.items():
        path = f"{prefix}{key}"
        if key not in schema:
            problems.append(f"{path}: unknown key")
            continue
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                problems.append(f"{path}: expected a mapping")
            else:
                _check_schema(value, expected, path + ".", problems)
        elif isinstance(value, bool) and expected in (int, float) or (
            isinstance(value, bool) and isinstance(expected, tuple) and bool not in expected
        ):
            problems.append(f"{path}: expected {_type_name(expected)}, got a boolean")
        elif not isinstance(value, expected):
            problems.append(f"{path}: expected {_type_name(expected)}, got {type(value).__name__}")


def _type_name(t) -> str:
    if isinstance(t, tuple):
        return " or ".join(x.__name__ for x in t)
    return t.__name__


def merge(base: Mapping[str, Any], override: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping) and k != "model":
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict[str, Any]  # defaults-resolved mapping, dumped next to the logs
    seed: int
    dtype: str
    index_path: Path | None
    protocol: ProtocolSpec
    sampler: SamplerSpec
    transforms: TransformSpec
    model: BackboneConfig
    loss_kind: str
    loss: TripletLossSpec | SupConSpec
    optimizer: str
    max_lr: float
    weight_decay: float
    betas: tuple[float, float]
    eps: float
    total_steps: int
    pct_start: float
    div: float
    final_div: float
    output_dir: Path
    log_name: str
    checkpoint_name: str
    checkpoint_every: int

    @property
    def log_path(self) -> Path:
        return self.output_dir / self.log_name

    @property
    def checkpoint_path(self) -> Path:
        return self.output_dir / self.checkpoint_name

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False)


def parse_config(raw: Mapping[str, Any] | None, base_dir: Path | None = None) -> RunConfig:
    raw = dict(raw or {})
    problems: list[str] = []
    _check_schema(raw, _SCHEMA, "", problems)
    if problems:
        raise ConfigError(problems)
    if "model" in raw:
        # the model section replaces the default wholesale (compact or explicit form)
        model_raw = dict(raw["model"])
    else:
        model_raw = dict(DEFAULTS["model"])
    cfg = merge(DEFAULTS, {k: v for k, v in raw.items() if k != "model"})
    cfg["model"] = model_raw
    # loss and sampler sections replace their defaults rather than merging,
    # since their valid keys depend on the chosen kind
    if "loss" in raw:
        cfg["loss"] = {"kind": "triplet", **raw["loss"]}
    if "sampler" in raw:
        cfg["sampler"] = {"kind": "triplet", **raw["sampler"]}
    base_dir = base_dir or Path.cwd()

    def resolve(p: str | None, env: str) -> Path | None:
        p = os.environ.get(env, p)
        if p is None:
            return None
        path = Path(p).expanduser()
        return path if path.is_absolute() else base_dir / path

    index_path = resolve(cfg["data"]["index"], ENV_DATA)
    output_dir = resolve(cfg["output"]["dir"], ENV_OUTPUT)
    cfg["data"]["index"] = None if index_path is None else str(index_path)
    cfg["output"]["dir"] = str(output_dir)

    protocol = None
    try:
        p = cfg["data"]["protocol"]
        protocol = get_protocol(p) if isinstance(p, str) else protocol_from_mapping(p)
    except ProtocolError as exc:
        problems.append(f"data.protocol: {exc}")

    sampler = None
    s = cfg["sampler"]
    try:
        sampler = SamplerSpec(kind=s["kind"], batch_size=s.get("batch_size"), P=s.get("P"), K=s.get("K"), seed=cfg["seed"])
    except SamplerError as exc:
        problems.append(str(exc))

    transforms = None
    try:
        t = cfg["transforms"]
        transforms = load_preset(t) if isinstance(t, str) else TransformSpec.from_mapping(t)
    except ValueError as exc:
        problems.append(f"transforms: {exc}")

    model = None
    try:
        m = dict(cfg["model"])
        if transforms is not None:
            given = m.setdefault("input_branches", list(transforms.branches))
            if list(given) != list(transforms.branches):
                problems.append(
                    f"model.input_branches {list(given)} differ from transforms.branches {list(transforms.branches)}"
                )
        model = backbone_config_from_mapping(m)
        problems += [f"model: {p}" for p in config_problems(model)]
    except (TypeError, ModelConfigError) as exc:
        problems.append(f"model: {exc}")

    loss = None
    lk = cfg["loss"].get("kind", "triplet")
    if lk not in _LOSS_KEYS:
        problems.append(f"loss.kind: must be 'triplet' or 'supcon', got {lk!r}")
    else:
        extra = set(cfg["loss"]) - _LOSS_KEYS[lk]
        if extra:
            problems += [f"loss.{k}: not used by the {lk} loss" for k in sorted(extra)]
        args = {k: v for k, v in cfg["loss"].items() if k != "kind"}
        try:
            loss = TripletLossSpec(**args) if lk == "triplet" else SupConSpec(**args)
            cfg["loss"] = {"kind": lk, **asdict(loss)}
        except (LossError, TypeError) as exc:
            problems.append(f"loss: {exc}")

    o = cfg["optimizer"]
    if o["kind"] not in ("adam", "adamw"):
        problems.append(f"optimizer.kind: must be 'adam' or 'adamw', got {o['kind']!r}")
    if not o["max_lr"] > 0:
        problems.append("optimizer.max_lr: must be > 0")
    if o["weight_decay"] < 0:
        problems.append("optimizer.weight_decay: must be >= 0")
    if len(o["betas"]) != 2:
        problems.append("optimizer.betas: expected two values")
    sc = cfg["schedule"]
    if sc["total_steps"] < 1:
        problems.append("schedule.total_steps: must be >= 1")
    if not 0 < sc["pct_start"] < 1:
        problems.append("schedule.pct_start: must lie in (0, 1)")
    if sc["div"] <= 0 or sc["final_div"] <= 0:
        problems.append("schedule.div and schedule.final_div must be > 0")
    if cfg["dtype"] not in ("float32", "float64"):
        problems.append("dtype: must be 'float32' or 'float64'")
    if cfg["output"]["checkpoint_every"] < 0:
        problems.append("output.checkpoint_every: must be >= 0")
    if problems:
        raise ConfigError(problems)

    return RunConfig(
        raw=cfg,
        seed=cfg["seed"],
        dtype=cfg["dtype"],
        index_path=index_path,
        protocol=protocol,
        sampler=sampler,
        transforms=transforms,
        model=model,
        loss_kind=lk,
        loss=loss,
        optimizer=o["kind"],
        max_lr=float(o["max_lr"]),
        weight_decay=float(o["weight_decay"]),
        betas=(float(o["betas"][0]), float(o["betas"][1])),
        eps=float(o["eps"]),
        total_steps=sc["total_steps"],
        pct_start=float(sc["pct_start"]),
        div=float(sc["div"]),
        final_div=float(sc["final_div"]),
        output_dir=output_dir,
        log_name=cfg["output"]["log"],
        checkpoint_name=cfg["output"]["checkpoint"],
        checkpoint_every=cfg["output"]["checkpoint_every"],
    )


def run_preset_names() -> list[str]:
    root = resources.files("posegait").joinpath("presets/runs")
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_config(path: str | Path) -> RunConfig:
    """Load a YAML run config; a bare preset name loads the bundled file.

    Relative paths inside a bundled preset resolve against the working
    directory, those in a user file against the file's directory.
    """
    path = Path(path)
    if not path.exists() and path.suffix == "" and str(path) in run_preset_names():
        text = resources.files("posegait").joinpath(f"presets/runs/{path}.yaml").read_text()
        return parse_config(yaml.safe_load(text), Path.cwd())
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be a mapping"])
    return parse_config(raw, path.parent)


def config_help() -> str:
    """Every config key with its default, for ``--help`` output."""
    lines = []

    def walk(d: Mapping[str, Any], prefix: str) -> None:
        for k, v in d.items():
            if isinstance(v, dict) and k != "model":
                walk(v, prefix + k + ".")
            else:
                lines.append(f"  {prefix}{k} (default: {v!r})")

    walk(DEFAULTS, "")
    lines.append("  model.* accepts either the compact form above or an explicit")
    lines.append("    {family, num_layers, blocks: [{residual, projection, units: [...]}], ...}")
    lines.append("  loss.kind=supcon uses loss.temperature, loss.views (one|two), loss.normalize")
    lines.append("  data.protocol may be a name or a mapping with 'base' plus overrides")
    return "\n".join(lines)

"""Experiment configuration: INI-style file, then environment, then flags.

Precedence (later wins): built-in defaults < config file < ``POINTACL_<SECTION>_<KEY>``
environment variables < command-line overrides. Unknown sections or keys are errors.

Sections and keys::

    [train]   every TrainConfig field (epochs_stage1, lam, strategy, seed, d, ...)
    [data]    source (synthetic|files), train_per_class, test_per_class, n_points, seed,
              train_dir, test_dir
    [eval]    probe_k, perturbations, export_features, coverage_draws
    [output]  dir, checkpoint
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Mapping, Optional

from ..geometry import Perturbation
from ..pipeline import TrainConfig

ENV_PREFIX = "POINTACL_"


class ConfigError(ValueError):
    """Bad or unknown configuration key; the CLI maps it to a usage error."""


@dataclass
class DataConfig:
    source: str = "synthetic"
    train_per_class: int = 100
    test_per_class: int = 50
    n_points: int = 256
    seed: int = 0
    train_dir: Optional[str] = None
    test_dir: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("synthetic", "files"):
            raise ConfigError(f"data.source must be 'synthetic' or 'files', got {self.source!r}")
        if self.source == "files" and not (self.train_dir and self.test_dir):
            raise ConfigError("data.source = files needs data.train_dir and data.test_dir")
        if self.n_points < 1 or self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("data counts must be >= 1")


DEFAULT_PERTURBATIONS = (
    "gaussian_noise:0.01", "gaussian_noise:0.03", "rotation:x:-30:30", "rotation:y:-30:30",
    "rotation:z:-30:30", "scaling:0.5:1.5", "drop_points:0.2", "drop_points:0.6",
)


def parse_perturbation(text: str) -> Perturbation:
    """``gaussian_noise:SIGMA``, ``rotation:AXIS[:LO:HI]``, ``scaling[:LO:HI]``, ``drop_points:RATIO``."""
    parts = [p.strip() for p in text.strip().split(":")]
    kind, args = parts[0], parts[1:]
    try:
        if kind == "gaussian_noise" and len(args) == 1:
            return Perturbation.gaussian_noise(float(args[0]))
        if kind == "rotation" and len(args) in (1, 3):
            lo, hi = (float(args[1]), float(args[2])) if len(args) == 3 else (-30.0, 30.0)
            return Perturbation.rotation(args[0], lo, hi)
        if kind == "scaling" and len(args) in (0, 2):
            lo, hi = (float(args[0]), float(args[1])) if args else (0.5, 1.5)
            return Perturbation.scaling(lo, hi)
        if kind == "drop_points" and len(args) == 1:
            return Perturbation.drop_points(float(args[0]))
    except ValueError as exc:
        raise ConfigError(f"bad perturbation {text!r}: {exc}") from None
    raise ConfigError(f"bad perturbation {text!r}")


def format_perturbation(p: Perturbation) -> str:
    if p.kind == "gaussian_noise":
        return f"gaussian_noise:{p.sigma:g}"
    if p.kind == "rotation":
        return f"rotation:{p.axis}:{p.angle_range[0]:g}:{p.angle_range[1]:g}"
    if p.kind == "scaling":
        return f"scaling:{p.scale_range[0]:g}:{p.scale_range[1]:g}"
    return f"drop_points:{p.ratio:g}"


@dataclass
class EvalConfig:
    probe_k: int = 5
    perturbations: List[str] = field(default_factory=lambda: list(DEFAULT_PERTURBATIONS))
    export_features: bool = False
    coverage_draws: int = 200

    def __post_init__(self):
        self.perturbations = [format_perturbation(parse_perturbation(p)) for p in self.perturbations]
        if self.probe_k < 1:
            raise ConfigError("eval.probe_k must be >= 1")

    def perturbation_objects(self) -> List[Perturbation]:
        return [parse_perturbation(p) for p in self.perturbations]


@dataclass
class ExperimentSpec:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: Optional[str] = None
    checkpoint: Optional[str] = None

    def result_fields(self) -> dict:
        """Everything that influences results (paths excluded)."""
        return {"train": self.train.to_dict(), "data": dataclasses.asdict(self.data),
                "eval": dataclasses.asdict(self.eval)}

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.result_fields(), sort_keys=True)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def replace(self, **train_changes) -> "ExperimentSpec":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **train_changes))

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for section, values in self.result_fields().items():
            cp[section] = {k: _format_value(v) for k, v in values.items() if v is not None}
        out = {}
        if self.output_dir:
            out["dir"] = self.output_dir
        if self.checkpoint:
            out["checkpoint"] = self.checkpoint
        if out:
            cp["output"] = out
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _format_value(v) -> str:
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(cls, key: str, raw: str):
    types = {f.name: f for f in fields(cls)}
    if key not in types:
        raise ConfigError(f"unknown key {key!r} for [{_SECTION_NAMES[cls]}]")
    default = types[key].default
    if default is dataclasses.MISSING:
        default = types[key].default_factory()
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {raw!r}")
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            return [x.strip() for x in raw.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad value for {_SECTION_NAMES[cls]}.{key}: {exc}") from None
    if raw.lower() in ("", "none"):
        return None
    return raw


_SECTIONS = {"train": TrainConfig, "data": DataConfig, "eval": EvalConfig}
_SECTION_NAMES = {v: k for k, v in _SECTIONS.items()}
_OUTPUT_KEYS = ("dir", "checkpoint")


def _empty_overrides() -> Dict[str, Dict[str, str]]:
    return {"train": {}, "data": {}, "eval": {}, "output": {}}


def read_config_file(path) -> Dict[str, Dict[str, str]]:
    cp = configparser.ConfigParser(interpolation=None)
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cp.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from None
    out = _empty_overrides()
    for section in cp.sections():
        if section not in out:
            raise ConfigError(f"{path}: unknown section [{section}]")
        out[section].update(cp[section])
    return out


def env_overrides(environ: Mapping[str, str] = None) -> Dict[str, Dict[str, str]]:
    environ = os.environ if environ is None else environ
    out = _empty_overrides()
    for name, value in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in out and key:
            out[section][key] = value
    return out


def parse_assignment(text: str) -> tuple:
    """``section.key=value`` -> (section, key, value)."""
    lhs, sep, value = text.partition("=")
    section, dot, key = lhs.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    return section, key, value


def build_spec(layers) -> ExperimentSpec:
    """Merge override layers (earliest lowest) into a validated ExperimentSpec."""
    merged = _empty_overrides()
    for layer in layers:
        for section, values in layer.items():
            if section not in merged:
                raise ConfigError(f"unknown section [{section}]")
            merged[section].update(values)
    kwargs = {}
    for section, cls in _SECTIONS.items():
        kwargs[section] = {k: _coerce(cls, k, v) for k, v in merged[section].items()}
    for key in merged["output"]:
        if key not in _OUTPUT_KEYS:
            raise ConfigError(f"unknown key {key!r} for [output]")
    try:
        return ExperimentSpec(
            train=TrainConfig(**kwargs["train"]),
            data=DataConfig(**kwargs["data"]),
            eval=EvalConfig(**kwargs["eval"]),
            output_dir=merged["output"].get("dir"),
            checkpoint=merged["output"].get("checkpoint"),
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_spec(path=None, overrides=(), environ: Mapping[str, str] = None) -> ExperimentSpec:
    layers = [read_config_file(path)] if path else []
    layers.append(env_overrides(environ))
    flags = _empty_overrides()
    for text in overrides:
        section, key, value = parse_assignment(text)
        if section not in flags:
            raise ConfigError(f"unknown section [{section}]")
        flags[section][key] = value
    layers.append(flags)
    return build_spec(layers)

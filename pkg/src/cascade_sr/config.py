"""Flat ``section.key = value`` run configuration.

Sections: ``schedule.*``, ``model.*``, ``train.*``, ``data.*``, ``scg.*``,
``base.*``. Values are parsed as Python literals when possible
(``0.5``, ``(1, 2)``, ``None``, ``true``) and kept as strings otherwise.
Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import ast
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .denoiser import DenoiserConfig
from .diffusion import DEFAULT_ETA_MAX, DEFAULT_ETA_MIN, DEFAULT_KAPPA, DEFAULT_T, build_schedule


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleSection:
    n_steps: int = DEFAULT_T
    kappa: float = DEFAULT_KAPPA
    eta_min: float = DEFAULT_ETA_MIN
    eta_max: float = DEFAULT_ETA_MAX


@dataclass
class TrainSection:
    steps: int = 3000
    batch_size: int = 8
    lr: float = 1e-4
    lr_final: float = 1e-5
    # step at which lr drops to lr_final; None means steps // 2
    lr_drop_step: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    fixed_scale: float = 2.0
    p_fixed: float = 0.5
    max_scale: float = 4.0
    noise_aug_steps: int = 3
    checkpoint_every: int = 500
    log_every: int = 10


@dataclass
class DataSection:
    path: str | None = None
    synthetic_n: int = 200
    synthetic_size: tuple[int, int] = (64, 64)
    crop_size: tuple[int, int] | None = (32, 32)
    n_val: int = 20


@dataclass
class ScgSection:
    zeta: float = 0.1
    reference: str = "previous_stage"
    strategy: str = "remainder_last"


@dataclass
class BaseSection:
    mode: str = "bicubic"
    checkpoint: str | None = None
    epochs: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/toy"
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    scg: ScgSection = field(default_factory=ScgSection)
    base: BaseSection = field(default_factory=BaseSection)

    SECTIONS = ("schedule", "model", "train", "data", "scg", "base")

    def build_schedule(self):
        s = self.schedule
        return build_schedule(s.n_steps, s.kappa, s.eta_min, s.eta_max)

    def to_flat(self) -> dict[str, Any]:
        flat: dict[str, Any] = {"seed": self.seed, "out_dir": self.out_dir}
        for sec in self.SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                flat[f"{sec}.{f.name}"] = getattr(obj, f.name)
        return flat

    def dumps(self) -> str:
        lines = []
        for key, val in self.to_flat().items():
            lines.append(f"{key} = {val!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        cfg = cls()
        return cfg.updated(flat)

    def updated(self, overrides: dict[str, Any]) -> "RunConfig":
        top = {"seed": self.seed, "out_dir": self.out_dir}
        sections = {sec: dataclasses.asdict(getattr(self, sec)) for sec in self.SECTIONS}
        for key, val in overrides.items():
            if key in top:
                top[key] = val
                continue
            sec, _, name = key.partition(".")
            if sec not in sections or name not in sections[sec]:
                raise ConfigError(f"unknown config key {key!r}")
            sections[sec][name] = val
        try:
            return RunConfig(
                seed=int(top["seed"]),
                out_dir=str(top["out_dir"]),
                schedule=ScheduleSection(**sections["schedule"]),
                model=DenoiserConfig(**sections["model"]),
                train=TrainSection(**sections["train"]),
                data=DataSection(**_tuples(sections["data"], ("synthetic_size", "crop_size"))),
                scg=ScgSection(**sections["scg"]),
                base=BaseSection(**sections["base"]),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _tuples(d: dict, keys) -> dict:
    d = dict(d)
    for k in keys:
        if d.get(k) is not None:
            d[k] = tuple(d[k])
    return d


def parse_value(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str) -> dict[str, Any]:
    flat = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        flat[key.strip()] = parse_value(val)
    return flat


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    flat = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        flat = parse_config_text(p.read_text())
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)

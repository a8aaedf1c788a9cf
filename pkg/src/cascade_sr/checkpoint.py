"""Versioned, self-describing checkpoint container.

A checkpoint is a ``torch.save`` dict::

    format       "cascade_sr.checkpoint"
    version      CHECKPOINT_VERSION
    config       flat resolved run config (echo)
    model        DenoiserConfig as a dict
    schedule     {"n_steps", "kappa", "eta": [...]} explicit arrays
    weights      {name: tensor}
    base         {"mode": "bicubic"} or {"mode": "learned", "path": ...}
    train_state  optional optimizer / RNG / step state for resuming

A learned base model lives in its own file (``BASE_FORMAT``) referenced by
path, relative to the main checkpoint when possible.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .base_sr import BaseSRModel
from .denoiser import CoordinateDenoiser, DenoiserConfig

CHECKPOINT_FORMAT = "cascade_sr.checkpoint"
BASE_FORMAT = "cascade_sr.base"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_base(base: BaseSRModel, path: str | os.PathLike) -> None:
    torch.save({"format": BASE_FORMAT, "version": CHECKPOINT_VERSION, **base.state()}, path)


def load_base(path: str | os.PathLike) -> BaseSRModel:
    doc = torch.load(path, map_location="cpu", weights_only=True)
    if doc.get("format") != BASE_FORMAT:
        raise CheckpointError(f"{path} is not a base-model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')}")
    return BaseSRModel.from_state(doc)


@dataclass
class CheckpointBundle:
    model: CoordinateDenoiser
    schedule: "DiffusionSchedule"
    config: "RunConfig"
    base: BaseSRModel = field(default_factory=BaseSRModel)
    train_state: dict | None = None
    log: list | None = None

    def save(self, path: str | os.PathLike, include_train_state: bool = True) -> None:
        path = Path(path)
        base_doc = {"mode": self.base.mode}
        if self.base.mode == "learned":
            if self.config.base.checkpoint:
                base_doc["path"] = str(self.config.base.checkpoint)
            else:
                base_path = path.with_name(path.stem + ".base.pt")
                save_base(self.base, base_path)
                base_doc["path"] = base_path.name
        doc = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_flat(),
            "model": self.model.config.to_dict(),
            "schedule": self.schedule.to_dict(),
            "weights": {k: v.detach().clone() for k, v in self.model.state_dict().items()},
            "base": base_doc,
        }
        if include_train_state and self.train_state is not None:
            doc["train_state"] = self.train_state
        tmp = path.with_name(path.name + ".tmp")
        torch.save(doc, tmp)
        os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> CheckpointBundle:
    from .config import RunConfig
    from .diffusion import DiffusionSchedule

    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    doc = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    model_cfg = DenoiserConfig(**doc["model"])
    model = CoordinateDenoiser(model_cfg)
    model.load_state_dict(doc["weights"])
    model.eval()
    config = RunConfig.from_flat(doc["config"])
    base_doc = doc.get("base", {"mode": "bicubic"})
    if base_doc["mode"] == "learned":
        bp = Path(base_doc["path"])
        if not bp.is_absolute() and (path.parent / bp).is_file():
            bp = path.parent / bp
        base = load_base(bp)
    else:
        base = BaseSRModel()
    return CheckpointBundle(
        model=model,
        schedule=DiffusionSchedule.from_dict(doc["schedule"]),
        config=config,
        base=base,
        train_state=doc.get("train_state"),
    )

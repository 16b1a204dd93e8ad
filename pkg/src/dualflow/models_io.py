"""Rebuild velocity models and classifiers from checkpoints, and dump sample images."""
from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attack import AdvSample
from .evaluate import scale_perturbation
from .io import CheckpointError, load_checkpoint, restore_into, save_checkpoint, write_pgm
from .nn import Classifier, ClassifierConfig, VelocityConfig, VelocityModel


def _jsonable(cfg) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()}


def save_model(model, path, **meta) -> None:
    kind = "velocity" if isinstance(model, VelocityModel) else "classifier"
    save_checkpoint(model.store, {"kind": kind, "config": _jsonable(model.cfg), **meta}, path)


def load_model(path, expect: str | None = None):
    """Return ``(model, meta)`` for a velocity or classifier checkpoint."""
    store, meta = load_checkpoint(path)
    kind = meta.get("kind")
    if expect is not None and kind != expect:
        raise CheckpointError(f"expected a {expect} checkpoint, found {kind!r}")
    raw = dict(meta.get("config", {}))
    if kind == "velocity":
        raw["data_shape"] = tuple(raw["data_shape"])
        model = VelocityModel(VelocityConfig(**raw))
    elif kind == "classifier":
        raw["input_shape"] = tuple(raw["input_shape"])
        raw["channels"] = tuple(raw["channels"])
        model = Classifier(ClassifierConfig(**raw))
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    restore_into(model.store, store)
    return model, meta


def emit_visualization(sample: AdvSample, prefix) -> list[Path]:
    """Write pre-clip, clipped and rescaled-perturbation images of one sample as PGM."""
    prefix = Path(prefix)
    if not prefix.parent.exists():
        raise FileNotFoundError(f"output directory {prefix.parent} does not exist")
    x = np.asarray(sample.x)
    if x.ndim != 2:
        raise ValueError("visualization needs a single 2-D image sample")
    paths = [prefix.with_name(prefix.name + s) for s in ("_preclip.pgm", "_adv.pgm", "_perturbation.pgm")]
    write_pgm(paths[0], sample.pre_clip)
    write_pgm(paths[1], sample.adv)
    write_pgm(paths[2], scale_perturbation(sample.adv - x))
    return paths

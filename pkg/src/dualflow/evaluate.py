"""Attack success rates, transfer tables, input defenses and confidence intervals."""
from __future__ import annotations

import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .attack import AdvSample
from .nn import Classifier

DEFENSE_KINDS = ("none", "gaussian", "median", "quantize")


@dataclass
class EvalReport:
    per_class: dict[int, float]
    mean: float
    n_samples: int
    seed: int = 0
    victim: str = ""
    white_box: bool = False
    per_victim: dict[str, float] = field(default_factory=dict)
    overall: float = float("nan")

    def __post_init__(self):
        for v in list(self.per_class.values()) + [self.mean]:
            if not 0.0 <= v <= 1.0:
                raise ValueError("ASR values must lie in [0, 1]")


def compute_asr(victim: Classifier, samples: AdvSample, name: str = "", white_box: bool = False,
                seed: int = 0, images: np.ndarray | None = None) -> EvalReport:
    """Targeted success rate per target class and their arithmetic mean.

    ``images`` overrides the classified inputs (defended or perturbation-only
    variants of ``samples.adv``).
    """
    if len(samples) == 0:
        raise ValueError("no adversarial samples to evaluate")
    x = samples.adv if images is None else images
    hit = victim.predict(x) == samples.target
    per = {int(c): float(np.mean(hit[samples.target == c])) for c in np.unique(samples.target)}
    rep = EvalReport(per, float(np.mean(list(per.values()))), len(samples), seed, name, white_box)
    rep.per_victim = {name: rep.mean}
    rep.overall = float(np.mean(hit))
    return rep


@dataclass
class TransferTable:
    source: str
    victims: list[str]
    asr: dict[str, float]
    reports: dict[str, EvalReport]

    @property
    def black_box_mean(self) -> float:
        """Mean over every victim except the white-box source (NaN if none)."""
        vals = [self.asr[v] for v in self.victims if v != self.source]
        return float(np.mean(vals)) if vals else float("nan")

    def rows(self) -> list[tuple[str, bool, float]]:
        return [(v, v == self.source, self.asr[v]) for v in self.victims]

    def format(self) -> str:
        head = " | ".join(f"{v}{'*' if v == self.source else ''}" for v in self.victims)
        vals = " | ".join(f"{100 * self.asr[v]:.2f}" for v in self.victims)
        bb = self.black_box_mean
        avg = "n/a" if math.isnan(bb) else f"{100 * bb:.2f}"
        return f"victim: {head} | black-box avg\nASR %:  {vals} | {avg}"


def transfer_matrix(victims: Mapping[str, Classifier], source: str, attack: Callable[[], AdvSample] | AdvSample,
                    seed: int = 0) -> TransferTable:
    """Evaluate one set of adversarial samples against every victim.

    ``attack`` is either the samples themselves or a zero-argument callable
    producing them; they are generated once and shared by all victims.
    """
    if source not in victims:
        raise ValueError(f"source model {source!r} is not among the victims")
    samples = attack() if callable(attack) else attack
    reports = {n: compute_asr(m, samples, n, n == source, seed) for n, m in victims.items()}
    return TransferTable(source, list(victims), {n: r.mean for n, r in reports.items()}, reports)


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = "none"
    param: float = 0.0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.kind == "gaussian" and self.param < 0:
            raise ValueError("gaussian sigma must be non-negative")
        if self.kind == "median" and (int(self.param) != self.param or self.param < 1 or int(self.param) % 2 == 0):
            raise ValueError("median window must be an odd integer >= 1")
        if self.kind == "quantize" and (int(self.param) != self.param or self.param < 2):
            raise ValueError("quantization needs at least 2 levels")

    @property
    def label(self) -> str:
        return "none" if self.kind == "none" else f"{self.kind}({self.param:g})"


def apply_defense(x: np.ndarray, spec: DefenseSpec) -> np.ndarray:
    """Apply the defense to one image [H, W] or a batch [N, H, W]."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim not in (2, 3):
        raise ValueError("defenses expect [H, W] or [N, H, W] images")
    lead = (0,) if x.ndim == 3 else ()
    if spec.kind == "none" or (spec.kind == "gaussian" and spec.param == 0):
        out = x.copy()
    elif spec.kind == "gaussian":
        sigma = lead + (spec.param, spec.param)
        out = ndimage.gaussian_filter(x.astype(np.float64), sigma=sigma, mode="reflect")
    elif spec.kind == "median":
        w = int(spec.param)
        size = (1, w, w) if x.ndim == 3 else (w, w)
        out = ndimage.median_filter(x, size=size, mode="reflect")
    else:
        levels = int(spec.param) - 1
        out = np.round(x.astype(np.float64) * levels) / levels
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def split_confidence_interval(values, z: float = 1.96) -> tuple[float, float]:
    """Mean and half-width ``z * s / sqrt(k)`` over ``k`` per-split values."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or len(v) < 2:
        raise ValueError("need at least two splits")
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    # scale the deviations first so tiny spreads do not underflow to zero
    dev = v - v.mean()
    m = np.abs(dev).max()
    return float(v.mean()), float(z * m * (dev / m).std(ddof=1) / math.sqrt(len(v)))


def split_asr(victim: Classifier, samples: AdvSample, n_splits: int = 5) -> list[float]:
    """Mean per-class ASR on ``n_splits`` disjoint contiguous chunks."""
    if len(samples) < n_splits:
        raise ValueError("fewer samples than splits")
    bounds = np.linspace(0, len(samples), n_splits + 1).astype(int)
    return [compute_asr(victim, samples[slice(a, b)]).mean for a, b in zip(bounds[:-1], bounds[1:])]


def scale_perturbation(delta: np.ndarray) -> np.ndarray:
    """Per-image affine rescale to [0, 1]; a constant perturbation maps to 0.5."""
    d = np.asarray(delta, dtype=np.float64)
    single = d.ndim == 2
    if single:
        d = d[None]
    flat = d.reshape(len(d), -1)
    lo = flat.min(axis=1)[:, None]
    span = flat.max(axis=1)[:, None] - lo
    out = np.where(span > 0, (flat - lo) / np.where(span > 0, span, 1.0), 0.5)
    out = out.reshape(d.shape).astype(np.float32)
    return out[0] if single else out


def perturbation_asr(victim: Classifier, samples: AdvSample) -> float:
    """Targeted success rate when classifying only the rescaled perturbations."""
    if len(samples) == 0:
        raise ValueError("no adversarial samples to evaluate")
    return float(np.mean(victim.predict(scale_perturbation(samples.perturbation)) == samples.target))


def defense_sweep(victim: Classifier, samples: AdvSample, specs) -> dict[str, float]:
    return {s.label: compute_asr(victim, samples, images=apply_defense(samples.adv, s)).mean for s in specs}


DEFAULT_DEFENSES = (
    DefenseSpec("none"),
    DefenseSpec("gaussian", 0.5), DefenseSpec("gaussian", 1.0), DefenseSpec("gaussian", 1.5),
    DefenseSpec("median", 3), DefenseSpec("median", 5),
    DefenseSpec("quantize", 8), DefenseSpec("quantize", 4),
)

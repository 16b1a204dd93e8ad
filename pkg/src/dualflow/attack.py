"""Cascading distribution-shift training and dual-flow sampling.

Training variants:

``co``  forward ODE to tau, then one update per reverse step (cascading ODE)
``cs``  jump to tau by noising, stochastic reverse steps, one update per step
``rs``  noise to a random grid time, a single update there
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tape, Tensor
from .data import Dataset
from .flow import (
    FlowSchedule,
    NoiseSpec,
    extrapolate_x0,
    forward_integrate,
    marginal_sample,
    model_field,
    reverse_integrate,
    reverse_step,
)
from .nn import NULL, Classifier, VelocityModel
from .optim import Optimizer

log = logging.getLogger(__name__)

VARIANTS = ("co", "cs", "rs")
IMAGE_RANGE = (0.0, 1.0)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    lr: float = 3e-4
    steps: int = 300
    batch_size: int = 32
    variant: str = "co"
    sched: FlowSchedule = FlowSchedule(0.25, 6)
    train_clip: bool = True
    l2_weight: float = 0.0
    noise: NoiseSpec = NoiseSpec()
    targets: tuple[int, ...] = tuple(range(8))
    seed: int = 0
    optimizer: str = "adam"
    train_embeddings: bool = True
    embedding_lr_scale: float = 10.0
    class_init: str = "random"
    class_init_scale: float = 10.0
    value_range: tuple[float, float] | None = IMAGE_RANGE

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be non-negative")
        if not self.targets:
            raise ValueError("target set is empty")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")

    @property
    def train_noise(self) -> NoiseSpec:
        # the cascading ODE trains on the deterministic trajectory
        return NoiseSpec(0.0, self.noise.seed) if self.variant == "co" else self.noise


@dataclass(frozen=True)
class MaskConfig:
    n_squares: int = 3
    side_range: tuple[int, int] = (2, 5)
    seed: int = 0


@dataclass
class AdvSample:
    """Originals, pre-clip outputs and budget-clipped outputs with their targets.

    Arrays carry a leading sample axis; indexing yields a single sample.
    """

    x: np.ndarray
    pre_clip: np.ndarray
    adv: np.ndarray
    target: np.ndarray
    predictions: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(np.size(self.target))

    def __getitem__(self, i) -> "AdvSample":
        preds = {k: v[i] for k, v in self.predictions.items()}
        return AdvSample(self.x[i], self.pre_clip[i], self.adv[i], np.asarray(self.target[i]), preds)

    @property
    def perturbation(self) -> np.ndarray:
        return self.adv - self.x

    @staticmethod
    def concat(parts: list["AdvSample"]) -> "AdvSample":
        if not parts:
            raise ValueError("no samples to concatenate")
        keys = set(parts[0].predictions)
        return AdvSample(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.pre_clip for p in parts]),
            np.concatenate([p.adv for p in parts]),
            np.concatenate([np.atleast_1d(p.target) for p in parts]),
            {k: np.concatenate([p.predictions[k] for p in parts]) for k in keys},
        )


@dataclass
class AttackResult:
    loss: list[float] = field(default_factory=list)
    batch_asr: list[float] = field(default_factory=list)
    updates: int = 0
    samples_seen: int = 0
    final_asr: float | None = None


def budget_bounds(x: np.ndarray, epsilon: float,
                  value_range: tuple[float, float] | None = IMAGE_RANGE) -> tuple[np.ndarray, np.ndarray]:
    """float32 bounds of the l-inf ball around ``x`` intersected with ``value_range``.

    Rounding is corrected so every value between the bounds satisfies
    ``|value - x| <= epsilon`` exactly when measured in float64.  Pass
    ``value_range=None`` for data that is not an image (no clamping).
    """
    x = np.asarray(x, dtype=np.float32)
    x64 = x.astype(np.float64)
    lo64, hi64 = x64 - epsilon, x64 + epsilon
    lo = lo64.astype(np.float32)
    hi = hi64.astype(np.float32)
    # compare the measured distance, since x64 +- epsilon is itself rounded
    lo = np.where(x64 - lo.astype(np.float64) > epsilon, np.nextafter(lo, np.float32(np.inf)), lo)
    hi = np.where(hi.astype(np.float64) - x64 > epsilon, np.nextafter(hi, np.float32(-np.inf)), hi)
    if value_range is not None:
        lo = np.maximum(lo, np.float32(value_range[0]))
        hi = np.minimum(hi, np.float32(value_range[1]))
    return lo.astype(np.float32), hi.astype(np.float32)


def project_linf(x: np.ndarray, y: np.ndarray, epsilon: float,
                 value_range: tuple[float, float] | None = IMAGE_RANGE) -> np.ndarray:
    lo, hi = budget_bounds(x, epsilon, value_range)
    return np.clip(np.asarray(y, dtype=np.float32), lo, hi)


def linf(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-sample l-inf distance computed in float64."""
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    return d.reshape(len(d), -1).max(axis=1) if d.ndim > 1 else d


def square_mask(shape: tuple[int, int], squares) -> np.ndarray:
    """Ones everywhere except the given ``(row, col, side)`` squares."""
    h, w = shape
    m = np.ones(shape, dtype=np.float32)
    for r, c, s in squares:
        if s > h or s > w or r < 0 or c < 0 or r + s > h or c + s > w:
            raise ValueError("square does not fit inside the image")
        m[r:r + s, c:c + s] = 0.0
    return m


def random_square_mask(shape: tuple[int, int], mcfg: MaskConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Binary mask with ``n_squares`` randomly placed zero squares."""
    rng = rng if rng is not None else np.random.default_rng(mcfg.seed)
    lo, hi = mcfg.side_range
    h, w = shape
    if hi > min(h, w) or lo < 1 or lo > hi:
        raise ValueError("square side range does not fit the image")
    squares = []
    for _ in range(mcfg.n_squares):
        s = int(rng.integers(lo, hi + 1))
        squares.append((int(rng.integers(0, h - s + 1)), int(rng.integers(0, w - s + 1)), s))
    return square_mask(shape, squares)


def prepare_attack(model: VelocityModel, train_embeddings: bool = True, class_init: str = "null",
                   seed: int = 0, scale: float = 1.0) -> None:
    """Reset theta to phi (zero B, fresh class rows) and set trainable flags."""
    model.reset_adapters(class_init, seed, scale)
    store = model.store
    store.set_trainable(False)
    store.set_trainable(True, names=set(model.adapter_names()))
    if train_embeddings:
        store.set_trainable(True, names=set(model.class_embedding_names()))


def _step_loss(model, clf, x_state, t, c, x, lo, hi, cfg: AttackConfig, mask=None, ref_prev=None, delta=None):
    """Tape-recorded loss of one cascade update; returns (loss, velocity, x_hat0)."""
    v = model(Tensor(x_state), t, c, use_lora=True)
    xhat = extrapolate_x0(x_state, v, t)
    if mask is not None:
        xhat = x + mask * (xhat - x)
    if cfg.train_clip:
        xhat = ad.clip_box(xhat, lo, hi)
    logits = clf(xhat)
    loss = ad.softmax_cross_entropy(logits, c)
    if cfg.l2_weight > 0 and ref_prev is not None:
        x_prev = x_state - v * np.float32(delta)
        loss = loss + cfg.l2_weight * ad.mean(ad.square(x_prev - ref_prev))
    return loss, v, logits


def train_dual_flow(model: VelocityModel, clf: Classifier, data: Dataset, cfg: AttackConfig,
                    mask_cfg: MaskConfig | None = None, eval_data: Dataset | None = None,
                    optimizer: Optimizer | None = None, reset: bool = True) -> AttackResult:
    """Train the LoRA-adapted reverse velocity against ``clf``.

    Each of ``cfg.steps`` iterations draws a minibatch and a uniform target
    per sample.  ``co``/``cs`` perform exactly ``n_steps`` optimizer updates
    per minibatch (one per reverse step, the state entering each step treated
    as a constant); ``rs`` performs exactly one.  With ``reset=False`` the
    current theta is the starting point (used for fine-tuning).
    """
    if reset:
        prepare_attack(model, cfg.train_embeddings, cfg.class_init, cfg.seed, cfg.class_init_scale)
    store = model.store
    opt = optimizer or Optimizer(cfg.optimizer, cfg.lr,
                                 lr_scale={n: cfg.embedding_lr_scale for n in model.class_embedding_names()})
    rng = np.random.default_rng(cfg.seed)
    sched = cfg.sched
    targets = np.asarray(cfg.targets, dtype=np.int64)
    v_phi = model_field(model, NULL, use_lora=False)
    gamma = cfg.train_noise.gamma
    result = AttackResult()
    img_shape = data.sample_shape

    def update(loss, logits, c):
        grads = store.gradients(tape, tape.backward(loss))
        opt.step(store, grads)
        result.updates += 1
        result.loss.append(loss.item())
        result.batch_asr.append(float(np.mean(logits.data.argmax(-1) == c)))

    try:
        for _ in range(cfg.steps):
            idx = rng.integers(0, len(data), size=cfg.batch_size)
            x = data.x[idx].astype(np.float32)
            c = rng.choice(targets, size=len(idx))
            lo, hi = budget_bounds(x, cfg.epsilon, cfg.value_range)
            result.samples_seen += len(idx)

            def draw_mask():
                if mask_cfg is None:
                    return None
                return np.stack([random_square_mask(img_shape, mask_cfg, rng) for _ in range(len(idx))])

            if cfg.variant == "rs":
                k = rng.integers(1, sched.n_steps + 1, size=len(idx))
                t = k * sched.delta
                z = rng.standard_normal(x.shape).astype(np.float32)
                xt = marginal_sample(x, t, z)
                with Tape() as tape:
                    loss, _, logits = _step_loss(model, clf, xt, t, c, x, lo, hi, cfg, draw_mask())
                update(loss, logits, c)
                continue

            if cfg.variant == "co":
                xk, traj = forward_integrate(v_phi, x, sched)
                refs = traj.states
            else:
                z = rng.standard_normal(x.shape).astype(np.float32)
                xk = marginal_sample(x, sched.tau, z)
                refs = [marginal_sample(x, sched.time(j), z) for j in range(sched.n_steps + 1)]
            for k in range(sched.n_steps, 0, -1):
                t = sched.time(k)
                with Tape() as tape:
                    loss, v, logits = _step_loss(model, clf, xk, t, c, x, lo, hi, cfg, draw_mask(),
                                                 refs[k - 1], sched.delta)
                vel = v.data
                update(loss, logits, c)
                # the state for the next step comes from the pre-update velocity
                xk = reverse_step(xk, vel, t, sched.delta, gamma, rng)
    except NonFiniteError:
        log.error("attack training hit a non-finite value after %d updates", result.updates)
        raise
    if eval_data is not None:
        adv = sample_dataset(model, eval_data, cfg.targets, sched, cfg.epsilon, seed=cfg.seed,
                             value_range=cfg.value_range)
        result.final_asr = float(np.mean(clf.predict(adv.adv) == adv.target))
    return result


def finetune_single_target(model: VelocityModel, clf: Classifier, data: Dataset, target: int,
                           cfg: AttackConfig, mcfg: MaskConfig | None, optimizer: Optimizer | None = None) -> AttackResult:
    """Continue cascade training with a fixed target and masked x_hat0.

    Starts from the current theta (typically a multi-target run).  Masked
    squares keep the original pixels, so the perturbation has to spread
    over the whole image.
    """
    cfg = replace(cfg, targets=(int(target),), variant="co")
    return train_dual_flow(model, clf, data, cfg, mask_cfg=mcfg, optimizer=optimizer, reset=False)


def sample_dual_flow(model: VelocityModel, x: np.ndarray, c, sched: FlowSchedule, epsilon: float,
                     noise: NoiseSpec | None = None, use_lora: bool = True, clip: bool = True,
                     value_range: tuple[float, float] | None = IMAGE_RANGE) -> AdvSample:
    """Forward with the base field, reverse with the adapted field, clip to the budget.

    With ``clip=False`` (or an infinite epsilon) the output is the raw
    reverse-flow result.
    """
    x = np.asarray(x, dtype=np.float32)
    c = np.broadcast_to(np.asarray(c, dtype=np.int64), (len(x),)).copy()
    x_tau, _ = forward_integrate(model_field(model, NULL, False), x, sched)

    def v_theta(xs, t):
        return model.velocity(xs, t, c, use_lora)

    pre, _ = reverse_integrate(v_theta, x_tau, sched, noise)
    if clip and np.isfinite(epsilon):
        adv = project_linf(x, pre, epsilon, value_range)
    else:
        adv = pre.copy()
    return AdvSample(x, pre, adv, c)


def eval_targets(n: int, targets, seed: int) -> np.ndarray:
    """Deterministic balanced target assignment for ``n`` evaluation images."""
    targets = np.asarray(targets, dtype=np.int64)
    return np.random.default_rng(seed).permutation(np.resize(targets, n))


def sample_dataset(model: VelocityModel, data: Dataset, targets, sched: FlowSchedule, epsilon: float,
                   noise: NoiseSpec | None = None, use_lora: bool = True, seed: int = 0,
                   batch: int = 256, clip: bool = True,
                   value_range: tuple[float, float] | None = IMAGE_RANGE) -> AdvSample:
    """Adversarial samples for every image of ``data`` with balanced targets."""
    tgt = eval_targets(len(data), targets, seed)
    parts = []
    for i in range(0, len(data), batch):
        sl = slice(i, i + batch)
        nz = None
        if noise is not None and noise.gamma > 0:
            nz = NoiseSpec(noise.gamma, noise.seed + i)
        parts.append(sample_dual_flow(model, data.x[sl], tgt[sl], sched, epsilon, nz, use_lora, clip, value_range))
    return AdvSample.concat(parts)

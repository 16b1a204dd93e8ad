"""Empirical check that one cascade update also helps the next timestep.

For each sample the state ``x_t`` on the reverse trajectory is reached with
the current adapter weights.  A single gradient step ``dtheta`` is taken on
the cross-entropy of the extrapolated ``x_hat0`` at ``t``.  The state at
``t - delta`` is then produced with the old weights and extrapolated twice,
once with the old and once with the updated weights, and the two
cross-entropies are compared.  Everything runs unclipped in float64.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attack import eval_targets
from .autodiff import Tape, Tensor, precision
from .data import Dataset
from .nn import NULL, Classifier, VelocityModel


@dataclass(frozen=True)
class CascadeCheckConfig:
    n_samples: int = 200
    t: float = 0.25
    delta: float = 0.25 / 64
    tau: float = 0.25
    lr: float = 1e-4
    tol: float = 0.0
    smooth: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.delta < self.t <= self.tau <= 1:
            raise ValueError("need 0 < delta < t <= tau <= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.n_samples < 1:
            raise ValueError("need at least one sample")
        for span in (self.tau, self.tau - self.t):
            k = span / self.delta
            if abs(k - round(k)) > 1e-6:
                raise ValueError("tau and tau - t must be whole multiples of delta")


@dataclass
class CascadeReport:
    improvement_fraction: float
    mean_delta_ce: float
    delta_ce: np.ndarray
    ce_before: np.ndarray

    @property
    def n_samples(self) -> int:
        return len(self.delta_ce)


def _euler(model, x, t0, n, step, c, use_lora):
    """``n`` Euler steps of signed size ``step`` starting at time ``t0``."""
    t = t0
    for _ in range(n):
        x = x + step * model(Tensor(x), t, c, use_lora).data
        t = t + step
    return x


def _theta_names(model: VelocityModel) -> list[str]:
    return model.adapter_names() + model.class_embedding_names()


def verify_cascade(model: VelocityModel, clf: Classifier, data: Dataset, ccfg: CascadeCheckConfig) -> CascadeReport:
    """Fraction of samples whose CE at ``t - delta`` does not rise after the update at ``t``."""
    if ccfg.smooth and not clf.is_smooth():
        raise ValueError("smooth mode requires a classifier with smooth activations")
    n = min(ccfg.n_samples, len(data))
    x = data.x[:n].astype(np.float64)
    c = eval_targets(n, range(data.n_classes), ccfg.seed)
    names = _theta_names(model)
    store = model.store
    flags = {k: store.is_trainable(k) for k in store}
    store.set_trainable(False)
    store.set_trainable(True, names=set(names))
    d, t = ccfg.delta, ccfg.t
    try:
        with precision(np.float64):
            x_tau = _euler(model, x, 0.0, int(round(ccfg.tau / d)), d, NULL, False)
            x_t = _euler(model, x_tau, ccfg.tau, int(round((ccfg.tau - t) / d)), -d, c, True)
            v_old = model(Tensor(x_t), t, c, True).data
            x_prev = x_t - d * v_old
            theta = {k: store[k].astype(np.float64) for k in names}
            ce0, ce1, ce2 = np.zeros(n), np.zeros(n), np.zeros(n)

            def ce_at_prev(params, sl):
                # both branches share this exact code path so lr = 0 compares equal
                with store.bind({k: Tensor(v) for k, v in params.items()}):
                    v_prev = model(Tensor(x_prev[sl]), t - d, c[sl], True).data
                xh = x_prev[sl] - (t - d) * v_prev
                return ad.softmax_cross_entropy(clf(Tensor(xh)), c[sl]).item()

            for i in range(n):
                sl = slice(i, i + 1)
                with Tape() as tape:
                    v = model(Tensor(x_t[sl]), t, c[sl], True)
                    loss = ad.softmax_cross_entropy(clf(Tensor(x_t[sl]) - v * t), c[sl])
                grads = tape.backward(loss)
                ce0[i] = loss.item()
                moved = {}
                for k in names:
                    node = tape.param_nodes.get((id(store), k))
                    g = grads[node].data if node is not None else 0.0
                    moved[k] = theta[k] - ccfg.lr * g
                ce1[i] = ce_at_prev(theta, sl)
                ce2[i] = ce_at_prev(moved, sl)
    finally:
        for k, f in flags.items():
            store.set_trainable(f, names={k})
    diff = ce2 - ce1
    return CascadeReport(
        improvement_fraction=float(np.mean(diff <= ccfg.tol)),
        mean_delta_ce=float(np.mean(diff)),
        delta_ce=diff,
        ce_before=ce0,
    )

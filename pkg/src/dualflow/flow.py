"""Explicit-Euler integration of the forward and reverse flows.

Time runs from 0 (data) to 1 (noise).  Velocity fields are plain callables
``v(x, t) -> array`` on batched numpy arrays; :func:`model_field` adapts a
:class:`~dualflow.nn.VelocityModel` to that form.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError
from .nn import NULL, VelocityModel


@dataclass(frozen=True)
class FlowSchedule:
    """Terminal time ``tau`` split into ``n_steps`` Euler steps of size ``delta``."""

    tau: float = 0.25
    n_steps: int = 6

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def delta(self) -> float:
        return self.tau / self.n_steps

    def time(self, k: int) -> float:
        """Time of grid point ``k`` (0 <= k <= n_steps)."""
        return k * self.tau / self.n_steps


@dataclass(frozen=True)
class NoiseSpec:
    """Reverse-step noise of scale ``gamma``; ``gamma == 0`` is the deterministic ODE."""

    gamma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("noise scale must be non-negative")

    @property
    def mode(self) -> str:
        return "stochastic" if self.gamma > 0 else "deterministic"


@dataclass
class Trajectory:
    times: list[float] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)

    def append(self, t: float, x: np.ndarray) -> None:
        if not np.isfinite(x).all():
            raise NonFiniteError(f"non-finite state at t={t}")
        self.times.append(float(t))
        self.states.append(x)

    def __len__(self) -> int:
        return len(self.states)


def model_field(model: VelocityModel, c=NULL, use_lora: bool = False):
    """Wrap a velocity model as ``v(x, t)`` for condition ``c``."""

    def v(x, t):
        return model.velocity(x, t, c, use_lora)

    return v


def forward_integrate(v, x0: np.ndarray, sched: FlowSchedule):
    """N Euler steps ``x <- x + v(x, t) delta`` from t=0 to t=tau."""
    x = np.array(x0, dtype=np.float32)
    traj = Trajectory()
    traj.append(0.0, x)
    d = np.float32(sched.delta)
    for k in range(1, sched.n_steps + 1):
        x = (x + v(x, sched.time(k - 1)) * d).astype(np.float32)
        traj.append(sched.time(k), x)
    return x, traj


def reverse_step(x: np.ndarray, vel: np.ndarray, t: float, delta: float, gamma: float = 0.0, rng=None) -> np.ndarray:
    """One reverse step ``x - v delta``, plus ``gamma t sqrt(delta) xi`` when stochastic."""
    out = x - vel * np.float32(delta)
    if gamma > 0:
        out = out + np.float32(gamma * t * np.sqrt(delta)) * rng.standard_normal(x.shape).astype(np.float32)
    return out.astype(np.float32)


def reverse_integrate(v, x_tau: np.ndarray, sched: FlowSchedule, noise: NoiseSpec | None = None, start_time: float | None = None):
    """N reverse Euler steps from t=tau (or ``start_time``) back to 0."""
    noise = noise or NoiseSpec()
    rng = np.random.default_rng(noise.seed) if noise.gamma > 0 else None
    tau = sched.tau if start_time is None else start_time
    n = sched.n_steps
    d = tau / n
    x = np.array(x_tau, dtype=np.float32)
    traj = Trajectory()
    traj.append(tau, x)
    for k in range(n, 0, -1):
        t = k * tau / n
        x = reverse_step(x, v(x, t), t, d, noise.gamma, rng)
        traj.append((k - 1) * tau / n, x)
    return x, traj


def extrapolate_x0(x_t, v, t):
    """One-shot prediction ``x_t - t v`` of the t=0 state along a straight path.

    Works on arrays or tensors; ``t`` may be a scalar or a per-sample vector.
    """
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr <= 0) | (t_arr > 1)):
        raise ValueError("extrapolation time must lie in (0, 1]")
    if np.shape(x_t) != np.shape(v.data if hasattr(v, "data") else v):
        raise ValueError("state and velocity shapes differ")
    if t_arr.ndim:
        t_arr = t_arr.reshape((-1,) + (1,) * (len(np.shape(x_t)) - 1))
    return x_t - v * t_arr.astype(np.float32)


def marginal_sample(x0, t, z):
    """Point ``(1 - t) x0 + t z`` on the linear data-to-noise path."""
    x0 = np.asarray(x0, dtype=np.float32)
    z = np.asarray(z, dtype=np.float32)
    if x0.shape != z.shape:
        raise ValueError("x0 and z must have the same shape")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("t must lie in [0, 1]")
    if t_arr.ndim:
        t_arr = t_arr.reshape((-1,) + (1,) * (x0.ndim - 1))
    return ((1 - t_arr) * x0 + t_arr * z).astype(np.float32)


def roundtrip_error(v, x0: np.ndarray, sched: FlowSchedule) -> float:
    """l-inf distance between ``x0`` and reverse(forward(x0)) with the same field."""
    x_tau, _ = forward_integrate(v, x0, sched)
    back, _ = reverse_integrate(v, x_tau, sched)
    return float(np.max(np.abs(back.astype(np.float64) - np.asarray(x0, dtype=np.float64))))


def generate(v, z: np.ndarray, n_steps: int = 64) -> np.ndarray:
    """Sample from noise by integrating the reverse flow over the full [1, 0]."""
    out, _ = reverse_integrate(v, z, FlowSchedule(1.0, n_steps))
    return out

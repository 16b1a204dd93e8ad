"""Named parameter storage, SGD/Adam updates and a finite-difference checker."""
from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterator, Mapping

import numpy as np

from .autodiff import NonFiniteError, Tape, Tensor, active_tape, precision


class ParamStore:
    """Ordered mapping of unique names to float32 arrays, each trainable or frozen."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}
        self._bound: dict[str, Tensor] = {}

    def add(self, name: str, value, trainable: bool = True) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"parameter {name!r} is not finite")
        self._values[name] = arr
        self._trainable[name] = bool(trainable)
        return arr

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def set_trainable(self, flag: bool, prefix: str = "", names=None) -> None:
        """Mark every parameter starting with ``prefix`` (or listed in ``names``)."""
        for n in self._values:
            if (names is not None and n in names) or (names is None and n.startswith(prefix)):
                self._trainable[n] = bool(flag)

    def assign(self, name: str, value) -> None:
        arr = np.asarray(value, dtype=np.float32)
        if arr.shape != self._values[name].shape:
            raise ValueError(f"shape mismatch assigning {name!r}")
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite update for {name!r}")
        self._values[name] = arr.copy()

    @contextlib.contextmanager
    def bind(self, tensors: Mapping[str, Tensor]):
        """Serve the given tensors in place of stored values (used by gradient checks)."""
        for n in tensors:
            if n not in self._values:
                raise KeyError(f"unknown parameter {n!r}")
        old = self._bound
        self._bound = {**old, **tensors}
        try:
            yield self
        finally:
            self._bound = old

    def tensor(self, name: str) -> Tensor:
        """The parameter as a tensor; trainable ones are watched on the active tape."""
        if name in self._bound:
            return self._bound[name]
        tape = active_tape()
        if tape is None or not self._trainable[name]:
            return Tensor(self._values[name], check=False)
        key = (id(self), name)
        node = tape.param_nodes.get(key)
        if node is None:
            leaf = tape.watch(self._values[name])
            tape.param_nodes[key] = leaf.node
            return leaf
        return tape.leaves[node]

    def gradients(self, tape: Tape, grads: Mapping[int, Tensor]) -> dict[str, np.ndarray]:
        """Map tape gradients back to parameter names (trainable params only).

        A trainable parameter the forward never touched gets zeros.
        """
        out = {}
        for name in self.trainable_names():
            node = tape.param_nodes.get((id(self), name))
            g = grads[node].data if node is not None else np.zeros_like(self._values[name])
            out[name] = np.asarray(g, dtype=np.float32)
        return out

    def copy(self) -> "ParamStore":
        new = ParamStore()
        for n, v in self._values.items():
            new.add(n, v, self._trainable[n])
        return new

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: v.copy() for n, v in self._values.items()}

    def load_state(self, values: Mapping[str, np.ndarray], trainable: Mapping[str, bool] | None = None) -> None:
        missing = set(self._values) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for n, v in values.items():
            if n not in self._values:
                raise KeyError(f"unknown parameter {n!r}")
            self.assign(n, v)
            if trainable is not None:
                self._trainable[n] = bool(trainable[n])


class Optimizer:
    """Plain SGD or Adam over the trainable entries of a :class:`ParamStore`."""

    def __init__(self, kind: str = "sgd", lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 lr_scale: Mapping[str, float] | None = None):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {kind!r}")
        self.kind = kind
        self.lr = float(lr)
        self.betas = betas
        self.eps = eps
        self.lr_scale = dict(lr_scale or {})
        self.steps = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, grads: Mapping[str, np.ndarray]) -> None:
        for name in grads:
            if name not in store:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if not store.is_trainable(name):
                raise ValueError(f"gradient supplied for frozen parameter {name!r}")
        self.steps += 1
        if self.lr == 0.0:
            return
        b1, b2 = self.betas
        for name, g in grads.items():
            g = np.asarray(g, dtype=np.float64)
            p = store[name].astype(np.float64)
            lr = self.lr * self.lr_scale.get(name, 1.0)
            if self.kind == "sgd":
                p = p - lr * g
            else:
                m = b1 * self._m.get(name, 0.0) + (1 - b1) * g
                v = b2 * self._v.get(name, 0.0) + (1 - b2) * g * g
                self._m[name], self._v[name] = m, v
                mhat = m / (1 - b1**self.steps)
                vhat = v / (1 - b2**self.steps)
                p = p - lr * mhat / (np.sqrt(vhat) + self.eps)
            store.assign(name, p)


def optimizer_step(store: ParamStore, grads, lr: float, kind: str = "sgd", state: Optimizer | None = None) -> ParamStore:
    """One update of ``store`` in place; pass ``state`` to keep Adam moments across calls."""
    opt = state if state is not None else Optimizer(kind, lr)
    opt.lr = float(lr)
    opt.step(store, grads)
    return store


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-3, coords=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps a tensor shaped like ``point`` to a scalar tensor.  Everything
    runs in float64.  The error per coordinate is
    ``|a - n| / (|a| + |n| + 1e-12)``; ``coords`` restricts the check to a
    subset of flat indices.
    """
    with precision(np.float64):
        x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
        with Tape() as tape:
            leaf = tape.watch(x0)
            out = fn(leaf)
        analytic = tape.backward(out)[leaf.node].data.reshape(-1)
        flat = x0.reshape(-1)
        idx = range(flat.size) if coords is None else coords
        worst = 0.0
        for i in idx:
            xp = flat.copy()
            xp[i] += h
            xm = flat.copy()
            xm[i] -= h
            fp = fn(Tensor(xp.reshape(x0.shape))).item()
            fm = fn(Tensor(xm.reshape(x0.shape))).item()
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError("non-finite function value in grad_check")
            num = (fp - fm) / (2 * h)
            a = analytic[i]
            err = abs(a - num) / (abs(a) + abs(num) + 1e-12)
            worst = max(worst, err)
        return float(worst)

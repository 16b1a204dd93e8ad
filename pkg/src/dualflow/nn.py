"""Velocity networks with LoRA adapters, class conditioning and small classifiers."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .optim import ParamStore

NULL = -1  # class index meaning "no condition"


def _xavier(rng: np.random.Generator, d_out: int, d_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / (d_in + d_out)), size=(d_out, d_in))


def linear(x, w, b=None) -> Tensor:
    """``x @ W^T + b`` with ``W`` stored as (d_out, d_in)."""
    y = ad.matmul(x, ad.swap_last(w))
    return y if b is None else y + b


def lora_forward(x, w, b, a_mat, b_mat, alpha: float) -> Tensor:
    """``(W + (alpha/r) B A) x + b`` evaluated in factored form.

    The base product is computed first and the low-rank term is added on top,
    so a zero ``B`` (or ``alpha == 0``) reproduces the base output bit for bit.
    """
    a_mat, b_mat = as_tensor(a_mat), as_tensor(b_mat)
    r = a_mat.shape[0]
    if b_mat.shape[1] != r or a_mat.shape[1] != as_tensor(w).shape[1] or b_mat.shape[0] != as_tensor(w).shape[0]:
        raise ValueError("LoRA factor shapes do not match the base layer")
    base = linear(x, w, b)
    delta = ad.matmul(ad.matmul(x, ad.swap_last(a_mat)), ad.swap_last(b_mat))
    return base + delta * (alpha / r)


class Dense:
    """Dense layer whose parameters live in a shared :class:`ParamStore`.

    With ``rank > 0`` the layer also owns a LoRA pair ``A`` (r x d_in, normal
    std 0.02) and ``B`` (d_out x r, zeros).  Adapter parameters are created
    frozen; the attack trainer switches them on.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng, *,
                 bias: bool = True, rank: int = 0, alpha: float | None = None, init_scale: float = 1.0):
        self.store, self.name = store, name
        self.d_in, self.d_out = d_in, d_out
        store.add(f"{name}.W", _xavier(rng, d_out, d_in) * init_scale)
        self.bias = bias
        if bias:
            store.add(f"{name}.b", np.zeros(d_out))
        self.rank = rank
        self.alpha = float(rank if alpha is None else alpha)
        if rank:
            if not 1 <= rank <= min(d_in, d_out):
                raise ValueError(f"LoRA rank {rank} invalid for a {d_in}->{d_out} layer")
            store.add(f"{name}.lora_A", rng.normal(0.0, 0.02, size=(rank, d_in)), trainable=False)
            store.add(f"{name}.lora_B", np.zeros((d_out, rank)), trainable=False)

    def __call__(self, x, use_lora: bool = False) -> Tensor:
        s = self.store
        w = s.tensor(f"{self.name}.W")
        b = s.tensor(f"{self.name}.b") if self.bias else None
        if use_lora and self.rank:
            return lora_forward(x, w, b, s.tensor(f"{self.name}.lora_A"), s.tensor(f"{self.name}.lora_B"), self.alpha)
        return linear(x, w, b)


def attention(q, k, v, return_weights: bool = False):
    """Single-head attention of one query per row over a set of key/value rows.

    ``q`` is [..., d]; ``k`` and ``v`` are [..., R, d].
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[:-1] != k.shape[:-1]:
        raise ValueError("attention dimension mismatch")
    qr = ad.reshape(q, q.shape[:-1] + (1, d))
    scores = ad.matmul(qr, ad.swap_last(k)) * (1.0 / math.sqrt(d))
    w = ad.softmax(scores, axis=-1)
    out = ad.reshape(ad.matmul(w, v), q.shape[:-1] + (v.shape[-1],))
    if return_weights:
        return out, ad.reshape(w, w.shape[:-2] + (w.shape[-1],))
    return out


def cross_attention(z, e, w_q, w_k, w_v, return_weights: bool = False):
    """``softmax((z W_Q)(e W_K)^T / sqrt(d)) (e W_V)`` with ``W`` as (d_in, d)."""
    z, e = as_tensor(z), as_tensor(e)
    w_q, w_k, w_v = as_tensor(w_q), as_tensor(w_k), as_tensor(w_v)
    if e.ndim == 1:
        e = ad.reshape(e, (1,) + e.shape)
    if z.shape[-1] != w_q.shape[0] or e.shape[-1] != w_k.shape[0] or e.shape[-1] != w_v.shape[0]:
        raise ValueError("cross_attention weight shapes do not match inputs")
    if w_q.shape[1] != w_k.shape[1]:
        raise ValueError("query and key projections must share width")
    squeeze = z.ndim == 1
    if squeeze:
        z = ad.reshape(z, (1,) + z.shape)
    q = ad.matmul(z, w_q)
    k = ad.matmul(e, w_k)
    v = ad.matmul(e, w_v)
    res = attention(q, k, v, return_weights)
    if squeeze:
        if return_weights:
            return ad.reshape(res[0], res[0].shape[1:]), ad.reshape(res[1], res[1].shape[1:])
        return ad.reshape(res, res.shape[1:])
    return res


class ClassEmbeddingTable:
    """K class rows plus the null row used for the unconditional velocity.

    The null row belongs to the pretrained weights.  Class rows are separate
    parameters so they can be trained during the attack without moving the
    unconditional field.
    """

    def __init__(self, store: ParamStore, n_classes: int, width: int, rng, name: str = "cond"):
        self.store, self.name = store, name
        self.n_classes, self.width = n_classes, width
        store.add(f"{name}.null", rng.normal(0.0, 1.0 / math.sqrt(width), size=width))
        store.add(f"{name}.classes", np.zeros((n_classes, width)), trainable=False)

    def check(self, c) -> np.ndarray:
        c = np.asarray(c, dtype=np.int64)
        if np.any((c < NULL) | (c >= self.n_classes)):
            raise IndexError(f"class index out of range for {self.n_classes} classes")
        return c

    def rows(self, c, batch: int) -> Tensor:
        """Condition rows [B, 2, d_e]: (class-or-null, null) per sample."""
        c = self.check(c)
        c = np.broadcast_to(c, (batch,))
        table = ad.concat([self.store.tensor(f"{self.name}.classes"),
                           ad.reshape(self.store.tensor(f"{self.name}.null"), (1, self.width))], axis=0)
        idx = np.where(c == NULL, self.n_classes, c)
        first = ad.take_rows(table, idx)
        null = ad.take_rows(table, np.full(batch, self.n_classes))
        return ad.reshape(ad.concat([first, null], axis=-1), (batch, 2, self.width))

    def lookup(self, c) -> np.ndarray:
        c = self.check(c)
        if int(c) == NULL:
            return self.store[f"{self.name}.null"].copy()
        return self.store[f"{self.name}.classes"][int(c)].copy()

    def reset_to_null(self) -> None:
        """Copy the null row into every class row."""
        self.store.assign(f"{self.name}.classes",
                          np.tile(self.store[f"{self.name}.null"], (self.n_classes, 1)))

    def reset_random(self, seed: int, scale: float = 1.0) -> None:
        """Null row plus independent gaussian offsets with the null row's rms norm times ``scale``."""
        null = self.store[f"{self.name}.null"].astype(np.float64)
        rms = float(np.sqrt(np.mean(null**2))) or 1.0
        noise = np.random.default_rng(seed).normal(0.0, rms * scale, size=(self.n_classes, self.width))
        self.store.assign(f"{self.name}.classes", null[None, :] + noise)


def time_embedding(t, width: int, batch: int) -> np.ndarray:
    """Sinusoidal features of ``t`` in [0, 1] at frequencies 1..64, one row per sample."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
    half = width // 2
    freqs = 64.0 ** (np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass(frozen=True)
class VelocityConfig:
    data_shape: tuple[int, ...]
    n_classes: int
    width: int = 128
    blocks: int = 3
    d_embed: int = 32
    d_time: int = 32
    lora_rank: int = 4
    lora_alpha: float = 4.0
    activation: str = "silu"
    seed: int = 0


class VelocityModel:
    """Conditional velocity field v(x, t, c) on flattened inputs.

    Layout: input projection of [x, time features], ``blocks`` residual blocks
    (cross-attention over the condition rows, time injection, dense layer,
    smooth activation) and an output projection back to the input shape.
    """

    def __init__(self, cfg: VelocityConfig, store: ParamStore | None = None):
        if cfg.activation not in ad.SMOOTH_ACTIVATIONS:
            raise ValueError("velocity networks must use a smooth activation")
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        rng = np.random.default_rng(cfg.seed)
        d = int(np.prod(cfg.data_shape))
        self.dim = d
        w, r, a = cfg.width, cfg.lora_rank, cfg.lora_alpha
        s = self.store
        self.cond = ClassEmbeddingTable(s, cfg.n_classes, cfg.d_embed, rng)
        self.inp = Dense(s, "inp", d + cfg.d_time, w, rng, rank=r, alpha=a)
        self.blocks = []
        for i in range(cfg.blocks):
            self.blocks.append({
                "q": Dense(s, f"blk{i}.q", w, w, rng, bias=False, rank=r, alpha=a),
                "k": Dense(s, f"blk{i}.k", cfg.d_embed, w, rng, bias=False, rank=r, alpha=a),
                "v": Dense(s, f"blk{i}.v", cfg.d_embed, w, rng, bias=False, rank=r, alpha=a),
                "time": Dense(s, f"blk{i}.time", cfg.d_time, w, rng, rank=r, alpha=a),
                "dense": Dense(s, f"blk{i}.dense", w, w, rng, rank=r, alpha=a),
            })
        # the adapter rank is capped per layer so narrow outputs (2-D data) stay valid
        self.out = Dense(s, "out", w, d, rng, rank=min(r, w, d), alpha=a, init_scale=0.1)
        self.act = ad.ACTIVATIONS[cfg.activation]

    # parameter groups
    def adapter_names(self) -> list[str]:
        return [n for n in self.store if ".lora_" in n]

    def class_embedding_names(self) -> list[str]:
        return [f"{self.cond.name}.classes"]

    def base_names(self) -> list[str]:
        extra = set(self.adapter_names()) | set(self.class_embedding_names())
        return [n for n in self.store if n not in extra]

    def dense_layers(self) -> list[Dense]:
        layers = [self.inp, self.out]
        for blk in self.blocks:
            layers.extend(blk.values())
        return layers

    def reset_adapters(self, class_init: str = "null", seed: int = 0, scale: float = 1.0) -> None:
        """Zero every B factor and reset the class rows (``null`` copies or ``random`` offsets)."""
        for layer in self.dense_layers():
            if layer.rank:
                self.store.assign(f"{layer.name}.lora_B", np.zeros((layer.d_out, layer.rank)))
        if class_init == "null":
            self.cond.reset_to_null()
        elif class_init == "random":
            self.cond.reset_random(seed, scale)
        else:
            raise ValueError(f"unknown class row init {class_init!r}")

    def __call__(self, x, t, c=NULL, use_lora: bool = False) -> Tensor:
        x = as_tensor(x)
        shape = x.shape
        batch = shape[0] if x.ndim > len(self.cfg.data_shape) else None
        n = batch or 1
        if x.size != n * self.dim:
            raise ValueError(f"input shape {shape} does not match data shape {self.cfg.data_shape}")
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any((t_arr < 0) | (t_arr > 1)):
            raise ValueError("t must lie in [0, 1]")
        xf = ad.reshape(x, (n, self.dim))
        temb = Tensor(time_embedding(t_arr, self.cfg.d_time, n))
        rows = self.cond.rows(c, n)
        h = self.act(self.inp(ad.concat([xf, temb], axis=1), use_lora))
        for blk in self.blocks:
            q = blk["q"](h, use_lora)
            k = blk["k"](rows, use_lora)
            v = blk["v"](rows, use_lora)
            a = attention(q, k, v)
            u = blk["dense"](h + a + blk["time"](temb, use_lora), use_lora)
            h = h + self.act(u)
        return ad.reshape(self.out(h, use_lora), shape)

    def velocity(self, x: np.ndarray, t, c=NULL, use_lora: bool = False) -> np.ndarray:
        """Tape-free evaluation returning a plain array."""
        return self(Tensor(x, check=False), t, c, use_lora).data


@dataclass(frozen=True)
class ClassifierConfig:
    arch: str  # "mlp" or "small-conv"
    input_shape: tuple[int, ...]
    n_classes: int
    hidden: int = 128
    channels: tuple[int, int, int] = (16, 32, 32)
    activation: str = "relu"
    seed: int = 0


class Classifier:
    """Source/victim classifier producing logits of length ``n_classes``."""

    def __init__(self, cfg: ClassifierConfig, store: ParamStore | None = None):
        if cfg.arch not in ("mlp", "small-conv"):
            raise ValueError(f"unknown classifier architecture {cfg.arch!r}")
        self.cfg = cfg
        self.store = store if store is not None else ParamStore()
        self.act = ad.ACTIVATIONS[cfg.activation]
        rng = np.random.default_rng(cfg.seed)
        s = self.store
        if cfg.arch == "mlp":
            d = int(np.prod(cfg.input_shape))
            self.layers = [
                Dense(s, "fc0", d, cfg.hidden, rng),
                Dense(s, "fc1", cfg.hidden, cfg.hidden, rng),
                Dense(s, "fc2", cfg.hidden, cfg.n_classes, rng),
            ]
        else:
            if len(cfg.input_shape) != 2:
                raise ValueError("small-conv expects 2-D single-channel images")
            h, w = cfg.input_shape
            cin = 1
            self.convs = []
            for i, (cout, stride) in enumerate(zip(cfg.channels, (1, 2, 2))):
                std = math.sqrt(2.0 / (cin * 9))
                s.add(f"conv{i}.W", rng.normal(0.0, std, size=(cout, cin, 3, 3)))
                s.add(f"conv{i}.b", np.zeros(cout))
                self.convs.append((f"conv{i}", stride))
                cin = cout
                h, w = (h - 1) // stride + 1, (w - 1) // stride + 1
            self.head = Dense(s, "head", cin * h * w, cfg.n_classes, rng)

    def is_smooth(self) -> bool:
        return self.cfg.activation in ad.SMOOTH_ACTIVATIONS

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        in_shape = self.cfg.input_shape
        single = x.shape == tuple(in_shape)
        if not single and x.shape[1:] != tuple(in_shape):
            raise ValueError(f"classifier expects inputs of shape {in_shape}, got {x.shape}")
        n = 1 if single else x.shape[0]
        if self.cfg.arch == "mlp":
            h = ad.reshape(x, (n, -1))
            for layer in self.layers[:-1]:
                h = self.act(layer(h))
            logits = self.layers[-1](h)
        else:
            h = ad.reshape(x, (n, 1) + tuple(in_shape))
            for name, stride in self.convs:
                w = self.store.tensor(f"{name}.W")
                b = self.store.tensor(f"{name}.b")
                h = ad.conv2d(h, w, stride=stride, pad=1) + ad.reshape(b, (1, -1, 1, 1))
                h = self.act(h)
            logits = self.head(ad.reshape(h, (n, -1)))
        return ad.reshape(logits, (self.cfg.n_classes,)) if single else logits

    def logits(self, x: np.ndarray, batch: int = 512) -> np.ndarray:
        x = np.asarray(x)
        if x.shape == tuple(self.cfg.input_shape):
            return self(x).data
        return np.concatenate([self(x[i:i + batch]).data for i in range(0, len(x), batch)], axis=0)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=-1)

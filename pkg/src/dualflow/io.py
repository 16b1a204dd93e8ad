"""Checkpoints, metric CSVs, PGM images and key = value config files."""
from __future__ import annotations

import csv
import io as _io
import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore

MAGIC = b"DFLW"
VERSION = 1
DTYPE_F32 = 0
FLAG_TRAINABLE = 1


class CheckpointError(ValueError):
    """Malformed, truncated or incompatible checkpoint file."""


def encode_checkpoint(store: ParamStore, meta: dict | None = None) -> bytes:
    """Canonical bytes: header, sorted-key JSON metadata, one record per tensor."""
    meta_raw = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(meta_raw)), meta_raw, struct.pack("<I", len(store))]
    for name, value in store.items():
        raw = name.encode("utf-8")
        flags = FLAG_TRAINABLE if store.is_trainable(name) else 0
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BBB", DTYPE_F32, flags, value.ndim))
        out.append(struct.pack(f"<{value.ndim}I", *value.shape))
        out.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return b"".join(out)


def save_checkpoint(store: ParamStore, meta: dict | None, path) -> None:
    Path(path).write_bytes(encode_checkpoint(store, meta))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint truncated")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(raw: bytes) -> tuple[ParamStore, dict]:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt metadata block") from exc
    (count,) = r.unpack("<I")
    store = ParamStore()
    for _ in range(count):
        (n_len,) = r.unpack("<H")
        name = r.take(n_len).decode("utf-8")
        dtype, flags, ndim = r.unpack("<BBB")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"unsupported dtype code {dtype} for {name!r}")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape)
        try:
            store.add(name, data, trainable=bool(flags & FLAG_TRAINABLE))
        except KeyError as exc:
            raise CheckpointError(f"duplicate record {name!r}") from exc
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes after the last record")
    return store, meta


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    return decode_checkpoint(Path(path).read_bytes())


def restore_into(target: ParamStore, loaded: ParamStore) -> None:
    """Copy values and flags from a loaded store into a model's store of the same layout."""
    if set(target) != set(loaded):
        raise CheckpointError("checkpoint records do not match the model's parameters")
    for name in target:
        if target[name].shape != loaded[name].shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
    target.load_state(loaded.snapshot(), {n: loaded.is_trainable(n) for n in loaded})


def format_value(v) -> str:
    """Locale-independent text for CSV cells."""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".9g")
    return str(v)


def metrics_csv(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        if len(row) != len(header):
            raise ValueError("row width does not match the header")
        w.writerow([format_value(v) for v in row])
    return buf.getvalue()


def write_metrics_csv(path, header, rows) -> None:
    Path(path).write_text(metrics_csv(header, rows), encoding="utf-8", newline="")


def read_metrics_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def to_bytes(img: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit, rounding halves away from zero."""
    v = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5 greymap, maxval 255, row-major."""
    data = to_bytes(img)
    if data.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise ValueError("not an 8-bit binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    body = parts[4]
    if len(body) != w * h:
        raise ValueError("PGM pixel data has the wrong length")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


class ConfigError(ValueError):
    pass


def parse_config(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))

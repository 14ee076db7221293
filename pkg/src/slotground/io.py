"""Binary formats: SVTF visual-token feature files and parameter checkpoints."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SVTF_MAGIC = b"SVTF"
SVTF_VERSION = 1
CKPT_MAGIC = b"SGCK"
CKPT_VERSION = 1


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- SVTF


def write_svtf(path, features) -> None:
    """(T, N, D) features as little-endian f32, frame-major then token-major."""
    f = np.asarray(features)
    if f.ndim != 3:
        raise FormatError(f"SVTF needs a (T, N, D) array, got shape {f.shape}")
    if not np.isfinite(f).all():
        raise FormatError("SVTF payload must be finite")
    T, N, D = f.shape
    with open(path, "wb") as fh:
        fh.write(SVTF_MAGIC)
        fh.write(struct.pack("<IIII", SVTF_VERSION, T, N, D))
        fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())


def read_svtf(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != SVTF_MAGIC:
        raise FormatError(f"{path}: not an SVTF file")
    version, T, N, D = struct.unpack("<IIII", data[4:20])
    if version != SVTF_VERSION:
        raise FormatError(f"{path}: unsupported SVTF version {version}")
    payload = data[20:]
    if len(payload) != 4 * T * N * D:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {4 * T * N * D}")
    out = np.frombuffer(payload, dtype="<f4").reshape(T, N, D).astype(np.float32)
    if not np.isfinite(out).all():
        raise FormatError(f"{path}: non-finite values in payload")
    return out


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: dict
    arrays: dict[str, np.ndarray]
    optimizer: dict | None = None  # {"step", "m": {...}, "v": {...}}
    meta: dict = field(default_factory=dict)


def _write_str(fh, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<I", len(b)))
    fh.write(b)


def _read_str(buf: memoryview, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    return bytes(buf[off : off + n]).decode("utf-8"), off + n


def _write_arrays(fh, arrays: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype=np.float64)
        _write_str(fh, name)
        fh.write(struct.pack("<I", a.ndim))
        fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_arrays(buf: memoryview, off: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    out = {}
    for _ in range(count):
        name, off = _read_str(buf, off)
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        if off + 8 * n > len(buf):
            raise FormatError(f"truncated array {name!r}")
        out[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    return out, off


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        _write_str(fh, json.dumps({"config": ckpt.config, "meta": ckpt.meta}, sort_keys=True))
        _write_arrays(fh, ckpt.arrays)
        opt = ckpt.optimizer
        fh.write(struct.pack("<B", opt is not None))
        if opt is not None:
            fh.write(struct.pack("<Q", int(opt["step"])))
            _write_arrays(fh, opt["m"])
            _write_arrays(fh, opt["v"])
    tmp.replace(path)  # keep the previous file intact until the new one is complete


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    buf = memoryview(data)
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header, off = _read_str(buf, 8)
        head = json.loads(header)
        arrays, off = _read_arrays(buf, off)
        (has_opt,) = struct.unpack_from("<B", buf, off)
        off += 1
        opt = None
        if has_opt:
            (step,) = struct.unpack_from("<Q", buf, off)
            off += 8
            m, off = _read_arrays(buf, off)
            v, off = _read_arrays(buf, off)
            opt = {"step": step, "m": m, "v": v}
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: corrupt checkpoint ({e})") from e
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes")
    return Checkpoint(head["config"], arrays, opt, head.get("meta", {}))

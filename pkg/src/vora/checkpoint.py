"""Binary checkpoint format, little-endian throughout:

    magic   4 bytes  "VORA"
    version u32      (currently 1)
    config  u32 count, then per field: u32 name length, name utf-8, f64 value
    meta    u32 count, then per entry: u32 key length, key utf-8,
                                       u32 value length, value utf-8
    tensors u32 count, then per tensor: u32 name length, name utf-8,
                                        u32 ndim, u32 dims...,
                                        float32 payload, row-major

Round-trips are bit-exact: f32 payloads are written verbatim and config
ints/floats survive the f64 encoding unchanged.
"""

import struct
from dataclasses import fields

import numpy as np

from .model import ModelConfig

MAGIC = b"VORA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _write_str(f, s):
    raw = s.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def _read_str(f):
    (n,) = struct.unpack("<I", f.read(4))
    return f.read(n).decode("utf-8")


def save(path, cfg, tensors, meta=None):
    """Write config + named f32 arrays (+ string metadata) to path."""
    meta = dict(meta or {})
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        cfg_fields = [(fld.name, float(getattr(cfg, fld.name))) for fld in fields(cfg)]
        f.write(struct.pack("<I", len(cfg_fields)))
        for name, value in cfg_fields:
            _write_str(f, name)
            f.write(struct.pack("<d", value))
        f.write(struct.pack("<I", len(meta)))
        for key in sorted(meta):
            _write_str(f, key)
            _write_str(f, str(meta[key]))
        f.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = tensors[name]
            arr = arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr
            arr = np.ascontiguousarray(arr, dtype=np.float32)
            _write_str(f, name)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load(path):
    """Read (ModelConfig, {name: float32 array}, {meta key: value})."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        (n_cfg,) = struct.unpack("<I", f.read(4))
        raw_cfg = {}
        for _ in range(n_cfg):
            name = _read_str(f)
            (value,) = struct.unpack("<d", f.read(8))
            raw_cfg[name] = value
        kwargs = {}
        for fld in fields(ModelConfig):
            if fld.name in raw_cfg:
                v = raw_cfg[fld.name]
                kwargs[fld.name] = float(v) if fld.type in (float, "float") else int(v)
        cfg = ModelConfig(**kwargs)
        (n_meta,) = struct.unpack("<I", f.read(4))
        meta = {}
        for _ in range(n_meta):
            key = _read_str(f)
            meta[key] = _read_str(f)
        (n_tensors,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(n_tensors):
            name = _read_str(f)
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(4 * count), dtype="<f4").reshape(shape)
            tensors[name] = np.array(data, dtype=np.float32)  # own, writable copy
        return cfg, tensors, meta

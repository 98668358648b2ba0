"""Binary checkpoint format.

Layout (all integers u32 little-endian)::

    b"ATVS" | version | config length | config (UTF-8 JSON)
    | record count | records...

    record := name length | name (UTF-8) | rank | dims[rank] | float32 LE data

Records are written in sorted name order so that saving the same state
twice yields identical bytes.
"""
from __future__ import annotations

import struct

import numpy as np

from .config import RunConfig
from .model import ATVNetParams, parameter_shapes
from .optim import AdamWState

MAGIC = b"ATVS"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_records(path, config_json: str, records: dict) -> None:
    cfg = config_json.encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(records))]
    for name in sorted(records):
        arr = np.asarray(records[name])
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(out))


class _Reader:
    def __init__(self, data: bytes, name: str):
        self.data, self.pos, self.name = data, 0, name

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.name}: truncated checkpoint")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_records(path) -> tuple[str, dict]:
    name = str(path)
    with open(path, "rb") as f:
        r = _Reader(f.read(), name)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{name}: bad magic, not an ATVS checkpoint")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{name}: unsupported checkpoint version {version}")
    try:
        config_json = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError as e:
        raise CheckpointError(f"{name}: config block is not UTF-8") from e
    records = {}
    for _ in range(r.u32()):
        key = r.take(r.u32()).decode("utf-8")
        if key in records:
            raise CheckpointError(f"{name}: duplicate record {key!r}")
        rank = r.u32()
        dims = tuple(r.u32() for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64))
        records[key] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(r.data):
        raise CheckpointError(f"{name}: trailing bytes after last record")
    return config_json, records


def checkpoint_save(path, params: ATVNetParams, config: RunConfig,
                    state: AdamWState | None = None, extra: dict | None = None) -> None:
    """Model weights, batch-norm statistics, optimiser moments and scalars."""
    rec = {f"param/{k}": v for k, v in params.weights.items()}
    rec.update({f"buffer/{k}": v for k, v in params.buffers.items()})
    if state is not None:
        rec.update({f"adam.m/{k}": v for k, v in state.m.items()})
        rec.update({f"adam.v/{k}": v for k, v in state.v.items()})
        rec["optim.t"] = np.array(state.t, np.float32)
    for k, v in (extra or {}).items():
        rec[f"extra/{k}"] = np.asarray(v, np.float32)
    write_records(path, config.to_json(), rec)


def checkpoint_load(path):
    """Returns (config, params, optimiser state or None, extra scalars)."""
    config_json, rec = read_records(path)
    try:
        config = RunConfig.from_json(config_json)
    except (ValueError, TypeError) as e:
        raise CheckpointError(f"{path}: bad config block ({e})") from e
    weights, buffers, m, v, extra = {}, {}, {}, {}, {}
    for k, arr in rec.items():
        kind, _, name = k.partition("/")
        target = {"param": weights, "buffer": buffers, "adam.m": m, "adam.v": v,
                  "extra": extra}.get(kind)
        if target is not None:
            target[name] = arr
    expected = parameter_shapes(config.model)
    if set(expected) != set(weights):
        missing = sorted(set(expected) - set(weights))
        raise CheckpointError(f"{path}: parameter set does not match config (missing {missing[:3]})")
    for k, shape in expected.items():
        if weights[k].shape != tuple(shape):
            raise CheckpointError(f"{path}: {k} has shape {weights[k].shape}, expected {shape}")
    state = None
    if "optim.t" in rec:
        state = AdamWState(m, v, int(rec["optim.t"]))
    extra = {k: float(a) for k, a in extra.items()}
    return config, ATVNetParams(config.model, weights, buffers), state, extra

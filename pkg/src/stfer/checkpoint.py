"""Binary checkpoint format.

Layout (little-endian)::

    b"STFR"  u32 version  u64 n  <n bytes UTF-8 config text>
    repeated: u16 name_len  name  u8 rank  u64 dims[rank]  f64 payload[prod(dims)]
    u64 total byte length of everything above (trailer)

Record names are ``param/<name>``, ``momentum/<name>``, ``rng/<purpose>``,
``meta/epoch`` and ``meta/loss_trace``; they are written in sorted order so
that save -> load -> save reproduces the file byte for byte.
"""
import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig

MAGIC = b"STFR"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    params: dict
    momentum: dict = field(default_factory=dict)
    epoch: int = 0
    rng_states: dict = field(default_factory=dict)   # purpose -> f64 words
    loss_trace: list = field(default_factory=list)

    def records(self):
        rec = {f"param/{k}": v for k, v in self.params.items()}
        rec.update({f"momentum/{k}": v for k, v in self.momentum.items()})
        rec.update({f"rng/{k}": np.asarray(v) for k, v in self.rng_states.items()})
        rec["meta/epoch"] = np.array(float(self.epoch))
        rec["meta/loss_trace"] = np.asarray(self.loss_trace, dtype=np.float64)
        return rec


def dumps(ckpt):
    buf = io.BytesIO()
    cfg = ckpt.config.to_text().encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(cfg)))
    buf.write(cfg)
    for name, arr in sorted(ckpt.records().items()):
        a = np.asarray(arr, dtype="<f8")   # keeps 0-d shape; tobytes is C order
        nb = name.encode("utf-8")
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(a.tobytes())
    body = buf.getvalue()
    return body + struct.pack("<Q", len(body))


def loads(data):
    data = bytes(data)
    if data[:4] != MAGIC:
        raise CheckpointFormatError(f"bad magic {data[:4]!r}; expected {MAGIC!r}")
    if len(data) < 24:
        raise CheckpointFormatError("truncated checkpoint")
    (total,) = struct.unpack("<Q", data[-8:])
    if total != len(data) - 8:
        raise CheckpointFormatError(f"length check failed: trailer says {total} bytes, found {len(data) - 8}")
    version, n = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos = 16
    end = len(data) - 8

    def take(size):
        nonlocal pos
        if pos + size > end:
            raise CheckpointFormatError("truncated checkpoint record")
        chunk = data[pos:pos + size]
        pos += size
        return chunk

    config = TrainConfig.from_text(take(n).decode("utf-8"), source="<checkpoint>")
    params, momentum, rng_states = {}, {}, {}
    epoch, trace = 0, []
    while pos < end:
        (nl,) = struct.unpack("<H", take(2))
        name = take(nl).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = arr
        elif kind == "momentum":
            momentum[key] = arr
        elif kind == "rng":
            rng_states[key] = arr
        elif name == "meta/epoch":
            epoch = int(arr.reshape(-1)[0])
        elif name == "meta/loss_trace":
            trace = arr.tolist()
        else:
            raise CheckpointFormatError(f"unknown record {name!r}")
    return Checkpoint(config, params, momentum, epoch, rng_states, trace)


def save_checkpoint(ckpt, path):
    data = dumps(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return loads(fh.read())

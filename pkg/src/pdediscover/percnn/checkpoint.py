"""Model checkpoints: ``PCK1`` magic, u64 header length, JSON header, raw f64 blobs.

The header records both configs, the seed, the iteration count and a
manifest of ``(name, shape, offset, nbytes)`` for every parameter and
trainability mask; offsets count from the start of the blob section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import InvalidArgumentError
from .model import IsgConfig, PiBlockConfig, PiBlockModel

MAGIC = b"PCK1"


def encode_checkpoint(model: PiBlockModel, iteration: int = 0, extra: dict | None = None) -> bytes:
    blobs = []
    manifest = []
    offset = 0
    for kind, store in (("param", model.params), ("mask", model.masks)):
        for name in sorted(store):
            arr = np.ascontiguousarray(store[name], dtype="<f8")
            data = arr.tobytes()
            manifest.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset,
                             "nbytes": len(data)})
            blobs.append(data)
            offset += len(data)
    header = {"config": model.config.to_dict(), "isg": model.isg.to_dict(), "seed": model.seed,
              "iteration": int(iteration), "manifest": manifest, "extra": extra or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(blobs)


def decode_checkpoint(buf: bytes):
    """Returns ``(model, header)``."""
    if buf[:4] != MAGIC:
        raise InvalidArgumentError("not a PCK1 checkpoint")
    (hlen,) = struct.unpack("<Q", buf[4:12])
    header = json.loads(buf[12:12 + hlen])
    base = 12 + hlen
    cfg = PiBlockConfig.from_dict(header["config"])
    isg = IsgConfig.from_dict(header["isg"])
    model = PiBlockModel(cfg, isg, seed=header["seed"])
    params, masks = {}, {}
    for item in header["manifest"]:
        start = base + item["offset"]
        raw = buf[start:start + item["nbytes"]]
        if len(raw) != item["nbytes"]:
            raise InvalidArgumentError(f"checkpoint truncated in {item['name']!r}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(item["shape"])
        (params if item["kind"] == "param" else masks)[item["name"]] = arr
    if set(params) != set(model.params):
        raise InvalidArgumentError("checkpoint parameters do not match its config")
    model.params = params
    model.masks = masks
    return model, header


def save_checkpoint(path, model: PiBlockModel, iteration: int = 0, extra: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, iteration, extra))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())

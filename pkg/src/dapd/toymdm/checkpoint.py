"""Binary checkpoint format.

Layout: ``b"DAPD"`` | uint32 version | uint32 header length | UTF-8 JSON
header | little-endian float32 parameters in the header's section order.
"""
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, param_shapes

MAGIC = b"DAPD"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if [n for n, _ in expected] != list(self.params):
            raise CheckpointError("parameter sections do not match the config")
        for name, shape in expected:
            if tuple(self.params[name].shape) != tuple(shape):
                raise CheckpointError(f"section {name}: shape {self.params[name].shape} != {shape}")

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params.values()])


def save(ckpt, path):
    sections = [[name, list(arr.shape)] for name, arr in ckpt.params.items()]
    header = json.dumps(
        {
            "config": ckpt.config.to_dict(),
            "sections": sections,
            "train_meta": dict(ckpt.train_meta, format_version=FORMAT_VERSION),
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(ckpt.flat().astype("<f4").tobytes())


def load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    try:
        cfg = ModelConfig(**header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad model config ({exc})") from exc
    values = np.frombuffer(blob[12 + hlen :], dtype="<f4")
    params, offset = {}, 0
    for name, shape in header["sections"]:
        size = int(np.prod(shape))
        if offset + size > values.size:
            raise CheckpointError(f"{path}: truncated parameter data")
        params[name] = values[offset : offset + size].reshape(shape).astype(np.float32)
        offset += size
    if offset != values.size:
        raise CheckpointError(f"{path}: trailing parameter data")
    return Checkpoint(config=cfg, params=params, train_meta=header.get("train_meta", {}))

"""Binary checkpoint: magic, version, JSON manifest, then raw little-endian float64 blobs."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import TrainConfig
from ..model import MRHPModel

MAGIC = b"MRHPCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab_size: int
    feature_dim: int
    tensors: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def from_model(cls, model: MRHPModel, step: int = 0) -> "Checkpoint":
        return cls(model.cfg, model.vocab_size, model.feature_dim,
                   {name: t.data.copy() for name, t in model.named_parameters()}, step)

    def to_model(self) -> MRHPModel:
        model = MRHPModel(self.config, self.vocab_size, self.feature_dim)
        params = dict(model.named_parameters())
        if set(params) != set(self.tensors):
            missing = sorted(set(params) ^ set(self.tensors))
            raise CheckpointError(f"checkpoint parameters do not match model layout: {missing[:5]}")
        for name, t in params.items():
            arr = self.tensors[name]
            if arr.shape != t.shape:
                raise CheckpointError(f"{name}: shape {arr.shape} != model shape {t.shape}")
            t.data = arr.copy()
        return model

    def to_bytes(self) -> bytes:
        entries, offset, blobs = [], 0, []
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name], dtype="<f8")
            raw = arr.tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        manifest = {
            "config": self.config.to_dict(),
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
            "step": self.step,
            "tensors": entries,
        }
        body = json.dumps(manifest, sort_keys=True).encode("utf-8")
        return _HEADER.pack(MAGIC, VERSION, len(body)) + body + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if len(raw) < _HEADER.size:
            raise CheckpointError("truncated checkpoint header")
        magic, version, mlen = _HEADER.unpack_from(raw)
        if magic != MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        start = _HEADER.size + mlen
        try:
            manifest = json.loads(raw[_HEADER.size:start].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
        tensors = {}
        for e in manifest["tensors"]:
            lo = start + e["offset"]
            hi = lo + e["nbytes"]
            if hi > len(raw):
                raise CheckpointError(f"tensor {e['name']} runs past end of file")
            tensors[e["name"]] = np.frombuffer(raw[lo:hi], dtype="<f8").astype(np.float64).reshape(e["shape"])
        return cls(TrainConfig.from_dict(manifest["config"]), manifest["vocab_size"],
                   manifest["feature_dim"], tensors, manifest["step"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

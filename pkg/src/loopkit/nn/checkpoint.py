"""Deterministic checkpoint serialization.

Format: magic line, 8-byte little-endian header length, a sorted-key JSON
header describing config and array layout, then raw array bytes. The same
checkpoint always serializes to the same bytes (no timestamps), so reruns
with fixed seeds produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import InvalidInput
from . import models
from .models import Scorer

MAGIC = b"LOOPKIT-CKPT-1\n"


@dataclass
class ModelCheckpoint:
    kind: str  # cnn / snn
    state: dict[str, np.ndarray]
    train_config: dict
    feature_mean: np.ndarray
    feature_std: np.ndarray
    history: list[dict] = field(default_factory=list)
    distance_threshold: float | None = None

    def scorer(self) -> Scorer:
        in_shape = tuple(self.train_config.get("in_shape", models.INPUT_SHAPE))
        model = models.build_model(self.kind, seed=int(self.train_config.get("seed", 0)),
                                   in_shape=in_shape)
        model.load_state(self.state)
        return Scorer(model, self.kind, self.feature_mean, self.feature_std,
                      self.distance_threshold, in_shape=in_shape)


def save_checkpoint(path, ckpt: ModelCheckpoint) -> None:
    arrays = dict(ckpt.state)
    arrays["__feature_mean__"] = ckpt.feature_mean
    arrays["__feature_std__"] = ckpt.feature_std
    descriptors = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        descriptors.append({"name": name, "dtype": str(arr.dtype),
                            "shape": list(arr.shape), "offset": len(payload)})
        payload += arr.tobytes()
    header = json.dumps({
        "kind": ckpt.kind,
        "train_config": ckpt.train_config,
        "history": ckpt.history,
        "distance_threshold": ckpt.distance_threshold,
        "arrays": descriptors,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        fh.write(bytes(payload))


def load_checkpoint(path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise InvalidInput(f"{path} is not a loopkit checkpoint")
    off = len(MAGIC)
    header_len = int.from_bytes(data[off : off + 8], "little")
    off += 8
    header = json.loads(data[off : off + header_len])
    payload = data[off + header_len :]
    arrays = {}
    for desc in header["arrays"]:
        dtype = np.dtype(desc["dtype"])
        count = int(np.prod(desc["shape"])) if desc["shape"] else 1
        start = desc["offset"]
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=start)
        arrays[desc["name"]] = arr.reshape(desc["shape"]).copy()
    feature_mean = arrays.pop("__feature_mean__")
    feature_std = arrays.pop("__feature_std__")
    return ModelCheckpoint(kind=header["kind"], state=arrays,
                           train_config=header["train_config"],
                           feature_mean=feature_mean, feature_std=feature_std,
                           history=header["history"],
                           distance_threshold=header["distance_threshold"])

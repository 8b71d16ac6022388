"""Checkpoint file format.

Layout: the 8-byte magic ``GMAECKPT``, a little-endian uint32 format version,
a uint64 header length, a UTF-8 JSON header (sorted keys) and the raw
little-endian bytes of every array listed in the header, in order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractError
from ..preprocess import StandardizationStats
from ..stafn import ModelConfig
from .config import TrainConfig, parse_config_text

MAGIC = b"GMAECKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    config: TrainConfig
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    stats: StandardizationStats
    target_index: list[int]
    epoch: int
    rng_state: dict
    best_val: float = float("inf")
    best_epoch: int = 0
    bad_epochs: int = 0
    history: list[dict] = field(default_factory=list)

    def to_bytes(self) -> bytes:
        arrays: list[tuple[str, np.ndarray]] = [("stats/mean", self.stats.mean), ("stats/std", self.stats.std)]
        for group, table in (("params", self.params), ("best", self.best_params),
                             ("adam_m", self.adam_m), ("adam_v", self.adam_v)):
            for name in sorted(table):
                arrays.append((f"{group}/{name}", table[name]))
        index = []
        blobs = []
        offset = 0
        for name, arr in arrays:
            arr = np.ascontiguousarray(arr)
            dt = arr.dtype.newbyteorder("<")
            raw = arr.astype(dt, copy=False).tobytes()
            index.append({"name": name, "dtype": dt.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
        header = {
            "config": self.config.to_text(),
            "model_config": asdict(self.model_config),
            "adam_step": self.adam_step,
            "target_index": list(self.target_index),
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "best_val": self.best_val,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "history": self.history,
            "arrays": index,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, blob: bytes) -> Checkpoint:
        if len(blob) < _PREFIX.size:
            raise ContractError("checkpoint is truncated")
        magic, version, head_len = _PREFIX.unpack_from(blob)
        if magic != MAGIC:
            raise ContractError(f"not a checkpoint (magic {magic!r})")
        if version != VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        start = _PREFIX.size
        header = json.loads(blob[start : start + head_len].decode())
        body = start + head_len
        groups: dict[str, dict[str, np.ndarray]] = {"stats": {}, "params": {}, "best": {}, "adam_m": {}, "adam_v": {}}
        for entry in header["arrays"]:
            lo = body + entry["offset"]
            arr = np.frombuffer(blob[lo : lo + entry["nbytes"]], dtype=np.dtype(entry["dtype"]))
            group, name = entry["name"].split("/", 1)
            groups[group][name] = arr.reshape(entry["shape"]).copy()
        return cls(
            config=parse_config_text(header["config"]),
            model_config=ModelConfig(**header["model_config"]),
            params=groups["params"],
            best_params=groups["best"],
            adam_m=groups["adam_m"],
            adam_v=groups["adam_v"],
            adam_step=header["adam_step"],
            stats=StandardizationStats(groups["stats"]["mean"], groups["stats"]["std"]),
            target_index=header["target_index"],
            epoch=header["epoch"],
            rng_state=header["rng_state"],
            best_val=header["best_val"],
            best_epoch=header["best_epoch"],
            bad_epochs=header["bad_epochs"],
            history=header["history"],
        )

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> Checkpoint:
        return cls.from_bytes(Path(path).read_bytes())


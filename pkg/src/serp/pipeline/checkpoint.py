"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"SERPCKPT"
    u32       format version
    u32       header length H
    H bytes   UTF-8 JSON header (sorted keys, no whitespace)
    payload   concatenated little-endian float32 arrays

The header lists each array's name, shape and byte offset into the payload.
Nothing time-dependent is stored, so equal inputs give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SERPCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class FingerprintError(CheckpointError):
    """A checkpoint does not match the configuration it is being used with."""


def fingerprint(obj):
    """sha256 of the canonical JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    config: dict
    arrays: dict
    epoch: int = 0
    step: int = 0
    rng: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def fingerprint(self):
        return fingerprint(self.config)

    @property
    def model_fingerprint(self):
        return fingerprint({"model": self.config.get("model"), "model_config": self.config.get("model_config")})

    def params(self, prefixes=None):
        out = {k: v for k, v in self.arrays.items() if not k.startswith("optim.")}
        if prefixes:
            out = {k: v for k, v in out.items() if k.startswith(tuple(prefixes))}
        return out

    def to_bytes(self):
        entries = []
        chunks = []
        offset = 0
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f4")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
            chunks.append(arr.tobytes())
            offset += arr.nbytes
        header = {
            "kind": self.kind,
            "config": self.config,
            "fingerprint": self.fingerprint,
            "model_fingerprint": self.model_fingerprint,
            "epoch": self.epoch,
            "step": self.step,
            "rng": self.rng,
            "extra": self.extra,
            "arrays": entries,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob):
        if blob[:8] != MAGIC:
            raise CheckpointError("not a SeRP checkpoint (bad magic)")
        version, hlen = struct.unpack("<II", blob[8:16])
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        header = json.loads(blob[16 : 16 + hlen].decode())
        payload = memoryview(blob)[16 + hlen :]
        arrays = {}
        for e in header["arrays"]:
            raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
            arrays[e["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(e["shape"])
        ckpt = cls(
            kind=header["kind"],
            config=header["config"],
            arrays=arrays,
            epoch=header["epoch"],
            step=header["step"],
            rng=header.get("rng", {}),
            extra=header.get("extra", {}),
        )
        if ckpt.fingerprint != header["fingerprint"]:
            raise FingerprintError("stored fingerprint does not match stored config")
        return ckpt

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())

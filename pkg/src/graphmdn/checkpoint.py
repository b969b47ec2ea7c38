"""Versioned checkpoint container.

Layout: a magic line, one JSON header line (sorted keys), then the raw
little-endian float64 bytes of every array listed in the header. Identical
state always produces identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IncompatibleError, ParseError

MAGIC = b"GRAPHMDN-CKPT\n"
VERSION = 1


def rng_state_to_json(state: dict) -> dict:
    def conv(v):
        if isinstance(v, np.ndarray):
            return {"__array__": [int(x) for x in v.ravel()], "dtype": str(v.dtype), "shape": list(v.shape)}
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        if isinstance(v, np.integer):
            return int(v)
        return v

    return conv(state)


def rng_state_from_json(state: dict) -> dict:
    def conv(v):
        if isinstance(v, dict) and "__array__" in v:
            return np.array(v["__array__"], dtype=v["dtype"]).reshape(v["shape"])
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(state)


@dataclass
class Checkpoint:
    config: dict
    skeleton_hash: str
    skeleton_text: str
    arrays: dict = field(default_factory=dict)  # name -> float64 ndarray
    meta: dict = field(default_factory=dict)  # epoch, step, rng states, ...

    def to_bytes(self) -> bytes:
        directory = []
        blobs = []
        offset = 0
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            directory.append({"name": name, "offset": offset, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = {
            "version": VERSION,
            "config": self.config,
            "skeleton_hash": self.skeleton_hash,
            "skeleton_text": self.skeleton_text,
            "arrays": directory,
            "meta": self.meta,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + head + b"\n" + b"".join(blobs)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        if not raw.startswith(MAGIC):
            raise ParseError("not a GraphMDN checkpoint (bad magic)")
        end = raw.index(b"\n", len(MAGIC))
        try:
            header = json.loads(raw[len(MAGIC) : end])
        except ValueError as exc:
            raise ParseError(f"corrupt checkpoint header: {exc}") from None
        if header.get("version") != VERSION:
            raise IncompatibleError(f"unsupported checkpoint version {header.get('version')}")
        body = raw[end + 1 :]
        arrays = {}
        for entry in header["arrays"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            start = entry["offset"]
            if start + 8 * count > len(body):
                raise ParseError(f"checkpoint truncated in array {entry['name']}")
            arrays[entry["name"]] = (
                np.frombuffer(body, dtype="<f8", count=count, offset=start).astype(np.float64).reshape(entry["shape"])
            )
        return cls(header["config"], header["skeleton_hash"], header["skeleton_text"], arrays, header["meta"])

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    def validate_skeleton(self, skeleton_hash: str):
        if skeleton_hash != self.skeleton_hash:
            raise IncompatibleError(
                f"checkpoint skeleton {self.skeleton_hash} does not match data skeleton {skeleton_hash}"
            )


def load_checkpoint(path, skeleton_hash: str | None = None) -> Checkpoint:
    ckpt = Checkpoint.from_bytes(Path(path).read_bytes())
    if skeleton_hash is not None:
        ckpt.validate_skeleton(skeleton_hash)
    return ckpt

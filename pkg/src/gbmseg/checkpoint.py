"""Versioned checkpoint container.

Layout::

    8 bytes   magic  b"GBMCKPT\\n"
    4 bytes   format version (little-endian uint32)
    8 bytes   header length (little-endian uint64)
    header    UTF-8 JSON: spec, trained_epochs, tensor table, payload sha256
    payload   raw little-endian tensor bytes, in table order
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointCorrupt, CheckpointSpecMismatch, CheckpointVersionError
from .models import ModelSpec, Net, build_model

MAGIC = b"GBMCKPT\n"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def to_bytes(model: Net) -> bytes:
    tensors = []
    chunks = []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        tensors.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({
        "spec": json.loads(model.spec.to_json()),
        "trained_epochs": int(getattr(model, "trained_epochs", 0)),
        "tensors": tensors,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }, sort_keys=True).encode()
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + payload


def save_checkpoint(model: Net, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(model))
    tmp.replace(path)
    return path


def _parse(data: bytes, source: str):
    if len(data) < _PREFIX.size:
        raise CheckpointCorrupt(f"{source}: truncated checkpoint header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointCorrupt(f"{source}: not a gbmseg checkpoint")
    if version != VERSION:
        raise CheckpointVersionError(f"{source}: checkpoint format version {version}, expected {VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointCorrupt(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(data[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorrupt(f"{source}: unreadable header ({exc})") from exc
    payload = data[start + hlen:]
    expected = sum(t["nbytes"] for t in header["tensors"])
    if len(payload) != expected:
        raise CheckpointCorrupt(f"{source}: payload is {len(payload)} bytes, expected {expected} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointCorrupt(f"{source}: payload checksum mismatch")
    return header, payload


def load_checkpoint(path, expected_spec: ModelSpec | None = None, arch: str | None = None) -> Net:
    """Rebuild the model from its stored spec after validating compatibility."""
    path = Path(path)
    header, payload = _parse(path.read_bytes(), str(path))
    try:
        spec = ModelSpec.from_dict(header["spec"])
    except (TypeError, ValueError) as exc:
        raise CheckpointSpecMismatch(f"{path}: stored spec is invalid ({exc})") from exc
    if arch is not None and spec.arch != arch:
        raise CheckpointSpecMismatch(f"{path}: checkpoint holds a {spec.arch} model, {arch} requested")
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointSpecMismatch(f"{path}: stored spec {spec} differs from expected {expected_spec}")

    model = build_model(spec)
    own = model.state_dict()
    names = [t["name"] for t in header["tensors"]]
    if set(names) != set(own):
        raise CheckpointSpecMismatch(f"{path}: tensor names do not match the {spec.arch} architecture")
    state = {}
    for t in header["tensors"]:
        arr = np.frombuffer(payload, dtype=np.dtype(t["dtype"]), count=int(np.prod(t["shape"], dtype=np.int64)),
                            offset=t["offset"]).reshape(t["shape"])
        if tuple(arr.shape) != tuple(own[t["name"]].shape):
            raise CheckpointSpecMismatch(f"{path}: tensor {t['name']} has shape {arr.shape}, "
                                         f"architecture expects {tuple(own[t['name']].shape)}")
        state[t["name"]] = torch.from_numpy(arr.copy())
    dtype = next(iter(state.values())).dtype
    model = model.to(dtype)
    model.load_state_dict(state)
    model.trained_epochs = int(header.get("trained_epochs", 0))
    return model.eval()


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Binary state files: magic, uint64 header length, JSON manifest, float64 payload."""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .errors import CheckpointError, ParseError

MAGIC = b"ATCKPT01"


def write_state_file(path, module, meta: dict) -> str:
    """Write ``module.state_dict()`` in discovery order; returns the sha1 of the file."""
    state = module.state_dict()
    params = {name for name, _ in module.named_parameters()}
    entries = [{"name": k, "shape": list(v.shape), "kind": "param" if k in params else "buffer"}
               for k, v in state.items()]
    header = json.dumps({"dtype": "float64", "entries": entries, **meta}, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in state.values())
    blob = MAGIC + struct.pack("<Q", len(header)) + header + payload
    Path(path).write_bytes(blob)
    return hashlib.sha1(blob).hexdigest()


def read_state_file(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Parse into (header, state) without touching any model."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 or not blob.startswith(MAGIC):
        raise ParseError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + hlen:
        raise ParseError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen])
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed header ({exc})") from None
    payload = blob[16 + hlen:]
    need = sum(int(np.prod(e["shape"], dtype=np.int64)) for e in header["entries"]) * 8
    if len(payload) != need:
        raise ParseError(f"{path}: payload has {len(payload)} bytes, manifest needs {need} (truncated?)")
    state, offset = {}, 0
    for e in header["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        state[e["name"]] = np.frombuffer(payload, "<f8", n, offset).reshape(e["shape"]).copy()
        offset += 8 * n
    return header, state


def load_state_into(module, state: Dict[str, np.ndarray], source: str = "checkpoint") -> None:
    """Validate names and shapes against ``module`` before copying anything in."""
    own = module.state_dict()
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    shape = sorted(k for k in own if k in state and own[k].shape != state[k].shape)
    if missing or extra or shape:
        parts = [f"{label}: {names}" for label, names in
                 (("unexpected entries", extra), ("missing entries", missing), ("shape mismatch", shape)) if names]
        raise CheckpointError(f"{source}: " + "; ".join(parts))
    module.load_state_dict(state)


def state_hash(module) -> str:
    h = hashlib.sha1()
    for name, value in module.state_dict().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return h.hexdigest()

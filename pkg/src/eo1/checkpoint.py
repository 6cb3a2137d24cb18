"""Checkpoint blobs: JSON header plus named little-endian float32 arrays.

File layout: an 8-byte little-endian header length, the UTF-8 JSON header,
then the raw parameter payload. The header echoes the run config, step
count and rng state, lists every array (name, shape, byte offset) and
records the SHA-256 of the payload; the loader re-hashes and refuses
corrupted files.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import IntegrityError, ValidationError

FORMAT_VERSION = 1


def save_checkpoint(
    path: str,
    params: dict[str, np.ndarray],
    config: dict,
    step: int,
    rng_state: dict | None = None,
) -> None:
    """Write parameter arrays (cast to float32) with a self-describing header."""
    names = list(params)
    payload = bytearray()
    manifest = []
    for name in names:
        # np.array rather than ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.array(params[name], dtype="<f4", order="C")
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": len(payload)}
        )
        payload += arr.tobytes()
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "step": int(step),
        "rng_state": rng_state or {},
        "params": manifest,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
        "payload_nbytes": len(payload),
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        f.write(bytes(payload))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back; returns (params, header)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 8:
        raise ValidationError(f"{path} is too short to be a checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    if 8 + hlen > len(raw):
        raise ValidationError(f"{path} header length {hlen} exceeds file size")
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {header.get('format_version')}")
    payload = raw[8 + hlen :]
    if len(payload) != header["payload_nbytes"]:
        raise IntegrityError(
            f"payload is {len(payload)} bytes, header says {header['payload_nbytes']}"
        )
    digest = hashlib.sha256(payload).hexdigest()
    if digest != header["payload_sha256"]:
        raise IntegrityError(f"payload checksum mismatch in {path}")
    params = {}
    for rec in header["params"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = rec["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape)
        params[rec["name"]] = arr.copy()
    return params, header


def save_module(path: str, module, config: dict, step: int, rng_state: dict | None = None) -> None:
    """Checkpoint a torch module's state dict (float32 cast)."""
    params = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    save_checkpoint(path, params, config, step, rng_state)


def load_module(path: str, module) -> dict:
    """Restore a torch module from a checkpoint; returns the header."""
    import torch

    params, header = load_checkpoint(path)
    state = {k: torch.from_numpy(v.copy()) for k, v in params.items()}
    current = module.state_dict()
    if set(state) != set(current):
        missing = set(current) - set(state)
        extra = set(state) - set(current)
        raise ValidationError(f"checkpoint/module mismatch: missing {missing}, extra {extra}")
    for k in state:
        if state[k].numel() != current[k].numel():
            raise ValidationError(
                f"checkpoint param {k!r} has {state[k].numel()} elements, "
                f"module expects {current[k].numel()}"
            )
        state[k] = state[k].reshape(current[k].shape).to(current[k].dtype)
    module.load_state_dict(state)
    return header

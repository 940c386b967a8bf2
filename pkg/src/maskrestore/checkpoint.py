"""Checkpoint persistence: a JSON manifest plus a raw float32 blob.

Layout: magic line, 8-byte little-endian manifest length, the manifest
(UTF-8 JSON with sorted keys), then every tensor as little-endian float32
at the offsets the manifest declares. Save -> load -> save is
byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import Tensor
from .models import ParamSet

MAGIC = b"MRCKPT\n"
FORMAT_VERSION = 1
PACKAGE_VERSION = "0.1.0"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, models: Mapping[str, ParamSet], *,
                    step: int = 0, rng_state: Mapping[str, int] | None = None) -> None:
    """Write named parameter sets; tensors are stored as float32."""
    groups = []
    blobs = []
    offset = 0
    for model_name in sorted(models):
        params = models[model_name]
        for gname in params.names():
            for key, tensor in sorted(params.group(gname).items()):
                data = np.ascontiguousarray(tensor.data, dtype="<f4")
                groups.append(
                    {
                        "name": f"{model_name}/{gname}/{key}",
                        "shape": list(tensor.shape),
                        "offset": offset,
                        "nbytes": data.nbytes,
                    }
                )
                blobs.append(data.tobytes())
                offset += data.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "package_version": PACKAGE_VERSION,
        "step": int(step),
        "rng_state": dict(rng_state or {}),
        "blob_nbytes": offset,
        "groups": groups,
    }
    payload = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(payload).to_bytes(8, "little"))
        fh.write(payload)
        fh.write(b"".join(blobs))


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint into its manifest and a flat name->array mapping."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint file")
    n = int.from_bytes(raw[len(MAGIC) : len(MAGIC) + 8], "little")
    head = len(MAGIC) + 8
    try:
        manifest = json.loads(raw[head : head + n].decode())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest in {path}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"format version mismatch in {path}: "
            f"file has {manifest.get('format_version')}, reader supports {FORMAT_VERSION}"
        )
    blob = raw[head + n :]
    if len(blob) != manifest["blob_nbytes"]:
        raise CheckpointError(
            f"corrupt blob in {path}: manifest declares {manifest['blob_nbytes']} "
            f"bytes, file holds {len(blob)}"
        )
    tensors = {}
    for entry in manifest["groups"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start : start + nbytes], dtype="<f4")
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(
                f"group {entry['name']!r}: blob holds {arr.size} values, "
                f"shape {entry['shape']} needs {expected}"
            )
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return manifest, tensors


def load_into(params: ParamSet, tensors: Mapping[str, np.ndarray],
              model_name: str, dtype=np.float32) -> ParamSet:
    """Fill a built parameter set from checkpoint arrays, strictly by name."""
    prefix = f"{model_name}/"
    available = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    expected = set(params.flat())
    if set(available) != expected:
        missing = sorted(expected - set(available))
        extra = sorted(set(available) - expected)
        detail = []
        if missing:
            detail.append(f"missing {missing}")
        if extra:
            detail.append(f"unexpected {extra}")
        raise CheckpointError(
            f"checkpoint does not match model {model_name!r}: " + "; ".join(detail)
        )
    for gname in params.names():
        for key in params.group(gname):
            arr = available[f"{gname}/{key}"]
            current = params.group(gname)[key]
            if tuple(arr.shape) != current.shape:
                raise CheckpointError(
                    f"shape mismatch for {gname}/{key}: checkpoint {arr.shape}, "
                    f"model {current.shape}"
                )
            params.replace(gname, key, Tensor(arr.astype(dtype), requires_grad=current.requires_grad))
    return params

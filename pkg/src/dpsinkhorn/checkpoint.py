"""Checkpoint files.

A checkpoint is a JSON manifest plus a binary blob. The blob holds
little-endian float32 tensors back to back in the order listed under
``"tensors"`` (generator parameters, then optimizer moments). The manifest
records the architecture, step, random-stream counters and a hash of the
training config, which is enough to resume a run bit for bit.
"""

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .exceptions import DataFormatError
from .nn import AdamState, Architecture, GeneratorParams, SgdState

FORMAT = "dpsinkhorn-checkpoint"
VERSION = 1
RNG_SCHEME = "philox4x64 key=(seed, purpose) counter=(0, 0, 0, step)"


def config_hash(config_dict):
    canonical = json.dumps(config_dict, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def _tensor_entries(theta, opt_state):
    entries = []
    for k, (W, b) in enumerate(zip(theta.weights, theta.biases)):
        entries += [(f"theta.W{k}", W), (f"theta.b{k}", b)]
    for slot in ("m", "v"):
        for k, arr in enumerate(getattr(opt_state, slot, []) or []):
            entries.append((f"opt.{slot}{k}", arr))
    return entries


def save_checkpoint(path, theta, opt_state, step, seed, config_dict):
    """Write ``path`` (manifest) and ``path`` with a ``.bin`` suffix (blob)."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    tensors, offset, chunks = [], 0, []
    for name, arr in _tensor_entries(theta, opt_state):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    opt = {k: getattr(opt_state, k) for k in ("step", "lr", "weight_decay")}
    if isinstance(opt_state, AdamState):
        opt.update(kind="adam", beta1=opt_state.beta1, beta2=opt_state.beta2, eps=opt_state.eps)
    else:
        opt.update(kind="sgd")
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "architecture": theta.arch.to_dict(),
        "step": int(step),
        "rng": {"scheme": RNG_SCHEME, "seed": int(seed), "next_index": int(step) + 1},
        "config_hash": config_hash(config_dict),
        "config": config_dict,
        "optimizer": opt,
        "dtype": "float32-le",
        "blob": blob_path.name,
        "tensors": tensors,
    }
    tmp = blob_path.with_suffix(".bin.tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, blob_path)
    path.write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path):
    """Return ``(theta, opt_state, manifest)``."""
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"checkpoint manifest {path} is not valid JSON") from exc
    if manifest.get("format") != FORMAT:
        raise DataFormatError(f"{path} is not a {FORMAT} manifest")
    blob = (path.parent / manifest["blob"]).read_bytes()
    arrays = {}
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        end = t["offset"] + 4 * count
        if end > len(blob):
            raise DataFormatError(f"checkpoint blob truncated at tensor {t['name']}")
        arrays[t["name"]] = np.frombuffer(blob, dtype="<f4", count=count,
                                          offset=t["offset"]).reshape(t["shape"]).astype(np.float32)
    arch = Architecture.from_dict(manifest["architecture"])
    n_layers = len(arch.widths) - 1
    theta = GeneratorParams(arch, [arrays[f"theta.W{k}"] for k in range(n_layers)],
                            [arrays[f"theta.b{k}"] for k in range(n_layers)])
    opt = manifest["optimizer"]
    m = [arrays[f"opt.m{k}"] for k in range(2 * n_layers) if f"opt.m{k}" in arrays]
    v = [arrays[f"opt.v{k}"] for k in range(2 * n_layers) if f"opt.v{k}" in arrays]
    if opt["kind"] == "adam":
        state = AdamState(m, v, step=opt["step"], lr=opt["lr"], beta1=opt["beta1"],
                          beta2=opt["beta2"], weight_decay=opt["weight_decay"], eps=opt["eps"])
    else:
        state = SgdState(step=opt["step"], lr=opt["lr"], weight_decay=opt["weight_decay"])
    return theta, state, manifest

"""Versioned checkpoint files.

Layout::

    b"L2PCKPT\\0" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | tensor bytes

Tensors are raw little-endian float64 in manifest order; the manifest
records name, group, shape and byte offset for each one.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from ..nn import LayerSpec, Model, spec_hash

MAGIC = b"L2PCKPT\0"
VERSION = 1
_HEADER = struct.Struct("<IQ")


class CheckpointError(ValueError):
    """Unreadable checkpoint or a checkpoint that does not match the model."""


@dataclass
class Checkpoint:
    manifest: dict
    tensors: Dict[str, np.ndarray]
    digest: str = ""

    @property
    def epoch(self) -> int:
        return self.manifest["epoch"]

    @property
    def config_digest(self) -> str:
        return self.manifest.get("config_digest", "")

    @property
    def config_text(self) -> str:
        return self.manifest.get("config", "")

    def build_model(self) -> Model:
        """Rebuild the model from the stored spec and load every tensor."""
        m = self.manifest
        specs = [LayerSpec.from_dict(d) for d in m["spec"]]
        model = Model(specs, m["input_shape"], seed=m["model_seed"], theta0=m["theta0"], theta_min=m["theta_min"])
        load_into(model, self)
        return model


def save(path, model: Model, *, epoch: int = 0, config_digest: str = "", config_text: str = "",
         optimizer=None, extra: Optional[dict] = None) -> str:
    """Write ``model`` (and optional optimizer velocity) to ``path``; return the file's sha256."""
    entries, blobs, offset = [], [], 0

    def add(name, group, arr):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "group": group, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes

    for name, t in model.params.items():
        add(name, model.params.group_of(name), t.data)
    opt_state = None
    if optimizer is not None:
        opt_state = {k: v for k, v in optimizer.state_dict().items() if k != "velocity"}
        for name, v in sorted(optimizer.velocity.items()):
            add(name, "velocity", v)
    p0 = model.perturbations[0] if model.perturbations else None
    manifest = {
        "format_version": VERSION,
        "spec": [s.to_dict() for s in model.specs],
        "input_shape": list(model.input_shape),
        "spec_hash": model.spec_hash,
        "model_seed": model.seed,
        "theta0": p0.theta0 if p0 else 0.01,
        "theta_min": p0.theta_min if p0 else 0.0,
        "noise_enabled": [p.enabled for p in model.perturbations],
        "rng_state": model.noise_state(),
        "epoch": int(epoch),
        "config_digest": config_digest,
        "config": config_text,
        "optimizer": opt_state,
        "tensors": entries,
        "extra": extra or {},
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    data = MAGIC + _HEADER.pack(VERSION, len(head)) + head + b"".join(blobs)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"no checkpoint at {p}")
    data = p.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{p}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + _HEADER.size:
        raise CheckpointError(f"{p}: truncated header")
    version, n = _HEADER.unpack_from(data, pos)
    if version != VERSION:
        raise CheckpointError(f"{p}: unsupported format version {version}")
    pos += _HEADER.size
    try:
        manifest = json.loads(data[pos:pos + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{p}: corrupt manifest: {exc}") from None
    body = memoryview(data)[pos + n:]
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(body):
            raise CheckpointError(f"{p}: tensor {e['name']} runs past end of file")
        arr = np.frombuffer(body[e["offset"]:end], dtype="<f8").astype(np.float64).reshape(e["shape"])
        tensors[(e["group"], e["name"])] = arr
    return Checkpoint(manifest, tensors, hashlib.sha256(data).hexdigest())


def load_into(model: Model, ckpt) -> Checkpoint:
    """Copy tensors and noise rng state into ``model``; the spec hash must match."""
    if not isinstance(ckpt, Checkpoint):
        ckpt = load(ckpt)
    m = ckpt.manifest
    stored = m["spec_hash"]
    recomputed = spec_hash([LayerSpec.from_dict(d) for d in m["spec"]], m["input_shape"])
    if stored != recomputed:
        raise CheckpointError("checkpoint manifest is inconsistent: spec hash does not match its spec")
    if stored != model.spec_hash:
        raise CheckpointError(f"spec hash mismatch: checkpoint {stored[:12]} vs model {model.spec_hash[:12]}")
    for name, t in model.params.items():
        key = (model.params.group_of(name), name)
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks tensor {name}")
        t.data[...] = ckpt.tensors[key]
    for p, on in zip(model.perturbations, m["noise_enabled"]):
        p.enabled = on
    model.set_noise_state(m["rng_state"])
    return ckpt


def restore_optimizer(optimizer, ckpt: Checkpoint) -> None:
    st = ckpt.manifest.get("optimizer")
    if st is None:
        raise CheckpointError("checkpoint has no optimizer state")
    for k, v in st.items():
        setattr(optimizer, k, v)
    optimizer.velocity = {n: a.copy() for (g, n), a in ckpt.tensors.items() if g == "velocity"}

"""Binary checkpoint container with named tensors and per-blob checksums.

Layout: magic, u32 format version, u64 metadata length, canonical JSON
metadata (config, provenance, tensor index with shapes/offsets/crc32),
then the raw little-endian payload. Tensor bytes are always little-endian
regardless of host, so files round-trip bitwise across platforms. Writes
go to a temp file in the target directory and are renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
import zlib
from typing import Optional

import numpy as np
import torch

from .assembly import AssembledSequence, Projector
from .errors import CheckpointError, ChecksumError
from .model import DecoderModel, ModelConfig, adapter_index, make_adapter
from .surgery import Provenance

MAGIC = b"SPRNCKPT"
FORMAT_VERSION = 1

_DTYPES = {"f4": np.dtype("<f4"), "i8": np.dtype("<i8")}


def _canonical_json(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_container(path, meta: dict, tensors: dict) -> None:
    """Write named arrays plus metadata atomically.

    tensors maps name -> numpy array; float arrays are stored as f4,
    integer arrays as i8, both little-endian.
    """
    index = []
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = "i8" if arr.dtype.kind in "iu" else "f4"
        blob = np.ascontiguousarray(arr.astype(_DTYPES[code])).tobytes()
        index.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": code,
            "offset": offset,
            "nbytes": len(blob),
            "crc32": zlib.crc32(blob) & 0xFFFFFFFF,
        })
        blobs.append(blob)
        offset += len(blob)
    doc = dict(meta)
    doc["tensors"] = index
    meta_bytes = _canonical_json(doc)
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(FORMAT_VERSION.to_bytes(4, "little"))
            f.write(len(meta_bytes).to_bytes(8, "little"))
            f.write(meta_bytes)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_container(path):
    """Read back (meta, tensors); every blob is checksum-verified."""
    with open(path, "rb") as f:
        raw = f.read()
    head = len(MAGIC) + 4 + 8
    if len(raw) < head:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version = int.from_bytes(raw[len(MAGIC): len(MAGIC) + 4], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})"
        )
    meta_len = int.from_bytes(raw[len(MAGIC) + 4: head], "little")
    if len(raw) < head + meta_len:
        raise CheckpointError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(raw[head: head + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable metadata: {e}") from e
    payload = raw[head + meta_len:]
    tensors = {}
    for ent in meta.get("tensors", []):
        lo, hi = ent["offset"], ent["offset"] + ent["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: truncated payload at tensor {ent['name']!r}")
        blob = payload[lo:hi]
        if zlib.crc32(blob) & 0xFFFFFFFF != ent["crc32"]:
            raise ChecksumError(f"{path}: checksum mismatch on tensor {ent['name']!r}")
        arr = np.frombuffer(blob, dtype=_DTYPES[ent["dtype"]]).reshape(ent["shape"]).copy()
        tensors[ent["name"]] = arr
    return meta, tensors


def save_checkpoint(path, model: DecoderModel, projector: Optional[Projector],
                    provenance: Provenance) -> None:
    tensors = {}
    for name, t in model.state_dict().items():
        tensors[f"model.{name}"] = t.detach().cpu().numpy()
    if projector is not None:
        for name, t in projector.state_dict().items():
            tensors[f"projector.{name}"] = t.detach().cpu().numpy()
    meta = {
        "kind": "checkpoint",
        "model_config": model.config.to_dict(),
        "projector": projector.meta() if projector is not None else None,
        "adapters": adapter_index(model),
        "provenance": provenance.to_dict(),
    }
    write_container(path, meta, tensors)


def load_checkpoint(path):
    """Rebuild (model, projector, provenance); everything loads frozen."""
    meta, tensors = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise CheckpointError(f"{path}: container is not a checkpoint")
    try:
        config = ModelConfig.from_dict(meta["model_config"])
        provenance = Provenance.from_dict(meta["provenance"])
    except KeyError as e:
        raise CheckpointError(f"{path}: metadata missing {e}") from e
    model = DecoderModel(config, original_layer_ids=provenance.original_layer_ids)
    model.applied_plans = list(provenance.plans)
    for ent in meta.get("adapters", []):
        layer = model.layers[ent["layer"]]
        layer.adapters[ent["target"]] = make_adapter(
            config, ent["target"], ent["rank"], ent["alpha"], ent["dropout_p"]
        )
    model_state = {}
    proj_state = {}
    for name, arr in tensors.items():
        if name.startswith("model."):
            model_state[name[len("model."):]] = torch.from_numpy(arr.astype(np.float32))
        elif name.startswith("projector."):
            proj_state[name[len("projector."):]] = torch.from_numpy(arr.astype(np.float32))
        else:
            raise CheckpointError(f"{path}: unexpected tensor namespace in {name!r}")
    try:
        model.load_state_dict(model_state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"{path}: model tensors do not match config: {e}") from e
    projector = None
    if meta.get("projector") is not None:
        pm = meta["projector"]
        projector = Projector(pm["d_in"], pm["d_hidden"], pm["d_out"], stack_k=pm["stack_k"])
        try:
            projector.load_state_dict(proj_state, strict=True)
        except RuntimeError as e:
            raise CheckpointError(f"{path}: projector tensors malformed: {e}") from e
        projector.set_trainable(False)
    for p in model.parameters():
        p.requires_grad_(False)
    model.eval()
    return model, projector, provenance


def save_assembled(path, seq: AssembledSequence) -> None:
    """Persist one assembled sequence (used for inspection and tests)."""
    meta = {
        "kind": "assembled-sequence",
        "segments": {k: list(v) for k, v in seq.segments.items()},
    }
    tensors = {
        "embeddings": seq.embeddings.detach().cpu().numpy(),
        "target_ids": seq.target_ids.cpu().numpy().astype(np.int64),
        "loss_mask": seq.loss_mask.cpu().numpy().astype(np.int64),
    }
    write_container(path, meta, tensors)


def load_assembled(path) -> AssembledSequence:
    meta, tensors = read_container(path)
    if meta.get("kind") != "assembled-sequence":
        raise CheckpointError(f"{path}: container is not an assembled sequence")
    return AssembledSequence(
        embeddings=torch.from_numpy(tensors["embeddings"].astype(np.float32)),
        target_ids=torch.from_numpy(tensors["target_ids"]).long(),
        loss_mask=torch.from_numpy(tensors["loss_mask"]).bool(),
        segments={k: tuple(v) for k, v in meta["segments"].items()},
    )

"""Binary checkpoint format with bit-exact round trips.

Layout: magic bytes, a little-endian uint64 manifest length, a key-sorted
JSON manifest (model config, vocabulary, per-array name/shape/offset entries,
Adam step counts, optional extra config), then the concatenated little-endian
float64 payloads. Values, Adam moments and batch-norm running statistics all
round-trip exactly.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .encoders import ModelDims
from .model import DialogScorer
from .text import LoadError, Vocabulary

CHECKPOINT_MAGIC = b"SFCKPT1\n"
FORMAT_VERSION = 1


def _array_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(model: DialogScorer, path, extra_config: dict | None = None) -> None:
    entries = []
    payload = []
    offset = 0

    def add(name: str, role: str, arr: np.ndarray):
        nonlocal offset
        data = _array_bytes(arr)
        entries.append({
            "name": name,
            "role": role,
            "shape": list(arr.shape),
            "offset": offset,
        })
        payload.append(data)
        offset += len(data)

    params = model.parameters()
    for name, p in params.items():
        add(name, "value", p.value)
        add(name, "adam_m", p.m)
        add(name, "adam_v", p.v)
    for name, buf in model.buffers().items():
        add(name, "buffer", buf)

    manifest = {
        "format_version": FORMAT_VERSION,
        "model": model.config(),
        "vocab": model.vocab.words,
        "entries": entries,
        "step_counts": {name: p.step_count for name, p in params.items()},
        "extra": extra_config or {},
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(mbytes)))
        f.write(mbytes)
        for chunk in payload:
            f.write(chunk)


def load_checkpoint(path) -> tuple[DialogScorer, dict]:
    """Rebuild the model from a checkpoint; returns (model, extra_config)."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise LoadError(f"checkpoint magic mismatch: {magic!r}")
        header = f.read(8)
        if len(header) != 8:
            raise LoadError("checkpoint manifest length truncated")
        (mlen,) = struct.unpack("<Q", header)
        mbytes = f.read(mlen)
        if len(mbytes) != mlen:
            raise LoadError("checkpoint manifest truncated")
        try:
            manifest = json.loads(mbytes.decode("utf-8"))
        except ValueError as exc:
            raise LoadError(f"checkpoint manifest is not valid JSON: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise LoadError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
        payload = f.read()

    cfg = manifest["model"]
    vocab = Vocabulary(manifest["vocab"])
    model = DialogScorer(
        ModelDims(**cfg["dims"]),
        vocab,
        task=cfg["task"],
        variant=cfg["variant"],
        mlp_depth=cfg["mlp_depth"],
        shared_embeddings=cfg["shared_embeddings"],
        init_seed=cfg["init_seed"],
    )
    params = model.parameters()
    buffers = model.buffers()
    targets = {}
    for name, p in params.items():
        targets[(name, "value")] = p.value
        targets[(name, "adam_m")] = p.m
        targets[(name, "adam_v")] = p.v
    for name, buf in buffers.items():
        targets[(name, "buffer")] = buf

    seen = set()
    for entry in manifest["entries"]:
        key = (entry["name"], entry["role"])
        if key not in targets:
            raise LoadError(f"checkpoint entry {entry['name']} ({entry['role']}) "
                            "does not exist in the configured model")
        arr = targets[key]
        shape = tuple(entry["shape"])
        if shape != arr.shape:
            raise LoadError(
                f"parameter {entry['name']}: checkpoint shape {list(shape)} does not "
                f"match model shape {list(arr.shape)}")
        start = entry["offset"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
        chunk = payload[start : start + nbytes]
        if len(chunk) != nbytes:
            raise LoadError(f"parameter {entry['name']}: payload truncated")
        arr[...] = np.frombuffer(chunk, dtype="<f8").reshape(shape)
        seen.add(key)
    missing = sorted(set(targets) - seen)
    if missing:
        name, role = missing[0]
        raise LoadError(f"checkpoint is missing parameter {name} ({role})")
    for name, p in params.items():
        p.step_count = int(manifest["step_counts"][name])
    return model, manifest.get("extra", {})

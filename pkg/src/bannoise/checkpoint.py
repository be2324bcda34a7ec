"""Checkpoint directories: ``manifest.json`` + little-endian float32 ``weights.bin``.

Neuron noise is stored the same way in ``noise.bin`` with a ``noise`` entry
in the manifest. Every file is written to a temporary name and renamed.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from bannoise.errors import IngestionError
from bannoise.model import LayeredClassifier, ParamSelection
from bannoise.noise import NeuronNoise

FORMAT = "bannoise-checkpoint/1"
MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
NOISE = "noise.bin"


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, obj) -> None:
    atomic_write_bytes(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def _pack(tensors: list[tuple[str, torch.Tensor]]) -> tuple[bytes, list[dict]]:
    entries, chunks, offset = [], [], 0
    for name, t in tensors:
        raw = t.detach().cpu().contiguous().numpy().astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), entries


def _unpack(blob: bytes, entry: dict, where: Path) -> torch.Tensor:
    start, n = entry["offset"], entry["nbytes"]
    if start + n > len(blob):
        raise IngestionError(f"tensor {entry['name']} runs past the end of the blob", where)
    arr = np.frombuffer(blob, dtype="<f4", count=n // 4, offset=start)
    return torch.from_numpy(arr.astype(np.float32).reshape(entry["shape"]))


def _model_tensors(model: LayeredClassifier) -> list[tuple[str, torch.Tensor]]:
    return [(k, v) for k, v in model.state_dict().items() if v.is_floating_point()]


def save_checkpoint(model: LayeredClassifier, path: str | Path, provenance: dict | None = None,
                    extra: dict | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    blob, entries = _pack(_model_tensors(model))
    manifest = {
        "format": FORMAT,
        "architecture": model.descriptor(),
        "split_index": model.split_index,
        "dtype": "float32",
        "byte_order": "little",
        "tensors": entries,
        "parameter_names": [n for n, _ in model.named_parameters()],
        "seed_provenance": provenance or {},
        "extra": extra or {},
    }
    old = root / MANIFEST
    if old.exists():
        prev = json.loads(old.read_text())
        if "noise" in prev:
            manifest["noise"] = prev["noise"]
    atomic_write_bytes(root / WEIGHTS, blob)
    atomic_write_json(root / MANIFEST, manifest)
    return root


def read_manifest(path: str | Path) -> dict:
    root = Path(path)
    f = root / MANIFEST
    if not f.exists():
        raise IngestionError("checkpoint manifest not found", f)
    try:
        manifest = json.loads(f.read_text())
    except json.JSONDecodeError as exc:
        raise IngestionError("corrupt checkpoint manifest", f) from exc
    if manifest.get("format") != FORMAT:
        raise IngestionError(f"unsupported checkpoint format {manifest.get('format')!r}", f)
    return manifest


def load_checkpoint(path: str | Path) -> tuple[LayeredClassifier, dict]:
    root = Path(path)
    manifest = read_manifest(root)
    model = LayeredClassifier.from_descriptor(manifest["architecture"])
    wfile = root / WEIGHTS
    if not wfile.exists():
        raise IngestionError("checkpoint weights not found", wfile)
    blob = wfile.read_bytes()
    state = model.state_dict()
    for entry in manifest["tensors"]:
        if entry["name"] not in state:
            raise IngestionError(f"unexpected tensor {entry['name']}", wfile)
        t = _unpack(blob, entry, wfile)
        if tuple(t.shape) != tuple(state[entry["name"]].shape):
            raise IngestionError(f"shape mismatch for {entry['name']}", wfile)
        state[entry["name"]] = t
    model.load_state_dict(state)
    model.eval()
    return model, manifest


def save_noise(noise: NeuronNoise, path: str | Path) -> None:
    """Store noise next to an existing checkpoint so detection runs can be replayed."""
    root = Path(path)
    manifest = read_manifest(root)
    blob, entries = _pack([("delta", noise.delta), ("xi", noise.xi)])
    manifest["noise"] = {
        "file": NOISE,
        "tensors": entries,
        "epsilon": noise.epsilon,
        "selection": noise.selection.to_dict(),
        "seed": noise.seed,
        "loss_trace": list(noise.loss_trace),
    }
    atomic_write_bytes(root / NOISE, blob)
    atomic_write_json(root / MANIFEST, manifest)


def load_noise(path: str | Path) -> NeuronNoise:
    root = Path(path)
    manifest = read_manifest(root)
    entry = manifest.get("noise")
    if not entry:
        raise IngestionError("checkpoint has no stored noise", root)
    blob = (root / entry["file"]).read_bytes()
    parts = {e["name"]: _unpack(blob, e, root / entry["file"]) for e in entry["tensors"]}
    return NeuronNoise(parts["delta"], parts["xi"], entry["epsilon"],
                       ParamSelection.from_dict(entry["selection"]), entry["seed"], entry.get("loss_trace", []))

"""On-disk artifacts: per-stage manifests with hashes, flat little-endian float64 payloads."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from . import __version__

MANIFEST = "manifest.json"


class MissingArtifact(FileNotFoundError):
    pass


class HashMismatch(ValueError):
    pass


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_matrix(path: str | Path, matrix: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(matrix, dtype="<f8").tobytes())


def read_matrix(path: str | Path, cols: int) -> np.ndarray:
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if cols <= 0 or data.size % cols:
        raise ValueError(f"{path}: {data.size} values do not form rows of {cols}")
    return data.reshape(-1, cols).astype(np.float64)


def save_state(state: dict, path: str | Path) -> list[dict]:
    """Concatenate tensors in name order into one payload; returns the layout."""
    layout = []
    chunks = []
    offset = 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f8")
        layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.ravel())
        offset += arr.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0)
    Path(path).write_bytes(flat.astype("<f8").tobytes())
    return layout


def load_state(path: str | Path, layout: Iterable[dict]) -> dict:
    import torch

    flat = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    out = {}
    for item in layout:
        n = int(np.prod(item["shape"])) if item["shape"] else 1
        seg = flat[item["offset"]:item["offset"] + n]
        if seg.size != n:
            raise ValueError(f"{path}: payload too short for {item['name']}")
        out[item["name"]] = torch.from_numpy(seg.reshape(item["shape"]).copy())
    return out


def write_manifest(stage_dir: Path, stage: str, config: dict, config_hash: str, seed: int,
                   inputs: dict[str, str], outputs: Iterable[Path], tolerance: str = "byte-identical",
                   meta: dict | None = None, name: str = MANIFEST) -> Path:
    """Manifest listing the sha256 of every input and output, plus full provenance."""
    root = stage_dir.parent
    doc = {
        "stage": stage,
        "tool_version": __version__,
        "config_hash": config_hash,
        "seed": seed,
        "config": config,
        "inputs": dict(sorted(inputs.items())),
        "outputs": {str(p.relative_to(root)): sha256_file(p) for p in sorted(outputs)},
        "tolerance": tolerance,
        "meta": meta or {},
    }
    path = stage_dir / name
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def load_manifest(workdir: Path, stage: str, verify: bool = True, manifest_name: str = MANIFEST) -> dict:
    path = workdir / stage / manifest_name
    if not path.exists():
        raise MissingArtifact(f"stage '{stage}' has no manifest at {path}; run `semanticbbv {stage}` first")
    doc = json.loads(path.read_text())
    if verify:
        for rel, digest in doc["outputs"].items():
            f = workdir / rel
            if not f.exists():
                raise MissingArtifact(f"{f} listed by the {stage} manifest is missing; rerun `semanticbbv {stage}`")
            if sha256_file(f) != digest:
                raise HashMismatch(f"{f} does not match the hash in the {stage} manifest; "
                                   f"it was modified after `semanticbbv {stage}` wrote it")
    return doc


def input_hashes(*docs: dict) -> dict[str, str]:
    """Upstream output hashes, taken from already verified manifests."""
    out = {}
    for d in docs:
        out.update(d["outputs"])
    return out

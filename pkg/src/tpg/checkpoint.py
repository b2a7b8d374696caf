"""Checkpoint blobs (``torch.save``) with a mandatory JSON sidecar."""

from __future__ import annotations

import json
from pathlib import Path

import torch

from tpg import CheckpointError


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(path: str | Path, state: dict, sidecar: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(state, path)
    with open(sidecar_path(path), "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    return path


def read_sidecar(path: str | Path) -> dict:
    side = sidecar_path(path)
    if not Path(path).exists() or not side.exists():
        raise CheckpointError(f"checkpoint or sidecar missing: {path}")
    with open(side) as f:
        return json.load(f)


def load_checkpoint(path: str | Path, stage: str) -> tuple[dict, dict]:
    meta = read_sidecar(path)
    if meta.get("stage") != stage:
        raise CheckpointError(f"{path} is a {meta.get('stage')!r} checkpoint, expected {stage!r}")
    state = torch.load(path, map_location="cpu", weights_only=False)
    return state, meta

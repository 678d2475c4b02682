"""Checkpoint directories: ``manifest.json`` plus one ``.npz`` blob per part.

Each manifest part entry records how to rebuild the module (its type and
sizes), the blob file name, and a SHA-256 fingerprint of the trainable
parameters which is checked on load.
"""

from __future__ import annotations

import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, IntegrityError
from .models import (
    Encoder,
    EncoderSpec,
    Projector,
    SharedClassifier,
    parameter_fingerprint,
    seeded,
)

MANIFEST = "manifest.json"
SCHEMA_VERSION = 1


def describe(module: nn.Module) -> dict:
    if isinstance(module, Encoder):
        return {"type": "encoder", "role": module.role, "spec": module.spec.to_dict()}
    if isinstance(module, Projector):
        return {"type": "projector", "ch_s": module.ch_in, "ch_t": module.ch_out, "r": module.r}
    if isinstance(module, SharedClassifier):
        return {"type": "classifier", "ch_in": module.ch_in, "num_classes": module.num_classes}
    raise ConfigurationError(f"cannot checkpoint module of type {type(module).__name__}")


def build_part(entry: Mapping) -> nn.Module:
    # construction draws init values that load_state_dict overwrites; pin the
    # seed so loading never perturbs the caller's RNG stream
    with seeded(0):
        return _build_part(entry)


def _build_part(entry: Mapping) -> nn.Module:
    kind = entry["type"]
    if kind == "encoder":
        return Encoder(EncoderSpec.from_dict(entry["spec"]), role=entry.get("role", "student"))
    if kind == "projector":
        return Projector(entry["ch_s"], entry["ch_t"], entry["r"])
    if kind == "classifier":
        return SharedClassifier(entry["ch_in"], entry["num_classes"])
    raise ConfigurationError(f"unknown part type {kind!r}")


def save_checkpoint(directory, parts: Mapping[str, nn.Module], **manifest) -> dict:
    """Write ``parts`` and ``manifest`` fields under ``directory``.

    The directory is assembled next to its destination and swapped in, so
    an existing checkpoint is never left half-written.
    """
    directory = Path(directory)
    directory.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=directory.name + ".", dir=directory.parent))
    entries = {}
    for name, module in parts.items():
        blob = f"{name}.npz"
        state = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
        np.savez(tmp / blob, **state)
        entries[name] = {
            **describe(module),
            "file": blob,
            "dtype": str(next(module.parameters()).dtype).replace("torch.", ""),
            "fingerprint": parameter_fingerprint(module),
        }
    doc = {"schema_version": SCHEMA_VERSION, **manifest, "parts": entries}
    (tmp / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    if directory.exists():
        old = directory.with_name(directory.name + ".old")
        if old.exists():
            shutil.rmtree(old)
        os.replace(directory, old)
        os.replace(tmp, directory)
        shutil.rmtree(old)
    else:
        os.replace(tmp, directory)
    return doc


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise ConfigurationError(f"no checkpoint manifest at {path}")
    return json.loads(path.read_text())


def load_checkpoint(directory, verify: bool = True):
    """Rebuild every part. Returns ``(manifest, {name: module})``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    parts = {}
    for name, entry in manifest["parts"].items():
        module = build_part(entry).to(getattr(torch, entry.get("dtype", "float32")))
        with np.load(directory / entry["file"]) as blob:
            state = {k: torch.from_numpy(blob[k]) for k in blob.files}
        module.load_state_dict(state)
        if verify and parameter_fingerprint(module) != entry["fingerprint"]:
            raise IntegrityError(f"{directory / entry['file']}: fingerprint mismatch")
        parts[name] = module
    return manifest, parts

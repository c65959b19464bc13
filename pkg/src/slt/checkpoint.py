"""Checkpoint container: a magic line, a JSON text header, raw tensor bytes.

Layout::

    b"SLTCKPT\\n"
    8-byte little-endian header length
    UTF-8 JSON header (format version, stage, architecture, metadata,
                       tensor manifest with dtype/shape/offset)
    concatenated little-endian tensor payloads
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .tracker import SiameseTracker, TrackerConfig

MAGIC = b"SLTCKPT\n"
FORMAT_VERSION = 1
STAGES = ("pretrain", "slt")


class CheckpointError(ValueError):
    pass


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def write_container(path, tensors: dict[str, torch.Tensor], header: dict) -> None:
    manifest, blobs, offset = [], [], 0
    for name, t in tensors.items():
        a = _to_numpy(t)
        b = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest.append({"name": name, "dtype": a.dtype.name, "shape": list(a.shape), "offset": offset, "nbytes": len(b)})
        blobs.append(b)
        offset += len(b)
    header = dict(header, format_version=FORMAT_VERSION, tensors=manifest)
    text = json.dumps(header, sort_keys=True, indent=1).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for b in blobs:
            f.write(b)
    tmp.replace(path)


def read_container(path) -> tuple[dict, dict[str, torch.Tensor]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(data[start : start + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    payload = memoryview(data)[start + n :]
    tensors = {}
    for entry in header["tensors"]:
        buf = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        a = np.frombuffer(buf, dtype=np.dtype(entry["dtype"]).newbyteorder("<")).reshape(entry["shape"])
        tensors[entry["name"]] = torch.from_numpy(a.astype(a.dtype.newbyteorder("="), copy=True))
    return header, tensors


def arch_dict(cfg: TrackerConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["channels"] = list(cfg.channels)
    return d


def save_checkpoint(path, model: SiameseTracker, stage: str, optimizer: torch.optim.Optimizer | None = None, meta: dict | None = None) -> None:
    if stage not in STAGES:
        raise CheckpointError(f"stage must be one of {STAGES}")
    tensors = {f"model/{k}": v for k, v in model.state_dict().items()}
    header = {"stage": stage, "arch": arch_dict(model.cfg), "meta": meta or {}}
    if optimizer is not None:
        sd = optimizer.state_dict()
        for pid, st in sd["state"].items():
            for key, val in st.items():
                tensors[f"optim/{pid}/{key}"] = torch.as_tensor(val)
        header["optim_param_groups"] = sd["param_groups"]
    write_container(path, tensors, header)


def build_model(header: dict) -> SiameseTracker:
    arch = dict(header["arch"])
    arch["channels"] = tuple(arch["channels"])
    return SiameseTracker(TrackerConfig(**arch))


def load_checkpoint(path, model: SiameseTracker | None = None, optimizer: torch.optim.Optimizer | None = None):
    """Load parameters (and optimizer state) into ``model``, building one from
    the header when not given. Returns ``(model, header)``."""
    header, tensors = read_container(path)
    if model is None:
        model = build_model(header)
    elif arch_dict(model.cfg) != header["arch"]:
        raise CheckpointError(f"{path}: architecture mismatch {header['arch']} vs {arch_dict(model.cfg)}")
    expected = model.state_dict()
    got = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    if missing or extra:
        raise CheckpointError(f"{path}: missing tensors {missing}, unexpected tensors {extra}")
    for k, v in got.items():
        if tuple(v.shape) != tuple(expected[k].shape):
            raise CheckpointError(f"{path}: {k} has shape {tuple(v.shape)}, expected {tuple(expected[k].shape)}")
    model.load_state_dict(got)
    if optimizer is not None:
        if "optim_param_groups" not in header:
            raise CheckpointError(f"{path}: no optimizer state stored")
        state: dict = {}
        for name, v in tensors.items():
            if name.startswith("optim/"):
                _, pid, key = name.split("/", 2)
                state.setdefault(int(pid), {})[key] = v
        groups = header["optim_param_groups"]
        for g in groups:
            if "betas" in g:
                g["betas"] = tuple(g["betas"])
        optimizer.load_state_dict({"state": state, "param_groups": groups})
    return model, header

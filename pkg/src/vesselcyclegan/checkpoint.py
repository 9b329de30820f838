"""Checkpoint directories.

Layout of a checkpoint directory::

    meta.json              format tag, kind, epoch/step, config snapshot,
                           rng states, per-network spec + fingerprint + sha256
    <net>.safetensors      named parameter/buffer tensors of one network
    optim.pt               optimizer state dicts (torch.save)
    pools.pt               history-pool buffers (GAN checkpoints only)

Writes go to a sibling temp directory which is renamed into place.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch
from safetensors.torch import load_file, save_file

from .errors import CheckpointError
from .networks import build_network, spec_fingerprint, spec_from_dict, spec_to_dict

FORMAT = "vesselcyclegan.checkpoint"
VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    nets: dict
    optimizers: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    best_val_metric: float = -math.inf
    config: dict = field(default_factory=dict)
    rng_states: dict = field(default_factory=dict)
    pools: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def fingerprint(self, name: str) -> str:
        return self.nets[name].fingerprint


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_float(x: float):
    return x if math.isfinite(x) else None


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp-{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()

    networks = {}
    for name, net in ckpt.nets.items():
        fname = f"{name}.safetensors"
        tensors = {k: v.detach().cpu().contiguous().clone() for k, v in net.state_dict().items()}
        spec_json = json.dumps(spec_to_dict(net.spec), sort_keys=True)
        save_file(tensors, tmp / fname, metadata={
            "format": "vesselcyclegan.params", "version": str(VERSION),
            "spec": spec_json, "fingerprint": net.fingerprint,
        })
        networks[name] = {
            "file": fname,
            "spec": spec_to_dict(net.spec),
            "fingerprint": net.fingerprint,
            "sha256": _sha256(tmp / fname),
        }

    files = {}
    for fname, payload in (("optim.pt", ckpt.optimizers), ("pools.pt", ckpt.pools)):
        torch.save(payload, tmp / fname)
        files[fname] = _sha256(tmp / fname)

    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": ckpt.kind,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "best_val_metric": _json_float(ckpt.best_val_metric),
        "config": ckpt.config,
        "rng_states": ckpt.rng_states,
        "networks": networks,
        "files": files,
        "meta": ckpt.meta,
    }
    (tmp / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    if path.exists():
        old = path.with_name(f".{path.name}.old-{os.getpid()}")
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)
    return path


def read_meta(path) -> dict:
    meta_path = Path(path) / "meta.json"
    if not meta_path.is_file():
        raise CheckpointError(f"no meta.json in checkpoint {path}")
    try:
        meta = json.loads(meta_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"corrupt meta.json in {path}: {exc}") from exc
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise CheckpointError(
            f"{path} is not a version-{VERSION} checkpoint "
            f"(format={meta.get('format')!r}, version={meta.get('version')!r})"
        )
    return meta


def load_checkpoint(path, expected_specs: Optional[dict] = None) -> Checkpoint:
    """Load a checkpoint directory.

    ``expected_specs`` maps network names to specs the caller is configured
    with; any fingerprint disagreement raises CheckpointError.
    """
    path = Path(path)
    meta = read_meta(path)
    expected_specs = expected_specs or {}

    nets = {}
    for name, info in meta["networks"].items():
        spec = spec_from_dict(info["spec"])
        fp = spec_fingerprint(spec)
        if fp != info["fingerprint"]:
            raise CheckpointError(f"network {name}: stored fingerprint does not match its spec")
        if name in expected_specs and spec_fingerprint(expected_specs[name]) != fp:
            raise CheckpointError(
                f"network {name}: checkpoint fingerprint {fp[:12]} does not match "
                f"configured spec {spec_fingerprint(expected_specs[name])[:12]}"
            )
        file = path / info["file"]
        _verify_file(path, file, info["sha256"], meta)
        try:
            tensors = load_file(file)
        except Exception as exc:
            raise CheckpointError(_diagnose(path, meta, f"cannot read {file.name}: {exc}")) from exc
        net = build_network(spec)
        try:
            net.load_state_dict(tensors, strict=True)
        except RuntimeError as exc:
            raise CheckpointError(_diagnose(path, meta, f"{name}: {exc}")) from exc
        nets[name] = net

    loaded = {}
    for fname, digest in meta["files"].items():
        file = path / fname
        _verify_file(path, file, digest, meta)
        try:
            loaded[fname] = torch.load(file, weights_only=True)
        except Exception as exc:
            raise CheckpointError(_diagnose(path, meta, f"cannot read {fname}: {exc}")) from exc

    best = meta["best_val_metric"]
    return Checkpoint(
        kind=meta["kind"],
        nets=nets,
        optimizers=loaded.get("optim.pt", {}),
        epoch=meta["epoch"],
        step=meta["step"],
        best_val_metric=-math.inf if best is None else best,
        config=meta["config"],
        rng_states=meta["rng_states"],
        pools=loaded.get("pools.pt", {}),
        meta=meta["meta"],
    )


def _diagnose(path: Path, meta: dict, problem: str) -> str:
    listed = sorted([n["file"] for n in meta["networks"].values()] + list(meta["files"]))
    present = sorted(p.name for p in path.iterdir())
    return (f"checkpoint {path} ({meta['kind']}, epoch {meta['epoch']}): {problem}; "
            f"manifest lists {listed}, directory holds {present}")


def _verify_file(path: Path, file: Path, digest: str, meta: dict) -> None:
    if not file.is_file():
        raise CheckpointError(_diagnose(path, meta, f"missing file {file.name}"))
    if _sha256(file) != digest:
        raise CheckpointError(_diagnose(path, meta, f"{file.name} fails its checksum (truncated or altered)"))

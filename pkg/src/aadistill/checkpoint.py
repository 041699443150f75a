"""Checkpoint persistence: a JSON manifest plus a raw little-endian blob.

The manifest pins the network spec, head spec, per-tensor shapes/dtypes/offsets,
training seed and epoch; the blob is the concatenated tensor bytes in manifest
order. Loading reproduces inference outputs bit-for-bit on the same platform.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .backbone import NetworkSpec, RegressionHead, StageNetwork
from .errors import ConfigError
from .losses import ClassifierHead

FORMAT_VERSION = 1

KINDS = ("recognition_teacher", "age_teacher", "student")
_ROLE = {"recognition_teacher": "teacher_recognition",
         "age_teacher": "teacher_age",
         "student": "student"}


@dataclass
class Checkpoint:
    kind: str
    network: NetworkSpec
    head: dict  # {"type": "classifier", "classes": C} | {"type": "regression"} | {"type": "none"}
    state: "OrderedDict[str, torch.Tensor]"
    seed: int
    epoch: int
    metrics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown checkpoint kind {self.kind!r}")


def snapshot(kind: str, network: StageNetwork, head_module: nn.Module | None,
             head: dict, seed: int, epoch: int, metrics: dict | None = None
             ) -> Checkpoint:
    """Capture a detached copy of the current parameters and buffers."""
    state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for k, v in network.state_dict().items():
        state[f"backbone.{k}"] = v.detach().clone()
    if head_module is not None:
        for k, v in head_module.state_dict().items():
            state[f"head.{k}"] = v.detach().clone()
    return Checkpoint(kind, network.spec, head, state, seed, epoch, dict(metrics or {}))


def save_checkpoint(ckpt: Checkpoint, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = []
    offset = 0
    chunks = []
    for name, tensor in ckpt.state.items():
        arr = tensor.detach().cpu().contiguous().numpy()
        raw = arr.tobytes()
        params.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.name,
            "offset": offset,
            "nbytes": len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": ckpt.kind,
        "network": ckpt.network.to_dict(),
        "head": ckpt.head,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "params": params,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    (out / "params.bin").write_bytes(b"".join(chunks))
    return out


def load_checkpoint(ckpt_dir) -> Checkpoint:
    d = Path(ckpt_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format: {manifest.get('format_version')}")
    blob = (d / "params.bin").read_bytes()
    state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for p in manifest["params"]:
        raw = blob[p["offset"]:p["offset"] + p["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(p["dtype"])).reshape(p["shape"]).copy()
        state[p["name"]] = torch.from_numpy(arr)
    return Checkpoint(
        kind=manifest["kind"],
        network=NetworkSpec.from_dict(manifest["network"]),
        head=manifest["head"],
        state=state,
        seed=manifest["seed"],
        epoch=manifest["epoch"],
        metrics=manifest["metrics"],
    )


def build_modules(ckpt: Checkpoint) -> tuple[StageNetwork, nn.Module | None]:
    """Reconstruct the network (and head, if any) with the checkpoint's weights."""
    net = StageNetwork(ckpt.network, role=_ROLE[ckpt.kind])
    head: nn.Module | None
    if ckpt.head["type"] == "classifier":
        head = ClassifierHead(ckpt.head["classes"], ckpt.network.embedding_dim)
    elif ckpt.head["type"] == "regression":
        head = RegressionHead(ckpt.network.embedding_dim)
    elif ckpt.head["type"] == "none":
        head = None
    else:
        raise ConfigError(f"unknown head type {ckpt.head['type']!r}")
    net_state = {k[len("backbone."):]: v for k, v in ckpt.state.items()
                 if k.startswith("backbone.")}
    net.load_state_dict(net_state)
    if head is not None:
        head_state = {k[len("head."):]: v for k, v in ckpt.state.items()
                      if k.startswith("head.")}
        head.load_state_dict(head_state)
    return net, head


def embed_images(net: StageNetwork, images: np.ndarray, batch_size: int = 256
                 ) -> np.ndarray:
    """Embed a (N, C, H, W) float array in inference mode; returns (N, d) float32."""
    net.eval()
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            x = torch.from_numpy(np.ascontiguousarray(images[i:i + batch_size]))
            out.append(net(x).numpy())
    return np.concatenate(out, axis=0).astype(np.float32)

"""Stage-structured networks: teachers and student share the same skeleton.

A network is a composition of n residual stages followed by an embedding head
(global average pool + linear). Every stage boundary can be tapped, which is
what the distillation losses consume. Age-style networks additionally compute
a per-stage spatial gate (sigmoid of the channel mean) and multiply it back
into the stage output before the next stage sees it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, EmptyTailError, ShapeError

SOURCES = ("teacher_recognition", "teacher_age", "student")


@dataclass(frozen=True)
class StageSpec:
    in_channels: int
    out_channels: int
    stride: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.stride < 1:
            raise ConfigError(f"stage dims must be positive: {self}")


@dataclass(frozen=True)
class NetworkSpec:
    stages: tuple[StageSpec, ...]
    embedding_dim: int = 64
    attention_gated: bool = False
    attention_dropout: float = 0.0
    batch_norm: bool = True

    def __post_init__(self):
        if len(self.stages) < 2:
            raise ConfigError("a network needs at least 2 stages")
        if self.embedding_dim < 1:
            raise ConfigError("embedding_dim must be positive")
        for a, b in zip(self.stages, self.stages[1:]):
            if a.out_channels != b.in_channels:
                raise ConfigError(
                    f"stage channels do not chain: {a.out_channels} -> {b.in_channels}")
        if not (0.0 <= self.attention_dropout < 1.0):
            raise ConfigError("attention_dropout must lie in [0, 1)")

    @property
    def n(self) -> int:
        return len(self.stages)

    def to_dict(self) -> dict:
        return {
            "stages": [[s.in_channels, s.out_channels, s.stride] for s in self.stages],
            "embedding_dim": self.embedding_dim,
            "attention_gated": self.attention_gated,
            "attention_dropout": self.attention_dropout,
            "batch_norm": self.batch_norm,
        }

    @staticmethod
    def from_dict(d: dict) -> "NetworkSpec":
        return NetworkSpec(
            stages=tuple(StageSpec(*s) for s in d["stages"]),
            embedding_dim=d["embedding_dim"],
            attention_gated=d["attention_gated"],
            attention_dropout=d["attention_dropout"],
            batch_norm=d.get("batch_norm", True),
        )


def default_student_spec(gated: bool = True) -> NetworkSpec:
    """Lightweight 4-stage net on 1x32x32 input: channels 8/16/32/64."""
    return NetworkSpec(
        stages=(StageSpec(1, 8, 1), StageSpec(8, 16, 2),
                StageSpec(16, 32, 2), StageSpec(32, 64, 2)),
        embedding_dim=64,
        attention_gated=gated,
    )


def default_teacher_spec(gated: bool = False, attention_dropout: float = 0.0) -> NetworkSpec:
    """High-capacity counterpart: twice the channels per stage, same strides."""
    return NetworkSpec(
        stages=(StageSpec(1, 16, 1), StageSpec(16, 32, 2),
                StageSpec(32, 64, 2), StageSpec(64, 128, 2)),
        embedding_dim=64,
        attention_gated=gated,
        attention_dropout=attention_dropout,
    )


@dataclass
class StageFeature:
    """Activation block tapped at one stage boundary."""
    data: torch.Tensor  # (B, C, H, W)
    stage_index: int    # 1-based
    source: str

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}")
        if self.data.dim() != 4 or min(self.data.shape) < 1:
            raise ShapeError(f"stage feature must be (B, C, H, W), got {tuple(self.data.shape)}")


def pooled_gate(x: torch.Tensor, dropout_p: float = 0.0, training: bool = False) -> torch.Tensor:
    """Spatial attention map from a feature block: sigmoid of the channel mean.

    Dropout, when enabled, hits the pooled map before the sigmoid so the output
    range stays inside (0, 1) even in training.
    """
    pooled = x.mean(dim=-3)
    if training and dropout_p > 0.0:
        pooled = F.dropout(pooled, p=dropout_p, training=True)
    return torch.sigmoid(pooled)


class ResidualStage(nn.Module):
    """One stage: two 3x3 convs (optionally batch-normed) and a (projected) skip."""

    def __init__(self, spec: StageSpec, batch_norm: bool = True):
        super().__init__()
        c_in, c_out, stride = spec.in_channels, spec.out_channels, spec.stride
        norm = nn.BatchNorm2d if batch_norm else (lambda c: nn.Identity())
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1,
                               bias=not batch_norm)
        self.bn1 = norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=not batch_norm)
        self.bn2 = norm(c_out)
        if stride != 1 or c_in != c_out:
            self.skip = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), norm(c_out))
        else:
            self.skip = nn.Identity()

    def forward(self, x):
        out = F.silu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.silu(out + self.skip(x))


class EmbeddingHead(nn.Module):
    """Global average pool followed by a linear map to the embedding space."""

    def __init__(self, in_channels: int, embedding_dim: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, embedding_dim)

    def forward(self, x):
        return self.fc(x.mean(dim=(-2, -1)))


class TapResult(NamedTuple):
    features: list[StageFeature]
    attention: Optional[list[torch.Tensor]]  # gate maps (B, H, W), or None when ungated
    embeddings: torch.Tensor


class StageNetwork(nn.Module):
    def __init__(self, spec: NetworkSpec, role: str = "student"):
        super().__init__()
        if role not in SOURCES:
            raise ConfigError(f"unknown role {role!r}")
        self.spec = spec
        self.role = role
        self.stages = nn.ModuleList(ResidualStage(s, spec.batch_norm)
                                    for s in spec.stages)
        self.head = EmbeddingHead(spec.stages[-1].out_channels, spec.embedding_dim)

    def _run_stage(self, i: int, x: torch.Tensor) -> tuple[torch.Tensor, Optional[torch.Tensor]]:
        x = self.stages[i](x)
        if not self.spec.attention_gated:
            return x, None
        gate = pooled_gate(x, self.spec.attention_dropout, self.training)
        return x * gate.unsqueeze(-3), gate

    def forward_with_taps(self, batch: torch.Tensor) -> TapResult:
        if batch.dim() != 4 or batch.shape[1] != self.spec.stages[0].in_channels:
            raise ShapeError(
                f"expected (B, {self.spec.stages[0].in_channels}, H, W) input, "
                f"got {tuple(batch.shape)}")
        x = batch
        features, gates = [], []
        for i in range(self.spec.n):
            x, gate = self._run_stage(i, x)
            features.append(StageFeature(x, i + 1, self.role))
            gates.append(gate)
        emb = self.head(x)
        return TapResult(features, gates if self.spec.attention_gated else None, emb)

    def forward(self, batch: torch.Tensor) -> torch.Tensor:
        return self.forward_with_taps(batch).embeddings

    def tail(self, i: int) -> "TeacherTail":
        return TeacherTail(self, i)


class TeacherTail(nn.Module):
    """Composition of stages i+1..n plus the embedding head, sharing parameters.

    Feeding it the network's own stage-i feature reproduces the network's final
    embedding exactly (same modules, same mode).
    """

    def __init__(self, network: StageNetwork, start_index: int):
        super().__init__()
        n = network.spec.n
        if start_index == n:
            raise EmptyTailError(f"tail at stage {start_index} of {n} would be empty")
        if not (1 <= start_index < n):
            raise ConfigError(f"tail index must satisfy 1 <= i < {n}, got {start_index}")
        self.network = network
        self.start_index = start_index

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for i in range(self.start_index, self.network.spec.n):
            x, _ = self.network._run_stage(i, x)
        return self.network.head(x)


@dataclass(frozen=True)
class AdapterSpec:
    kind: str  # "identity" | "channel_projection"
    in_channels: int
    out_channels: int
    normalization: str = "none"  # "none" | "batch_norm"

    def __post_init__(self):
        if self.kind not in ("identity", "channel_projection"):
            raise ConfigError(f"unknown adapter kind {self.kind!r}")
        if self.normalization not in ("none", "batch_norm"):
            raise ConfigError(f"unknown normalization {self.normalization!r}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("adapter channels must be positive")
        if self.kind == "identity" and self.in_channels != self.out_channels:
            raise ConfigError(
                f"identity adapter requires equal channels, got "
                f"{self.in_channels} -> {self.out_channels}")


def make_adapter(spec: AdapterSpec) -> nn.Module:
    """Spatial-preserving feature adapter: identity, or 1x1 conv (+ batch norm)."""
    if spec.kind == "identity":
        return nn.Identity()
    layers: list[nn.Module] = [nn.Conv2d(spec.in_channels, spec.out_channels, 1, bias=False)]
    if spec.normalization == "batch_norm":
        layers.append(nn.BatchNorm2d(spec.out_channels))
    return nn.Sequential(*layers) if len(layers) > 1 else layers[0]


def make_embedding_adapter(in_dim: int, out_dim: int) -> nn.Module:
    """Vector-level counterpart used on the student's final embedding."""
    if in_dim == out_dim:
        return nn.Identity()
    return nn.Linear(in_dim, out_dim, bias=False)


class RegressionHead(nn.Module):
    """Scalar head on top of an embedding (age estimation)."""

    def __init__(self, embedding_dim: int):
        super().__init__()
        self.fc = nn.Linear(embedding_dim, 1)

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.fc(emb).squeeze(-1)


def parameter_checksum(module: nn.Module) -> str:
    """Stable hex digest over parameters and buffers, for frozen-teacher checks."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def seeded_generator(seed: int, tag: str) -> torch.Generator:
    """Independent torch RNG stream per (seed, purpose) pair."""
    import zlib

    g = torch.Generator()
    g.manual_seed((int(seed) * 0x9E3779B1 + zlib.crc32(tag.encode())) % (2 ** 63))
    return g


def init_parameters(module: nn.Module, generator: torch.Generator):
    """Re-initialize conv/linear weights from a dedicated RNG stream.

    Keeps initialization independent of module construction order elsewhere in
    the process, which is what makes degenerate-schedule runs bit-identical to
    their baseline counterparts.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (m.weight[0, 0].numel() if m.weight.dim() > 2 else 1)
            std = (2.0 / fan_in) ** 0.5
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * std)
                if m.bias is not None:
                    m.bias.zero_()
    return module

"""Spatial attention extraction, inversion and the attentive distillation loss.

The age teacher's per-stage gate maps highlight age-sensitive regions. Stage 1
is treated as a coarse foreground prior; for deeper stages the map is flipped
(1 - A) and gated by the downsampled prior, yielding an age-invariant map the
student's own gates are pulled toward.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import StageFeature, pooled_gate
from .errors import ConfigError, ShapeError

FLAVORS = ("age_sensitive", "age_invariant", "student")


@dataclass
class AttentionMap:
    """Per-position importance map in [0, 1]; data shape (..., H, W)."""
    data: torch.Tensor
    stage_index: int
    flavor: str

    def __post_init__(self):
        if self.flavor not in FLAVORS:
            raise ConfigError(f"unknown flavor {self.flavor!r}")
        if self.data.dim() < 2:
            raise ShapeError("attention map needs at least (H, W) dims")

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[-2], self.data.shape[-1]


def _map_data(m) -> torch.Tensor:
    return m.data if isinstance(m, AttentionMap) else m


_SOURCE_FLAVOR = {"teacher_age": "age_sensitive", "student": "student"}


def age_attention_map(feature: StageFeature, training: bool = False,
                      dropout_p: float = 0.2) -> AttentionMap:
    """Sigmoid of the channel mean of a stage feature.

    Dropout on the pooled map is an age-teacher training device only; it is
    never active during distillation.
    """
    if feature.source not in _SOURCE_FLAVOR:
        raise ConfigError(f"no attention flavor for source {feature.source!r}")
    data = pooled_gate(feature.data, dropout_p, training)
    return AttentionMap(data, feature.stage_index, _SOURCE_FLAVOR[feature.source])


def downsample_map(a: AttentionMap, target: tuple[int, int]) -> AttentionMap:
    """Non-overlapping window average pooling down to `target` (h, w)."""
    h, w = a.spatial
    th, tw = target
    if th < 1 or tw < 1 or h % th or w % tw:
        raise ShapeError(f"target {target} does not evenly divide source ({h}, {w})")
    if (th, tw) == (h, w):
        return AttentionMap(a.data.clone(), a.stage_index, a.flavor)
    x = a.data.reshape(-1, 1, h, w)
    pooled = F.avg_pool2d(x, kernel_size=(h // th, w // tw))
    return AttentionMap(pooled.reshape(*a.data.shape[:-2], th, tw),
                        a.stage_index, a.flavor)


def invert_attention(a_i: AttentionMap, a_1: AttentionMap) -> AttentionMap:
    """Age-invariant map for stage i > 1: downsampled stage-1 prior times (1 - A_i)."""
    if a_i.stage_index <= 1:
        raise ConfigError("inversion is defined for stages i > 1 only")
    prior = downsample_map(a_1, a_i.spatial)
    return AttentionMap(prior.data * (1.0 - a_i.data), a_i.stage_index, "age_invariant")


def apply_attention(feature: StageFeature, a: AttentionMap) -> StageFeature:
    """Multiply every channel of the feature by the map."""
    fh, fw = feature.data.shape[-2], feature.data.shape[-1]
    if (fh, fw) != a.spatial:
        raise ShapeError(f"spatial dims differ: feature ({fh}, {fw}) vs map {a.spatial}")
    return StageFeature(feature.data * a.data.unsqueeze(-3),
                        feature.stage_index, feature.source)


def attentive_distillation_loss(teacher_maps, student_maps) -> torch.Tensor:
    """Sum over stage pairs of the squared L2 distance between maps.

    Per-sample pixel sums are averaged over any leading batch dimension. Pairs
    must already share spatial dims (identity transforms at equal strides).
    """
    if len(teacher_maps) != len(student_maps):
        raise ShapeError(
            f"misaligned map lists: {len(teacher_maps)} vs {len(student_maps)}")
    if not teacher_maps:
        raise ShapeError("need at least one map pair")
    total = None
    for t, s in zip(teacher_maps, student_maps):
        td, sd = _map_data(t), _map_data(s)
        if td.shape[-2:] != sd.shape[-2:]:
            raise ShapeError(f"pair spatial dims differ: {tuple(td.shape[-2:])} "
                             f"vs {tuple(sd.shape[-2:])}")
        term = ((td - sd) ** 2).sum(dim=(-2, -1))
        total = term if total is None else total + term
    return total.mean()


def export_heatmap(a: AttentionMap, path, source_checkpoint: str = "") -> Path:
    """Write an 8-bit grayscale PNG (round(255*a)) plus a JSON sidecar record."""
    from PIL import Image

    data = a.data.detach().cpu().numpy()
    if data.ndim != 2:
        raise ShapeError("export one (H, W) map at a time")
    img = np.round(255.0 * np.clip(data, 0.0, 1.0)).astype(np.uint8)
    path = Path(path)
    Image.fromarray(img, mode="L").save(path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({
        "stage": a.stage_index,
        "flavor": a.flavor,
        "source_checkpoint": source_checkpoint,
    }, sort_keys=True, indent=1))
    return path


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two flattened arrays; 0.0 when either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0.0:
        return 0.0
    return float((a * b).sum() / denom)


def mask_correlations(maps: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Per-sample Pearson correlation between attention maps and binary masks.

    Masks are average-pooled to the map resolution first.
    """
    maps = np.asarray(maps, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    if maps.ndim != 3 or masks.ndim != 3 or maps.shape[0] != masks.shape[0]:
        raise ShapeError("expected (N, h, w) maps and (N, H, W) masks")
    n, h, w = maps.shape
    mh, mw = masks.shape[1:]
    if mh % h or mw % w:
        raise ShapeError(f"mask ({mh}, {mw}) not divisible by map ({h}, {w})")
    fh, fw = mh // h, mw // w
    pooled = masks.reshape(n, h, fh, w, fw).mean(axis=(2, 4))
    return np.array([pearson(maps[i], pooled[i]) for i in range(n)])

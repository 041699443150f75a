"""Training phases: recognition teacher, age teacher, student distillation.

Every phase is bit-reproducible from (config, seed): weights come from
dedicated RNG streams, batch order from another, so constructing optional
components (adapters, extra teachers) never perturbs the rest. Teachers stay
frozen during distillation; a parameter checksum guards that.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch

from . import attention
from .backbone import (AdapterSpec, NetworkSpec, RegressionHead, StageNetwork,
                       default_student_spec, default_teacher_spec, freeze,
                       init_parameters, make_adapter, make_embedding_adapter,
                       parameter_checksum, seeded_generator)
from .checkpoint import Checkpoint, build_modules, snapshot
from .datagen import SplitData
from .errors import ConfigError, DivergenceError
from .losses import (ClassifierHead, LambdaSchedule, MODES,
                     angular_distillation_loss, intermediate_angular_loss,
                     l2_distillation_loss, softmax_classification_loss,
                     total_loss)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 20
    learning_rate: float = 0.05
    lr_decay_epochs: tuple[int, ...] | None = None  # None -> decay at 60% and 85%
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    mode: str = "AAD"
    lambda_n: float = 1.0
    lambda_intermediate: tuple[float, ...] | None = None  # None -> halving from lambda_n
    lambda_attention: float = 0.1
    normalized_softmax: bool = True
    softmax_scale: float = 16.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must lie in [0, 1)")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.lambda_n < 0 or self.lambda_attention < 0:
            raise ConfigError("lambda weights must be nonnegative")

    def schedule(self, n: int) -> LambdaSchedule:
        if self.lambda_intermediate is not None:
            if len(self.lambda_intermediate) != n - 1:
                raise ConfigError(f"need {n - 1} intermediate lambdas")
            return LambdaSchedule(self.lambda_n, tuple(self.lambda_intermediate),
                                  self.lambda_attention)
        return LambdaSchedule.from_final(self.lambda_n, n, self.lambda_attention)

    def decay_epochs(self) -> tuple[int, ...]:
        if self.lr_decay_epochs is not None:
            return tuple(self.lr_decay_epochs)
        if self.epochs < 3:
            return ()
        return (max(1, int(self.epochs * 0.6)), max(2, int(self.epochs * 0.85)))

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for d in self.decay_epochs():
            if epoch >= d:
                lr *= self.lr_decay_factor
        return lr


def config_for_mode(mode: str, **overrides) -> TrainConfig:
    """Mode defaults: angular students weight the final term 1, the l2 baseline 0.001."""
    values = {"mode": mode}
    if mode == "l2":
        values["lambda_n"] = 0.001
    values.update(overrides)
    return TrainConfig(**values)


def lambda_schedule(lambda_n: float, n: int, lambda_attention: float = 0.1
                    ) -> LambdaSchedule:
    """Halving weights toward the final stage: lambda_i = lambda_{i+1} / 2."""
    return LambdaSchedule.from_final(lambda_n, n, lambda_attention)


class LossLog:
    """Append-only structured training log; one JSON record per step."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self._fh = open(path, "a") if path else None

    def append(self, record: dict):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _label_index(identities: np.ndarray) -> tuple[np.ndarray, int]:
    classes = np.unique(identities)
    return np.searchsorted(classes, identities), len(classes)


def _epoch_batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _f(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _check_finite(loss: torch.Tensor, step: int, terms: dict):
    if not torch.isfinite(loss):
        raise DivergenceError(
            f"non-finite loss at step {step}: total={_f(loss)} terms={terms}")


def _train_top1(net: StageNetwork, head: ClassifierHead, images: torch.Tensor,
                labels: torch.Tensor, config: TrainConfig) -> float:
    net.eval()
    correct = 0
    with torch.no_grad():
        for i in range(0, len(images), 256):
            logits = head.logits(net(images[i:i + 256]),
                                 config.normalized_softmax, config.softmax_scale)
            correct += int((logits.argmax(dim=1) == labels[i:i + 256]).sum())
    return correct / len(images)


def train_recognition_teacher(split: SplitData, config: TrainConfig,
                              spec: NetworkSpec | None = None,
                              log_path=None) -> tuple[Checkpoint, list[dict]]:
    spec = spec or default_teacher_spec()
    torch.manual_seed(config.seed)
    net = init_parameters(StageNetwork(spec, role="teacher_recognition"),
                          seeded_generator(config.seed, "teacher_r.backbone"))
    labels_np, n_classes = _label_index(split.identities)
    head = init_parameters(ClassifierHead(n_classes, spec.embedding_dim),
                           seeded_generator(config.seed, "teacher_r.head"))
    images = torch.from_numpy(split.images)
    labels = torch.from_numpy(labels_np)
    data_gen = seeded_generator(config.seed, "teacher_r.data")
    opt = torch.optim.SGD(list(net.parameters()) + list(head.parameters()),
                          lr=config.learning_rate, momentum=config.momentum)
    log = LossLog(log_path)
    step = 0
    for epoch in range(config.epochs):
        net.train()
        for g in opt.param_groups:
            g["lr"] = config.lr_at(epoch)
        for idx in _epoch_batches(len(images), config.batch_size, data_gen):
            opt.zero_grad()
            loss = softmax_classification_loss(
                net(images[idx]), labels[idx], head,
                config.normalized_softmax, config.softmax_scale)
            _check_finite(loss, step, {"classification": _f(loss)})
            loss.backward()
            opt.step()
            log.append({"step": step, "epoch": epoch,
                        "terms": {"classification": _f(loss)},
                        "weights": {"classification": 1.0},
                        "total": _f(loss)})
            step += 1
    top1 = _train_top1(net, head, images, labels, config)
    log.close()
    ckpt = snapshot("recognition_teacher", net, head,
                    {"type": "classifier", "classes": n_classes},
                    config.seed, config.epochs, {"train_top1": top1})
    return ckpt, log.records


def train_age_teacher(split: SplitData, config: TrainConfig,
                      spec: NetworkSpec | None = None,
                      log_path=None) -> tuple[Checkpoint, list[dict]]:
    spec = spec or default_teacher_spec(gated=True, attention_dropout=0.2)
    torch.manual_seed(config.seed + 1)
    net = init_parameters(StageNetwork(spec, role="teacher_age"),
                          seeded_generator(config.seed, "teacher_a.backbone"))
    head = init_parameters(RegressionHead(spec.embedding_dim),
                           seeded_generator(config.seed, "teacher_a.head"))
    images = torch.from_numpy(split.images)
    ages = torch.from_numpy(split.ages)
    data_gen = seeded_generator(config.seed, "teacher_a.data")
    opt = torch.optim.SGD(list(net.parameters()) + list(head.parameters()),
                          lr=config.learning_rate, momentum=config.momentum)
    log = LossLog(log_path)
    step = 0
    for epoch in range(config.epochs):
        net.train()
        for g in opt.param_groups:
            g["lr"] = config.lr_at(epoch)
        for idx in _epoch_batches(len(images), config.batch_size, data_gen):
            opt.zero_grad()
            loss = ((head(net(images[idx])) - ages[idx]) ** 2).mean()
            _check_finite(loss, step, {"age_mse": _f(loss)})
            loss.backward()
            opt.step()
            log.append({"step": step, "epoch": epoch,
                        "terms": {"age_mse": _f(loss)},
                        "weights": {"age_mse": 1.0},
                        "total": _f(loss)})
            step += 1
    net.eval()
    with torch.no_grad():
        preds = torch.cat([head(net(images[i:i + 256]))
                           for i in range(0, len(images), 256)])
    mae = float((preds - ages).abs().mean())
    log.close()
    ckpt = snapshot("age_teacher", net, head, {"type": "regression"},
                    config.seed, config.epochs, {"age_mae": mae})
    return ckpt, log.records


def _inverted_teacher_maps(gates: list[torch.Tensor]) -> list[attention.AttentionMap]:
    """Age-invariant maps for stages 2..n from the age teacher's raw gate maps."""
    a1 = attention.AttentionMap(gates[0], 1, "age_sensitive")
    out = []
    for i, g in enumerate(gates[1:], start=2):
        a_i = attention.AttentionMap(g, i, "age_sensitive")
        out.append(attention.invert_attention(a_i, a1))
    return out


def train_student(split: SplitData, teacher_r: Checkpoint,
                  teacher_a: Checkpoint | None, config: TrainConfig,
                  spec: NetworkSpec | None = None,
                  log_path=None) -> tuple[Checkpoint, list[dict]]:
    """Distill a student in one of the four modes (self / l2 / AD / AAD)."""
    spec = spec or default_student_spec(gated=True)
    mode = config.mode
    if mode == "AAD" and teacher_a is None:
        raise ConfigError("mode AAD requires an age teacher")
    torch.manual_seed(config.seed + 2)

    t_net, _ = build_modules(teacher_r)
    freeze(t_net)
    t_sum = parameter_checksum(t_net)
    a_net = None
    a_sum = None
    if teacher_a is not None:
        a_net, _ = build_modules(teacher_a)
        freeze(a_net)
        a_sum = parameter_checksum(a_net)

    student = init_parameters(StageNetwork(spec, role="student"),
                              seeded_generator(config.seed, "student.backbone"))
    labels_np, n_classes = _label_index(split.identities)
    head = init_parameters(ClassifierHead(n_classes, spec.embedding_dim),
                           seeded_generator(config.seed, "student.head"))

    # Dimension-matching scaffolding, trained with the student and dropped at
    # inference. Built in every mode so RNG consumption is mode-independent.
    n = spec.n
    stage_adapters = torch.nn.ModuleList([
        make_adapter(AdapterSpec("channel_projection",
                                 spec.stages[i].out_channels,
                                 teacher_r.network.stages[i].out_channels,
                                 normalization="batch_norm"))
        for i in range(n - 1)])
    init_parameters(stage_adapters, seeded_generator(config.seed, "student.adapters"))
    emb_adapter = init_parameters(
        make_embedding_adapter(spec.embedding_dim, teacher_r.network.embedding_dim),
        seeded_generator(config.seed, "student.emb_adapter"))
    tails = [t_net.tail(i) for i in range(1, n)]

    schedule = config.schedule(n)
    weights = {"classification": 1.0}
    if mode == "l2":
        weights["l2"] = schedule.lambda_n
    elif mode in ("AD", "AAD"):
        for i, lam in enumerate(schedule.lambda_intermediate, start=1):
            weights[f"angular_stage_{i}"] = lam
        weights["angular_final"] = schedule.lambda_n
        if mode == "AAD":
            weights["attention"] = schedule.lambda_attention

    images = torch.from_numpy(split.images)
    labels = torch.from_numpy(labels_np)
    data_gen = seeded_generator(config.seed, "student.data")
    params = (list(student.parameters()) + list(head.parameters())
              + list(stage_adapters.parameters()) + list(emb_adapter.parameters()))
    opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    log = LossLog(log_path)
    step = 0
    for epoch in range(config.epochs):
        student.train()
        stage_adapters.train()
        for g in opt.param_groups:
            g["lr"] = config.lr_at(epoch)
        for idx in _epoch_batches(len(images), config.batch_size, data_gen):
            opt.zero_grad()
            x = images[idx]
            s_taps = student.forward_with_taps(x)
            raw = {"classification": softmax_classification_loss(
                s_taps.embeddings, labels[idx], head,
                config.normalized_softmax, config.softmax_scale)}
            terms = {"classification": raw["classification"]}
            if mode != "self":
                with torch.no_grad():
                    t_taps = t_net.forward_with_taps(x)
            if mode == "l2":
                terms["l2"] = l2_distillation_loss(
                    t_taps.embeddings, emb_adapter(s_taps.embeddings))
                raw["l2"] = terms["l2"]
            elif mode in ("AD", "AAD"):
                inter = [intermediate_angular_loss(
                    t_taps.features[i], s_taps.features[i],
                    stage_adapters[i], tails[i]) for i in range(n - 1)]
                terms["angular_intermediate"] = inter
                for i, v in enumerate(inter, start=1):
                    raw[f"angular_stage_{i}"] = v
                terms["angular_final"] = angular_distillation_loss(
                    t_taps.embeddings, emb_adapter(s_taps.embeddings))
                raw["angular_final"] = terms["angular_final"]
                if mode == "AAD":
                    with torch.no_grad():
                        a_taps = a_net.forward_with_taps(x)
                    terms["attention"] = attention.attentive_distillation_loss(
                        _inverted_teacher_maps(a_taps.attention),
                        s_taps.attention[1:])
                    raw["attention"] = terms["attention"]
            loss, breakdown = total_loss(terms, schedule, mode)
            _check_finite(loss, step, breakdown)
            loss.backward()
            opt.step()
            logged_terms = {k: _f(v) for k, v in raw.items()}
            log.append({"step": step, "epoch": epoch,
                        "terms": logged_terms,
                        "weights": weights,
                        "total": sum(weights[k] * v for k, v in logged_terms.items())})
            step += 1

    if parameter_checksum(t_net) != t_sum:
        raise RuntimeError("recognition teacher parameters changed during distillation")
    if a_net is not None and parameter_checksum(a_net) != a_sum:
        raise RuntimeError("age teacher parameters changed during distillation")
    top1 = _train_top1(student, head, images, labels, config)
    log.close()
    ckpt = snapshot("student", student, head,
                    {"type": "classifier", "classes": n_classes},
                    config.seed, config.epochs,
                    {"train_top1": top1, "mode": mode})
    return ckpt, log.records


def verify_log_conservation(records: list[dict], tol: float = 1e-9) -> bool:
    """Check that every logged total equals the weighted sum of its terms."""
    for r in records:
        s = sum(r["weights"][k] * v for k, v in r["terms"].items())
        if abs(s - r["total"]) > tol:
            return False
    return True

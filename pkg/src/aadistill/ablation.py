"""End-to-end ablation: four students per seed, shared data and teachers.

Row structure mirrors the usual distillation comparison: a self-studied
baseline, an l2-guided student, and the angular / attentive-angular students,
evaluated with all three open-set protocols plus age-gap-stratified
verification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field, replace
from pathlib import Path

import numpy as np

from . import datagen, evalproto
from .checkpoint import build_modules, embed_images, save_checkpoint
from .trainer import TrainConfig, config_for_mode, train_age_teacher, \
    train_recognition_teacher, train_student

MODES = ("self", "l2", "AD", "AAD")


@dataclass(frozen=True)
class AblationConfig:
    """Reference configuration: 100/50/20 identities, 3 seeds, 4 student modes."""
    out: str = "ablation_out"
    seeds: tuple[int, ...] = (0, 1, 2)
    recognition_identities: int = 100
    age_identities: int = 50
    eval_identities: int = 20
    samples_per_identity: int = 20
    eval_samples_per_identity: int = 32
    teacher_epochs: int = 20
    age_teacher_epochs: int = 30
    student_epochs: int = 6
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    lambda_attention: float = 0.02
    distractors: int = 300
    eval_folds: int = 10
    max_pairs_per_bucket: int | None = None


def _teacher_config(cfg: AblationConfig, seed: int, epochs: int) -> TrainConfig:
    return TrainConfig(batch_size=cfg.batch_size, epochs=epochs,
                       learning_rate=cfg.learning_rate, momentum=cfg.momentum,
                       seed=seed, mode="self")


def _student_config(cfg: AblationConfig, seed: int, mode: str) -> TrainConfig:
    return config_for_mode(mode, batch_size=cfg.batch_size,
                           epochs=cfg.student_epochs,
                           learning_rate=cfg.learning_rate,
                           momentum=cfg.momentum, seed=seed,
                           lambda_attention=cfg.lambda_attention)


def make_distractors(seed: int, count: int) -> tuple[np.ndarray, np.ndarray]:
    """Fresh single-sample identities from a reserved id block, plus their ages."""
    images = np.zeros((count, 1, datagen.IMAGE_SIZE, datagen.IMAGE_SIZE),
                      dtype=np.float32)
    ages = np.zeros(count, dtype=np.float32)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 901]))
    for i in range(count):
        age = float(rng.uniform(0.0, 1.0))
        images[i, 0], _ = datagen.render_sample(seed, 1_000_000 + i, 0, age)
        ages[i] = age
    return images, ages


def evaluate_embedder(embed, eval_split: datagen.SplitData, seed: int,
                      distractor_images: np.ndarray | None = None,
                      folds: int = 10, max_pairs_per_bucket: int | None = 400
                      ) -> dict:
    """Run all protocols for one embedding function over the eval split.

    `embed` maps an (N, 1, H, W) float32 array to (N, d) embeddings.
    """
    emb = embed(eval_split.images)
    ids = eval_split.identities
    ages = eval_split.ages
    pairs = evalproto.make_verification_pairs(ids, ages, seed,
                                              max_pairs_per_bucket=max_pairs_per_bucket)
    overall = evalproto.verify_10fold(pairs, emb, folds)
    buckets = evalproto.verify_by_age_gap(pairs, emb, folds)
    loo = evalproto.rank1_loo(emb, ids)

    # Identification: youngest sample of each identity probes a gallery of the
    # oldest samples, against the distractor pool.
    probe_rows, gallery_rows = [], []
    for ident in np.unique(ids):
        idx = np.flatnonzero(ids == ident)
        by_age = idx[np.argsort(ages[idx], kind="stable")]
        probe_rows.append(int(by_age[0]))
        gallery_rows.append(int(by_age[-1]))
    if distractor_images is not None and len(distractor_images):
        d_emb = embed(distractor_images)
    else:
        d_emb = np.zeros((0, emb.shape[1]), dtype=emb.dtype)
    dist = evalproto.rank1_distractors(
        emb[probe_rows], ids[probe_rows], emb[gallery_rows], ids[gallery_rows], d_emb)

    out = {
        "verification": overall.to_record(),
        "verification_by_gap": {b: r.to_record() for b, r in buckets.items()},
        "rank1_loo": loo.to_record(),
        "rank1_distractors": dist.to_record(),
    }
    return out


def checkpoint_embedder(ckpt):
    net, _ = build_modules(ckpt)
    return lambda images: embed_images(net, images)


def run_ablation(cfg: AblationConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    results: dict = {"config": asdict(cfg), "seeds": {}}
    for seed in cfg.seeds:
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(exist_ok=True)
        manifests = datagen.default_manifests(
            seed, cfg.recognition_identities, cfg.age_identities,
            cfg.eval_identities, cfg.samples_per_identity)
        splits = datagen.build_dataset(manifests, seed_dir / "data")
        recog = splits["recognition_train"]
        age = splits["age_train"]
        eval_split = splits["eval"]

        t_ckpt, _ = train_recognition_teacher(
            recog, _teacher_config(cfg, seed, cfg.teacher_epochs),
            log_path=seed_dir / "teacher_r.log.jsonl")
        save_checkpoint(t_ckpt, seed_dir / "teacher_r")
        a_ckpt, _ = train_age_teacher(
            age, _teacher_config(cfg, seed, cfg.age_teacher_epochs),
            log_path=seed_dir / "teacher_a.log.jsonl")
        save_checkpoint(a_ckpt, seed_dir / "teacher_a")

        distractor_images, _ = make_distractors(seed, cfg.distractors)
        seed_result = {
            "teacher_train_top1": t_ckpt.metrics["train_top1"],
            "age_teacher_mae": a_ckpt.metrics["age_mae"],
            "modes": {},
        }
        seed_result["teacher_eval"] = evaluate_embedder(
            checkpoint_embedder(t_ckpt), eval_split, seed, distractor_images,
            cfg.eval_folds, cfg.max_pairs_per_bucket)
        for mode in MODES:
            s_ckpt, _ = train_student(
                recog, t_ckpt, a_ckpt if mode == "AAD" else None,
                _student_config(cfg, seed, mode),
                log_path=seed_dir / f"student_{mode}.log.jsonl")
            save_checkpoint(s_ckpt, seed_dir / f"student_{mode}")
            seed_result["modes"][mode] = evaluate_embedder(
                checkpoint_embedder(s_ckpt), eval_split, seed, distractor_images,
                cfg.eval_folds, cfg.max_pairs_per_bucket)
        results["seeds"][str(seed)] = seed_result

    results["summary"] = summarize(results)
    (out / "ablation.json").write_text(json.dumps(results, sort_keys=True, indent=1))
    (out / "ablation.txt").write_text(format_table(results))
    return results


def _metric(entry: dict, key: str) -> float:
    if key == "verify_all":
        return entry["verification"]["accuracy"]
    if key.startswith("verify_"):
        bucket = key.split("_", 1)[1]
        rec = entry["verification_by_gap"].get(bucket)
        return rec["accuracy"] if rec else float("nan")
    if key == "loo":
        return entry["rank1_loo"]["accuracy"]
    if key == "distractors":
        return entry["rank1_distractors"]["accuracy"]
    raise KeyError(key)


METRICS = ("verify_all", "verify_low", "verify_mid", "verify_high",
           "loo", "distractors")


def summarize(results: dict) -> dict:
    """Per-mode metric means over seeds, plus the per-seed values."""
    summary: dict = {}
    rows = ("teacher",) + MODES
    for row in rows:
        summary[row] = {}
        for metric in METRICS:
            vals = []
            for seed_result in results["seeds"].values():
                entry = (seed_result["teacher_eval"] if row == "teacher"
                         else seed_result["modes"][row])
                vals.append(_metric(entry, metric))
            summary[row][metric] = {"mean": float(np.mean(vals)), "per_seed": vals}
    return summary


def format_table(results: dict) -> str:
    summary = results["summary"]
    header = f"{'model':<10}" + "".join(f"{m:>14}" for m in METRICS)
    lines = [header, "-" * len(header)]
    for row in ("teacher",) + MODES:
        cells = "".join(f"{summary[row][m]['mean']:>14.4f}" for m in METRICS)
        lines.append(f"{row:<10}" + cells)
    return "\n".join(lines) + "\n"

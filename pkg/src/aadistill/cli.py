"""Single command-line entry point.

Subcommands: gen-data, train (teacher-r / teacher-a / student), eval,
heatmaps, ablation. Every parameter can come from a JSON config file
(--config); explicit flags win over file values. Exit codes: 0 success,
2 usage/config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import attention, datagen, evalproto
from .ablation import AblationConfig, evaluate_embedder, make_distractors, run_ablation
from .checkpoint import build_modules, embed_images, load_checkpoint, save_checkpoint
from .errors import ConfigError
from .trainer import TrainConfig, train_age_teacher, train_recognition_teacher, \
    train_student

USAGE_EXIT = 2
FAILURE_EXIT = 1


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _merge(file_values: dict, args: argparse.Namespace, allowed: set[str]) -> dict:
    unknown = set(file_values) - allowed
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    merged = dict(file_values)
    for key in allowed:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


_TRAIN_KEYS = {"batch_size", "epochs", "learning_rate", "momentum", "seed",
               "mode", "lambda_n", "lambda_attention", "normalized_softmax",
               "softmax_scale"}


def _train_config(merged: dict) -> TrainConfig:
    fields = {k: v for k, v in merged.items() if k in _TRAIN_KEYS}
    if merged.get("mode") == "l2" and "lambda_n" not in merged:
        fields["lambda_n"] = 0.001
    return TrainConfig(**fields)


def cmd_gen_data(args) -> int:
    allowed = {"out", "seed", "recognition_identities", "age_identities",
               "eval_identities", "samples_per_identity"}
    merged = _merge(_load_config_file(args.config), args, allowed)
    if "out" not in merged:
        raise ConfigError("gen-data needs --out")
    merged.setdefault("seed", 0)
    manifests = datagen.default_manifests(
        merged["seed"],
        merged.get("recognition_identities", 100),
        merged.get("age_identities", 50),
        merged.get("eval_identities", 20),
        merged.get("samples_per_identity", 20))
    splits = datagen.build_dataset(manifests, merged["out"])
    for name, split in splits.items():
        print(f"{name}: {split.manifest.identities} identities x "
              f"{split.manifest.samples_per_identity} samples")
    print(f"archive written to {merged['out']}")
    return 0


def cmd_train(args) -> int:
    allowed = _TRAIN_KEYS | {"data", "out", "teacher_r", "teacher_a", "log"}
    merged = _merge(_load_config_file(args.config), args, allowed)
    for key in ("data", "out"):
        if key not in merged:
            raise ConfigError(f"train needs --{key}")
    config = _train_config(merged)
    log_path = merged.get("log")
    if args.phase == "teacher-r":
        split = datagen.load_split(merged["data"], "recognition_train")
        ckpt, _ = train_recognition_teacher(split, config, log_path=log_path)
        print(f"train top-1: {ckpt.metrics['train_top1']:.4f}")
    elif args.phase == "teacher-a":
        split = datagen.load_split(merged["data"], "age_train")
        ckpt, _ = train_age_teacher(split, config, log_path=log_path)
        print(f"train age MAE: {ckpt.metrics['age_mae']:.4f}")
    else:
        if "teacher_r" not in merged:
            raise ConfigError("train student needs --teacher-r")
        split = datagen.load_split(merged["data"], "recognition_train")
        teacher_r = load_checkpoint(merged["teacher_r"])
        teacher_a = load_checkpoint(merged["teacher_a"]) if merged.get("teacher_a") \
            else None
        ckpt, _ = train_student(split, teacher_r, teacher_a, config,
                                log_path=log_path)
        print(f"mode {config.mode}; train top-1: {ckpt.metrics['train_top1']:.4f}")
    save_checkpoint(ckpt, merged["out"])
    print(f"checkpoint written to {merged['out']}")
    return 0


def _raw_pixel_embedder(images: np.ndarray) -> np.ndarray:
    return images.reshape(len(images), -1).astype(np.float32)


def cmd_eval(args) -> int:
    allowed = {"data", "checkpoint", "raw_pixels", "out", "seed", "distractors",
               "folds"}
    merged = _merge(_load_config_file(args.config), args, allowed)
    for key in ("data", "out"):
        if key not in merged:
            raise ConfigError(f"eval needs --{key}")
    if not merged.get("raw_pixels") and "checkpoint" not in merged:
        raise ConfigError("eval needs --checkpoint (or --raw-pixels)")
    merged.setdefault("seed", 0)
    eval_split = datagen.load_split(merged["data"], "eval")
    if merged.get("raw_pixels"):
        embed = _raw_pixel_embedder
        source = "raw_pixels"
    else:
        net, _ = build_modules(load_checkpoint(merged["checkpoint"]))
        embed = lambda images: embed_images(net, images)
        source = str(merged["checkpoint"])
    distractor_images, _ = make_distractors(merged["seed"],
                                            merged.get("distractors", 500))
    result = evaluate_embedder(embed, eval_split, merged["seed"],
                               distractor_images, merged.get("folds", 10))
    out = Path(merged["out"])
    out.mkdir(parents=True, exist_ok=True)
    evalproto.save_embeddings(out / "embeddings", embed(eval_split.images),
                              eval_split.identities, eval_split.ages, source)
    records = [result["verification"], result["rank1_loo"],
               result["rank1_distractors"]]
    records += [dict(r, bucket=b) for b, r in result["verification_by_gap"].items()]
    with open(out / "report.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"verification: {result['verification']['accuracy']:.4f}")
    for bucket, rec in result["verification_by_gap"].items():
        print(f"verification[{bucket} gap]: {rec['accuracy']:.4f}")
    print(f"rank-1 LOO: {result['rank1_loo']['accuracy']:.4f}")
    print(f"rank-1 w/ distractors: {result['rank1_distractors']['accuracy']:.4f}")
    print(f"report written to {out / 'report.jsonl'}")
    return 0


def cmd_heatmaps(args) -> int:
    allowed = {"data", "checkpoint", "out", "samples", "stages", "flavors"}
    merged = _merge(_load_config_file(args.config), args, allowed)
    for key in ("data", "checkpoint", "out"):
        if key not in merged:
            raise ConfigError(f"heatmaps needs --{key}")
    ckpt = load_checkpoint(merged["checkpoint"])
    if not ckpt.network.attention_gated:
        raise ConfigError("heatmaps need an attention-gated checkpoint "
                          "(age teacher or student)")
    net, _ = build_modules(ckpt)
    net.eval()
    eval_split = datagen.load_split(merged["data"], "eval")
    samples = _parse_ints(merged.get("samples", "0,1,2"))
    stages = _parse_ints(merged.get("stages", "1,2,3,4"))
    default_flavors = ("age_sensitive,age_invariant" if ckpt.kind == "age_teacher"
                       else "student")
    flavors = str(merged.get("flavors", default_flavors)).split(",")
    out = Path(merged["out"])
    out.mkdir(parents=True, exist_ok=True)
    import torch
    count = 0
    with torch.no_grad():
        for s in samples:
            taps = net.forward_with_taps(torch.from_numpy(eval_split.images[s:s + 1]))
            gates = [g[0] for g in taps.attention]
            flavor = "age_sensitive" if ckpt.kind == "age_teacher" else "student"
            by_stage = {i + 1: attention.AttentionMap(g, i + 1, flavor)
                        for i, g in enumerate(gates)}
            for i in stages:
                if flavor in flavors:
                    attention.export_heatmap(
                        by_stage[i], out / f"sample{s}_stage{i}_{flavor}.png",
                        str(merged["checkpoint"]))
                    count += 1
                if "age_invariant" in flavors and i > 1 and ckpt.kind == "age_teacher":
                    inv = attention.invert_attention(by_stage[i], by_stage[1])
                    attention.export_heatmap(
                        inv, out / f"sample{s}_stage{i}_age_invariant.png",
                        str(merged["checkpoint"]))
                    count += 1
    print(f"{count} heatmaps written to {out}")
    return 0


def cmd_ablation(args) -> int:
    allowed = {f.name for f in AblationConfig.__dataclass_fields__.values()}
    merged = _merge(_load_config_file(args.config), args, allowed)
    if "out" not in merged:
        raise ConfigError("ablation needs --out")
    if getattr(args, "seed", None) is not None and "seeds" not in merged:
        merged["seeds"] = [args.seed]
    if "seeds" in merged:
        merged["seeds"] = tuple(_parse_ints(merged["seeds"]))
    cfg = AblationConfig(**merged)
    results = run_ablation(cfg)
    print((Path(cfg.out) / "ablation.txt").read_text())
    print(f"full results in {Path(cfg.out) / 'ablation.json'}")
    return 0


def _parse_ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    try:
        return [int(t) for t in str(text).split(",") if t != ""]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aadistill",
        description="Dual-teacher angular/attentive distillation on synthetic "
                    "aged glyphs.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")

    p = sub.add_parser("gen-data", help="generate the synthetic dataset archive")
    common(p)
    p.add_argument("--recognition-identities", type=int, dest="recognition_identities")
    p.add_argument("--age-identities", type=int, dest="age_identities")
    p.add_argument("--eval-identities", type=int, dest="eval_identities")
    p.add_argument("--samples-per-identity", type=int, dest="samples_per_identity")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a teacher or distill a student")
    p.add_argument("phase", choices=["teacher-r", "teacher-a", "student"])
    common(p)
    p.add_argument("--data")
    p.add_argument("--log")
    p.add_argument("--teacher-r", dest="teacher_r")
    p.add_argument("--teacher-a", dest="teacher_a")
    p.add_argument("--mode", choices=["self", "l2", "AD", "AAD"])
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--lambda-n", type=float, dest="lambda_n")
    p.add_argument("--lambda-attention", type=float, dest="lambda_attention")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run the three protocols on the eval split")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--raw-pixels", action="store_const", const=True,
                   dest="raw_pixels", default=None)
    p.add_argument("--distractors", type=int)
    p.add_argument("--folds", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmaps", help="export attention maps as PNGs")
    common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--samples")
    p.add_argument("--stages")
    p.add_argument("--flavors")
    p.set_defaults(func=cmd_heatmaps)

    p = sub.add_parser("ablation", help="train and compare all four student modes")
    common(p)
    p.add_argument("--seeds")
    p.add_argument("--recognition-identities", type=int, dest="recognition_identities")
    p.add_argument("--age-identities", type=int, dest="age_identities")
    p.add_argument("--eval-identities", type=int, dest="eval_identities")
    p.add_argument("--samples-per-identity", type=int, dest="samples_per_identity")
    p.add_argument("--teacher-epochs", type=int, dest="teacher_epochs")
    p.add_argument("--age-teacher-epochs", type=int, dest="age_teacher_epochs")
    p.add_argument("--student-epochs", type=int, dest="student_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--lambda-attention", type=float, dest="lambda_attention")
    p.add_argument("--distractors", type=int)
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return USAGE_EXIT
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"failed: {e}", file=sys.stderr)
        return FAILURE_EXIT


if __name__ == "__main__":
    sys.exit(main())

"""Dual-teacher angular/attentive distillation with open-set evaluation."""

from .backbone import (AdapterSpec, NetworkSpec, StageFeature, StageNetwork,
                       StageSpec, default_student_spec, default_teacher_spec,
                       make_adapter)
from .attention import AttentionMap, age_attention_map, apply_attention, \
    attentive_distillation_loss, downsample_map, invert_attention
from .losses import (ClassifierHead, LambdaSchedule, angular_distillation_loss,
                     intermediate_angular_loss, l2_distillation_loss,
                     softmax_classification_loss, total_loss)
from .trainer import TrainConfig, lambda_schedule, train_age_teacher, \
    train_recognition_teacher, train_student
from .evalproto import (EvalReport, VerificationPair, cosine_similarity,
                        make_verification_pairs, rank1_distractors, rank1_loo,
                        verify_10fold)

__all__ = [
    "AdapterSpec", "AttentionMap", "ClassifierHead", "EvalReport",
    "LambdaSchedule", "NetworkSpec", "StageFeature", "StageNetwork",
    "StageSpec", "TrainConfig", "VerificationPair", "age_attention_map",
    "angular_distillation_loss", "apply_attention",
    "attentive_distillation_loss", "cosine_similarity", "default_student_spec",
    "default_teacher_spec", "downsample_map", "intermediate_angular_loss",
    "invert_attention", "l2_distillation_loss", "lambda_schedule",
    "make_adapter", "make_verification_pairs", "rank1_distractors",
    "rank1_loo", "softmax_classification_loss", "total_loss",
    "train_age_teacher", "train_recognition_teacher", "train_student",
    "verify_10fold",
]

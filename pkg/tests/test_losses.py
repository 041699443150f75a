import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from aadistill.backbone import (AdapterSpec, NetworkSpec, StageNetwork, StageSpec,
                                make_adapter)
from aadistill.errors import ConfigError, DegenerateInputError, ShapeError
from aadistill.losses import (ClassifierHead, LambdaSchedule,
                              angular_distillation_loss, intermediate_angular_loss,
                              l2_distillation_loss, softmax_classification_loss,
                              total_loss)
from conftest import check_gradient


def softmax_nll_oracle(logits, label):
    """Independent direct softmax evaluation (log-sum-exp in float64)."""
    logits = np.asarray(logits, dtype=np.float64)
    m = logits.max()
    return float(-(logits[label] - m) + math.log(np.exp(logits - m).sum()))


def head_with_weights(w):
    head = ClassifierHead(w.shape[0], w.shape[1])
    with torch.no_grad():
        head.linear.weight.copy_(torch.as_tensor(w, dtype=head.weight.dtype))
    return head


class TestSoftmaxClassification:
    def test_forced_logits_match_direct_softmax_oracle(self):
        # W = I, embedding [1, 0] -> logits [1, 0], true class 0
        head = head_with_weights(np.eye(2, dtype=np.float32))
        emb = torch.tensor([[1.0, 0.0]])
        loss = softmax_classification_loss(emb, torch.tensor([0]), head,
                                           normalized=False)
        expected = softmax_nll_oracle([1.0, 0.0], 0)
        assert abs(float(loss) - expected) < 1e-6
        assert abs(expected - (-math.log(math.e / (math.e + 1)))) < 1e-12

    def test_uniform_logits_give_log_c(self):
        for c in (2, 5, 9):
            head = head_with_weights(np.zeros((c, 4), dtype=np.float32))
            emb = torch.randn(3, 4)
            loss = softmax_classification_loss(emb, torch.tensor([0, 1, c - 1]),
                                               head, normalized=False)
            assert abs(float(loss) - math.log(c)) < 1e-6

    def test_normalized_mode_is_scale_free(self):
        head = head_with_weights(np.random.default_rng(0).normal(size=(5, 8)))
        head.double()
        emb = torch.randn(4, 8, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 3])
        a = softmax_classification_loss(emb, labels, head, normalized=True, scale=16.0)
        b = softmax_classification_loss(10.0 * emb, labels, head, normalized=True,
                                        scale=16.0)
        assert abs(float(a) - float(b)) < 1e-9

    def test_zero_norm_embedding_raises(self):
        head = head_with_weights(np.eye(2, dtype=np.float32))
        with pytest.raises(DegenerateInputError):
            softmax_classification_loss(torch.zeros(1, 2), torch.tensor([0]), head,
                                        normalized=True)

    def test_label_out_of_range_rejected(self):
        head = head_with_weights(np.eye(2, dtype=np.float32))
        with pytest.raises(ConfigError):
            softmax_classification_loss(torch.randn(1, 2), torch.tensor([2]), head,
                                        normalized=False)

    def test_decision_invariant_to_positive_scaling(self):
        head = head_with_weights(np.random.default_rng(1).normal(size=(6, 8)))
        head.double()
        emb = torch.randn(16, 8, dtype=torch.float64)
        base = head.logits(emb, normalized=True).argmax(dim=1)
        for c in (1e-3, 0.5, 7.0, 1e3):
            assert torch.equal(head.logits(c * emb, normalized=True).argmax(dim=1),
                               base)

    def test_head_needs_two_classes(self):
        with pytest.raises(ConfigError):
            ClassifierHead(1, 8)


class TestAngularLoss:
    def test_identical_directions_zero_for_any_scales(self):
        v = torch.tensor([1.0, 2.0, -3.0], dtype=torch.float64)
        assert float(angular_distillation_loss(2.5 * v, 0.1 * v)) < 1e-30

    def test_orthogonal_gives_one(self):
        assert float(angular_distillation_loss(
            torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0]))) == 1.0

    def test_opposite_gives_four(self):
        v = torch.tensor([0.3, -0.7, 1.1], dtype=torch.float64)
        assert abs(float(angular_distillation_loss(v, -v)) - 4.0) < 1e-12

    def test_zero_vector_raises_not_returns_zero(self):
        with pytest.raises(DegenerateInputError):
            angular_distillation_loss(torch.zeros(3), torch.ones(3))
        with pytest.raises(DegenerateInputError):
            angular_distillation_loss(torch.ones(3), torch.zeros(3))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            angular_distillation_loss(torch.ones(3), torch.ones(4))

    @given(st.integers(2, 16), st.integers(0, 10 ** 6))
    @settings(max_examples=50, deadline=None)
    def test_symmetry_and_range(self, dim, seed):
        rng = np.random.default_rng(seed)
        t = torch.from_numpy(rng.normal(size=dim) + 1e-3)
        s = torch.from_numpy(rng.normal(size=dim) + 1e-3)
        a = float(angular_distillation_loss(t, s))
        b = float(angular_distillation_loss(s, t))
        assert abs(a - b) < 1e-12
        assert 0.0 <= a <= 4.0 + 1e-12

    def test_scale_invariance_properties(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            d = int(rng.integers(2, 32))
            t = torch.from_numpy(rng.normal(size=d))
            s = torch.from_numpy(rng.normal(size=d))
            c1, c2 = rng.uniform(1e-3, 1e3, size=2)
            base = float(angular_distillation_loss(t, s))
            scaled = float(angular_distillation_loss(c1 * t, c2 * s))
            assert abs(base - scaled) < 1e-6


class TestL2Loss:
    def test_equal_vectors_zero(self):
        v = torch.randn(3, 8)
        assert float(l2_distillation_loss(v, v)) == 0.0

    def test_unit_coordinate_difference(self):
        a = torch.zeros(1, 5)
        b = torch.zeros(1, 5)
        b[0, 2] = 1.0
        assert float(l2_distillation_loss(a, b)) == 1.0

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(7)
        t = rng.normal(size=6)
        s = rng.normal(size=6)
        got = float(l2_distillation_loss(torch.from_numpy(t), torch.from_numpy(s)))
        expected = sum((float(ti) - float(si)) ** 2 for ti, si in zip(t, s))
        assert abs(got - expected) < 1e-12

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            l2_distillation_loss(torch.ones(3), torch.ones(4))


def tiny_teacher(embedding_dim=6):
    spec = NetworkSpec(stages=(StageSpec(1, 3, 1), StageSpec(3, 4, 2),
                               StageSpec(4, 5, 2), StageSpec(5, 6, 2)),
                       embedding_dim=embedding_dim)
    net = StageNetwork(spec, role="teacher_recognition").double()
    net.eval()
    return net


class TestIntermediateAngular:
    def test_adapter_output_equal_to_teacher_feature_gives_zero(self):
        net = tiny_teacher()
        f_t = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        identity = make_adapter(AdapterSpec("identity", 4, 4))
        loss = intermediate_angular_loss(f_t, f_t.clone(), identity, net.tail(2))
        assert float(loss) < 1e-30

    def test_teacher_vs_teacher_is_zero(self):
        net = tiny_teacher()
        x = torch.randn(3, 1, 32, 32, dtype=torch.float64)
        with torch.no_grad():
            taps = net.forward_with_taps(x)
        f = taps.features[1].data
        loss = intermediate_angular_loss(f, f, make_adapter(AdapterSpec("identity", 4, 4)),
                                         net.tail(2))
        assert float(loss) < 1e-30

    def test_matches_hand_composition(self):
        net = tiny_teacher()
        adapter = make_adapter(AdapterSpec("channel_projection", 3, 4)).double()
        adapter.eval()
        tail = net.tail(2)
        f_t = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        f_s = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        got = float(intermediate_angular_loss(f_t, f_s, adapter, tail))
        with torch.no_grad():
            t_emb = tail(f_t)
            s_emb = tail(adapter(f_s))
            cos = (t_emb * s_emb).sum(-1) / (t_emb.norm(dim=-1) * s_emb.norm(dim=-1))
            expected = float(((1 - cos) ** 2).mean())
        assert abs(got - expected) < 1e-10

    def test_gradient_reaches_student_side_only(self):
        net = tiny_teacher()
        for p in net.parameters():
            p.requires_grad_(False)
        adapter = make_adapter(AdapterSpec("channel_projection", 3, 4)).double()
        f_t = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        f_s = torch.randn(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
        loss = intermediate_angular_loss(f_t, f_s, adapter, net.tail(2))
        loss.backward()
        assert f_s.grad is not None and float(f_s.grad.abs().sum()) > 0
        assert all(p.grad is None for p in net.parameters())
        assert all(p.grad is not None for p in adapter.parameters())


class TestLambdaSchedule:
    def test_halving_matches_reference_values(self):
        s = LambdaSchedule.from_final(1.0, 4)
        assert s.lambda_intermediate == (0.125, 0.25, 0.5)
        assert s.lambda_n == 1.0

    def test_zero_final_gives_all_zero(self):
        s = LambdaSchedule.from_final(0.0, 4)
        assert s.lambda_intermediate == (0.0, 0.0, 0.0)

    def test_two_stage_single_halving(self):
        s = LambdaSchedule.from_final(0.8, 2)
        assert s.lambda_intermediate == (0.4,)

    def test_halving_invariant(self):
        s = LambdaSchedule.from_final(1.0, 6)
        lams = list(s.lambda_intermediate) + [s.lambda_n]
        for a, b in zip(lams, lams[1:]):
            assert a == b / 2

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            LambdaSchedule(-1.0, (0.5,), 0.0)


class TestTotalLoss:
    def schedule(self, lam=1.0, lam_a=0.1):
        return LambdaSchedule.from_final(lam, 4, lam_a)

    def terms(self, c=2.0, inter=(0.3, 0.2, 0.1), fin=0.5, att=7.0):
        mk = lambda v: torch.tensor(v, dtype=torch.float64)
        return {"classification": mk(c),
                "angular_intermediate": [mk(v) for v in inter],
                "angular_final": mk(fin),
                "attention": mk(att)}

    def test_all_zero_lambdas_reduce_to_classification(self):
        total, breakdown = total_loss(self.terms(), self.schedule(0.0, 0.0), "AAD")
        assert float(total) == 2.0
        assert sum(breakdown.values()) == 2.0

    def test_zero_distillation_terms_reduce_to_classification(self):
        terms = self.terms(c=1.5, inter=(0.0, 0.0, 0.0), fin=0.0, att=0.0)
        total, _ = total_loss(terms, self.schedule(), "AAD")
        assert float(total) == 1.5

    def test_breakdown_sums_to_total(self):
        total, breakdown = total_loss(self.terms(), self.schedule(), "AAD")
        assert abs(sum(breakdown.values()) - float(total)) < 1e-9

    def test_weights_follow_halving_schedule(self):
        total, breakdown = total_loss(self.terms(c=0.0, inter=(1.0, 1.0, 1.0),
                                                 fin=1.0, att=0.0),
                                      self.schedule(), "AAD")
        assert breakdown["angular_stage_1"] == 0.125
        assert breakdown["angular_stage_2"] == 0.25
        assert breakdown["angular_stage_3"] == 0.5
        assert breakdown["angular_final"] == 1.0

    def test_missing_term_is_config_error(self):
        with pytest.raises(ConfigError):
            total_loss({"classification": torch.tensor(1.0)}, self.schedule(), "AD")

    def test_unused_term_is_config_error(self):
        with pytest.raises(ConfigError):
            total_loss({"classification": torch.tensor(1.0),
                        "l2": torch.tensor(1.0)}, self.schedule(), "self")

    def test_self_mode_is_classification_alone(self):
        total, breakdown = total_loss({"classification": torch.tensor(3.0)},
                                      self.schedule(), "self")
        assert float(total) == 3.0
        assert list(breakdown) == ["classification"]

    def test_l2_mode_weighting(self):
        total, breakdown = total_loss(
            {"classification": torch.tensor(1.0, dtype=torch.float64),
             "l2": torch.tensor(10.0, dtype=torch.float64)},
            LambdaSchedule.from_final(0.001, 4), "l2")
        assert abs(float(total) - 1.01) < 1e-12
        assert abs(breakdown["l2"] - 0.01) < 1e-15

    def test_reevaluation_is_identical(self):
        terms = self.terms()
        a, _ = total_loss(terms, self.schedule(), "AAD")
        b, _ = total_loss(terms, self.schedule(), "AAD")
        assert float(a) == float(b)


class TestGradients:
    def test_angular_loss_gradient(self):
        rng = np.random.default_rng(0)
        t = torch.from_numpy(rng.normal(size=(2, 6)) + 0.1)
        s0 = torch.from_numpy(rng.normal(size=(2, 6)) + 0.1)
        check_gradient(lambda s: angular_distillation_loss(t, s), s0)
        check_gradient(lambda tt: angular_distillation_loss(tt, s0), t)

    def test_l2_loss_gradient(self):
        rng = np.random.default_rng(1)
        t = torch.from_numpy(rng.normal(size=(3, 5)))
        s0 = torch.from_numpy(rng.normal(size=(3, 5)))
        check_gradient(lambda s: l2_distillation_loss(t, s), s0)

    def test_softmax_loss_gradient(self):
        head = head_with_weights(np.random.default_rng(2).normal(size=(4, 6)))
        head.double()
        labels = torch.tensor([0, 3, 1])
        emb = torch.from_numpy(np.random.default_rng(3).normal(size=(3, 6)))
        check_gradient(lambda e: softmax_classification_loss(
            e, labels, head, normalized=True, scale=16.0), emb)
        check_gradient(lambda e: softmax_classification_loss(
            e, labels, head, normalized=False), emb)

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from conftest import random_prob_map
from contuda import losses as L
from contuda.errors import NonFiniteComponent, ValidationError


def chw(p_hwc):
    return torch.as_tensor(np.moveaxis(np.asarray(p_hwc, dtype=np.float64), -1, 0))


def pix(*values):
    """A 1x1 map holding one pixel distribution, channels first."""
    return torch.tensor(values, dtype=torch.float64).reshape(-1, 1, 1)


class TestSelfInformation:
    def test_one_hot_is_zero(self):
        assert L.self_information_map(pix(1, 0, 0, 0)).flatten().tolist() == [0, 0, 0, 0]

    def test_uniform(self):
        out = L.self_information_map(pix(0.25, 0.25, 0.25, 0.25))
        assert torch.allclose(out, torch.full_like(out, 0.25 * math.log(4)), atol=1e-12, rtol=0)
        assert out[0].item() == pytest.approx(0.346574, abs=1e-6)

    def test_two_class_pixel(self):
        out = L.self_information_map(pix(0.8, 0.2)).flatten().tolist()
        assert out == pytest.approx([0.178515, 0.321888], abs=1e-6)

    def test_rejects_unnormalized(self):
        with pytest.raises(ValidationError):
            L.self_information_map(pix(0.6, 0.6))

    def test_matches_oracle(self, rng):
        p = random_prob_map(rng, (5, 6, 4))
        got = L.self_information_map(chw(p)).numpy()
        want = np.moveaxis(np.array(oracles.self_information(p.tolist())), -1, 0)
        np.testing.assert_allclose(got, want, rtol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 3, 4), elements=st.floats(-6, 6)))
    def test_bounds_and_entropy(self, logits):
        p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
        out = L.self_information_map(chw(p)).numpy()
        assert out.min() >= 0 and out.max() <= 1 / math.e + 1e-12
        for h in range(3):
            for w in range(3):
                assert out[:, h, w].sum() == pytest.approx(oracles.entropy(p[h, w]), abs=1e-9)


class TestBCE:
    def test_half(self):
        assert L.bce(0.5, 1).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_confident(self):
        assert L.bce(torch.tensor(1 - L.EPS, dtype=torch.float64), 1).item() < 1e-6

    def test_wrong(self):
        assert L.bce(torch.tensor(0.9, dtype=torch.float64), 0).item() == pytest.approx(2.302585, abs=1e-6)

    def test_clamps_extremes(self):
        assert math.isfinite(L.bce(torch.tensor(0.0), 1).item())
        assert math.isfinite(L.bce(torch.tensor(1.0), 0).item())


class TestAdversarial:
    def test_disc_half(self):
        half = torch.full((2, 1, 3, 3), 0.5, dtype=torch.float64)
        assert L.discriminator_loss(half, half).item() == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_disc_perfect(self):
        one = torch.full((4,), 1.0, dtype=torch.float64)
        assert L.discriminator_loss(one, 1 - one).item() < 1e-6

    def test_disc_single_patch(self):
        got = L.discriminator_loss(torch.tensor([0.8], dtype=torch.float64), torch.tensor([0.3], dtype=torch.float64))
        assert got.item() == pytest.approx(0.579818, abs=1e-6)

    def test_fool(self):
        assert L.adversarial_fool_loss(torch.full((3,), 1 - L.EPS, dtype=torch.float64)).item() < 1e-6
        assert L.adversarial_fool_loss(torch.full((3,), 0.5, dtype=torch.float64)).item() == pytest.approx(math.log(2))
        assert L.adversarial_fool_loss(torch.tensor([0.2], dtype=torch.float64)).item() == pytest.approx(
            1.609438, abs=1e-6
        )

    def test_opposite_minima_and_sum(self):
        half = torch.tensor([0.5], dtype=torch.float64)
        total = L.discriminator_loss(half, half) + L.adversarial_fool_loss(half)
        assert total.item() == pytest.approx(3 * math.log(2), abs=1e-12)
        # discriminator wants target -> 0, the segmentation model wants target -> 1
        lo, hi = torch.tensor([L.EPS], dtype=torch.float64), torch.tensor([1 - L.EPS], dtype=torch.float64)
        assert L.discriminator_loss(hi, lo).item() < 1e-6
        assert L.adversarial_fool_loss(hi).item() < 1e-6
        assert L.adversarial_fool_loss(lo).item() > 10

    def test_empty_batch(self):
        with pytest.raises(ValidationError):
            L.discriminator_loss(torch.empty(0), torch.tensor([0.5]))
        with pytest.raises(ValidationError):
            L.adversarial_fool_loss(torch.empty(0))


class TestSegmentationCE:
    def test_one_hot_match(self):
        y = torch.tensor([[0, 1], [2, 1]])
        p = torch.nn.functional.one_hot(y, 3).permute(2, 0, 1).double()
        assert L.segmentation_ce(p, y).item() == 0

    def test_uniform(self):
        p = torch.full((4, 3, 3), 0.25, dtype=torch.float64)
        assert L.segmentation_ce(p, torch.zeros(3, 3, dtype=torch.long)).item() == pytest.approx(math.log(4))

    def test_single_pixel(self):
        assert L.segmentation_ce(pix(0.7, 0.3), torch.tensor([[1]])).item() == pytest.approx(1.203973, abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValidationError):
            L.segmentation_ce(pix(0.7, 0.3), torch.tensor([[2]]))

    def test_batched(self, rng):
        p = random_prob_map(rng, (3, 4, 5, 3))
        y = rng.integers(0, 3, size=(3, 4, 5))
        got = L.segmentation_ce(torch.as_tensor(np.moveaxis(p, -1, 1)), torch.as_tensor(y)).item()
        want = np.mean([oracles.segmentation_ce(p[b].tolist(), y[b].tolist()) for b in range(3)])
        assert got == pytest.approx(want, rel=1e-12)


class TestKL:
    def test_identity(self, rng):
        p = chw(random_prob_map(rng, (4, 4, 3)))
        assert abs(L.kl_map(p, p).item()) < 1e-12

    def test_values(self):
        assert L.kl_map(pix(0.8, 0.2), pix(0.5, 0.5)).item() == pytest.approx(0.192745, abs=1e-6)
        assert L.kl_map(pix(1, 0), pix(0.5, 0.5)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            L.kl_map(pix(0.5, 0.5), pix(0.2, 0.3, 0.5))

    def test_batched_returns_per_sample(self, rng):
        t = random_prob_map(rng, (3, 2, 2, 4))
        s = random_prob_map(rng, (3, 2, 2, 4))
        got = L.kl_map(torch.as_tensor(np.moveaxis(t, -1, 1)), torch.as_tensor(np.moveaxis(s, -1, 1)))
        assert got.shape == (3,)
        for b in range(3):
            assert got[b].item() == pytest.approx(oracles.kl(t[b].tolist(), s[b].tolist()), rel=1e-12)

    def test_teacher_receives_no_gradient(self, rng):
        t = chw(random_prob_map(rng, (3, 3, 4))).requires_grad_(True)
        s = chw(random_prob_map(rng, (3, 3, 4))).requires_grad_(True)
        L.kl_map(t, s).backward()
        assert t.grad is None
        assert s.grad is not None

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, (2, 2, 3), elements=st.floats(-5, 5)),
        arrays(np.float64, (2, 2, 3), elements=st.floats(-5, 5)),
    )
    def test_nonnegative_and_zero_only_at_equality(self, za, zb):
        p = np.exp(za) / np.exp(za).sum(-1, keepdims=True)
        q = np.exp(zb) / np.exp(zb).sum(-1, keepdims=True)
        value = L.kl_map(chw(p), chw(q)).item()
        assert value >= -1e-12
        if np.abs(p - q).max() > 1e-4:
            assert value > 0
        assert abs(L.kl_map(chw(p), chw(p)).item()) < 1e-9


class TestGeneralistDistillation:
    def test_first_step(self):
        assert L.generalist_distillation_loss([0.2], [], L.LossWeights(lambda_prev=1e-5)) == pytest.approx(0.2)

    def test_zero(self):
        assert L.generalist_distillation_loss([0.0], [0.0], L.LossWeights(lambda_prev=3.0)) == 0

    def test_weighted(self):
        got = L.generalist_distillation_loss([0.4, 0.2], [0.1], L.LossWeights(lambda_prev=1e-5))
        assert got == pytest.approx(0.300001, abs=1e-12)

    def test_tensor_batches(self):
        got = L.generalist_distillation_loss(torch.tensor([0.4, 0.2]), torch.tensor([0.1]), L.LossWeights(lambda_prev=0.5))
        assert got.item() == pytest.approx(0.35)

    def test_both_empty(self):
        with pytest.raises(ValidationError):
            L.generalist_distillation_loss([], [], L.LossWeights())


class TestPod:
    EXAMPLE = torch.tensor([[[1.0, 3.0], [5.0, 7.0]]], dtype=torch.float64)

    def test_example(self):
        assert L.pod_embed(self.EXAMPLE, [1]).tolist() == [2, 6, 3, 5]

    def test_zero_feature(self):
        assert not L.pod_embed(torch.zeros(3, 4, 4), [1, 2, 4]).any()

    def test_constant_feature(self):
        out = L.pod_embed(torch.full((2, 4, 6), 1.5), [1])
        assert out.shape == (2 * (4 + 6),)
        assert (out == 1.5).all()

    def test_indivisible_scale_named(self):
        with pytest.raises(ValidationError, match="scale 3"):
            L.pod_embed(torch.zeros(1, 4, 4), [1, 3])

    def test_order_matches_oracle(self, rng):
        f = rng.normal(size=(3, 4, 8))
        got = L.pod_embed(torch.as_tensor(f), [1, 2, 4]).tolist()
        assert got == pytest.approx(oracles.pod_embed(f.tolist(), [1, 2, 4]), rel=1e-12, abs=1e-12)

    def test_normalize_flag(self, rng):
        f = torch.as_tensor(rng.normal(size=(2, 4, 4)))
        out = L.pod_embed(f, [1, 2], normalize=True)
        first = out[: 2 * 8]
        assert first.norm().item() == pytest.approx(1.0)

    def test_local_pod_example(self):
        assert L.local_pod_loss([self.EXAMPLE], [torch.zeros_like(self.EXAMPLE)], [1]).item() == 74

    def test_identical_and_symmetric(self, rng):
        a = [torch.as_tensor(rng.normal(size=(2, 4, 4))), torch.as_tensor(rng.normal(size=(3, 2, 2)))]
        b = [torch.as_tensor(rng.normal(size=(2, 4, 4))), torch.as_tensor(rng.normal(size=(3, 2, 2)))]
        assert L.local_pod_loss(a, a).item() == 0
        assert L.local_pod_loss(a, b).item() == pytest.approx(L.local_pod_loss(b, a).item(), rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, (2, 4, 4), elements=st.floats(-10, 10)),
        arrays(np.float64, (2, 4, 4), elements=st.floats(-10, 10)),
        st.floats(-100, 100),
    )
    def test_offset_invariance(self, a, b, c):
        base = L.local_pod_loss([torch.as_tensor(a)], [torch.as_tensor(b)]).item()
        shifted = L.local_pod_loss([torch.as_tensor(a + c)], [torch.as_tensor(b + c)]).item()
        assert shifted == pytest.approx(base, rel=1e-7, abs=1e-7)

    def test_mismatch(self):
        with pytest.raises(ValidationError):
            L.local_pod_loss([torch.zeros(1, 2, 2)], [torch.zeros(1, 2, 2), torch.zeros(1, 2, 2)])
        with pytest.raises(ValidationError):
            L.local_pod_loss([torch.zeros(1, 2, 2)], [torch.zeros(1, 4, 4)])

    def test_previous_side_detached(self, rng):
        cur = torch.as_tensor(rng.normal(size=(2, 4, 4))).requires_grad_(True)
        prev = torch.as_tensor(rng.normal(size=(2, 4, 4))).requires_grad_(True)
        L.local_pod_loss([cur], [prev]).backward()
        assert prev.grad is None and cur.grad is not None


class TestTotal:
    def test_values(self):
        w = L.LossWeights(lambda_adv=1e-3, lambda_dd=1, lambda_fd=1e-2)
        assert L.total_model_loss(1, 0, 0, 0, w) == 1
        assert L.total_model_loss(0.5, 1.0, 0.2, 74, w) == pytest.approx(1.441, abs=1e-12)
        assert L.total_model_loss(0, 0, 0, 0, w) == 0

    @pytest.mark.parametrize("component", ["seg", "adv", "dd", "fd"])
    def test_non_finite_named(self, component):
        values = dict(seg=1.0, adv=1.0, dd=1.0, fd=1.0)
        values[component] = float("nan")
        with pytest.raises(NonFiniteComponent) as info:
            L.total_model_loss(**values, w=L.LossWeights())
        assert info.value.component == component

    def test_weights_validated(self):
        with pytest.raises(ValidationError):
            L.LossWeights(lambda_adv=-1)
        with pytest.raises(ValidationError):
            L.LossWeights(lambda_fd=float("inf"))

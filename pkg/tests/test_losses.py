import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from advseg import autodiff as ad
from advseg.autodiff import Tensor
from advseg.losses import LabelRangeError, combined_loss, one_hot, pixel_ce, presence_bce, seg_loss, soft_dice
from advseg.segnet import NetSpec, forward, init_params


@pytest.mark.parametrize("k", [2, 5, 9])
def test_uniform_logits_ce_is_log_k(k):
    labels = np.random.default_rng(k).integers(0, k, (6, 5))
    assert pixel_ce(Tensor(np.zeros((k, 6, 5))), labels).item() == pytest.approx(np.log(k), abs=1e-6)


def test_saturated_ce_is_zero():
    labels = np.random.default_rng(0).integers(0, 3, (4, 4))
    logits = 30.0 * one_hot(labels, 3, np.float64)
    with ad.precision(np.float64):
        assert pixel_ce(Tensor(logits), labels).item() < 1e-9


def test_ce_single_pixel_by_hand():
    ce = pixel_ce(Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1)), np.array([[1]]))
    assert ce.item() == pytest.approx(np.log1p(np.e), abs=1e-6)


def test_label_out_of_range():
    with pytest.raises(LabelRangeError):
        pixel_ce(Tensor(np.zeros((3, 2, 2))), np.array([[0, 1], [2, 3]]))


def test_soft_dice_perfect_overlap():
    labels = np.array([[0, 1], [2, 3]])
    with ad.precision(np.float64):
        assert soft_dice(Tensor(one_hot(labels, 4)), labels).item() == pytest.approx(1.0, abs=1e-5)


def test_soft_dice_absent_class_counts_as_one():
    labels = np.zeros((4, 4), dtype=int)
    labels[0, 0] = 1
    with ad.precision(np.float64):
        dice = soft_dice(Tensor(one_hot(labels, 3)), labels).item()
    assert dice == pytest.approx(1.0, abs=1e-9)


def test_soft_dice_hard_overlap():
    labels = np.zeros((4, 4), dtype=int)
    labels[0, :2] = 1
    pred = np.zeros((4, 4), dtype=int)
    pred[0, :4] = 1
    with ad.precision(np.float64):
        dice = soft_dice(Tensor(one_hot(pred, 2)), labels).item()
    assert dice == pytest.approx(2 * 2 / 6, abs=1e-5)


def test_seg_loss_examples():
    labels = np.random.default_rng(0).integers(0, 3, (4, 4))
    with ad.precision(np.float64):
        saturated = seg_loss(Tensor(30.0 * one_hot(labels, 3)), labels)
        assert saturated.seg_total.item() == pytest.approx(0.0, abs=1e-6)
        balanced = np.array([[0, 1], [1, 0]])
        terms = seg_loss(Tensor(np.zeros((2, 2, 2))), balanced)
    expected_dice = (2 * 0.5 * 2 + 1e-5) / (0.5 * 4 + 2 + 1e-5)
    assert terms.ce.item() == pytest.approx(np.log(2), abs=1e-9)
    assert terms.seg_total.item() == pytest.approx(np.log(2) + 1 - expected_dice, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 20))
def test_seg_loss_bounds(seed, spread):
    rng = np.random.default_rng(seed)
    logits = rng.normal(0, spread, (4, 5, 5))
    labels = rng.integers(0, 4, (5, 5))
    terms = seg_loss(Tensor(logits), labels)
    ce, dice, total = (terms.ce.item(), terms.soft_dice_mean.item(), terms.seg_total.item())
    assert ce >= 0 and 0 <= dice <= 1 + 1e-6
    assert -1e-6 <= total <= ce + 1 + 1e-5
    assert np.isfinite([ce, dice, total]).all()


def test_presence_bce_examples():
    assert presence_bce(Tensor(np.zeros(4)), [1, 0, 1, 1]).item() == pytest.approx(np.log(2), abs=1e-6)
    assert presence_bce(Tensor([30.0]), [1]).item() == pytest.approx(0.0, abs=1e-9)
    sp = np.log1p(np.exp(-1.0))
    assert presence_bce(Tensor([1.0, -1.0]), [1, 0]).item() == pytest.approx(sp, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-60, 60), min_size=1, max_size=8), st.integers(0, 255))
def test_presence_bce_non_negative_and_finite(z, bits):
    truth = [(bits >> i) & 1 for i in range(len(z))]
    v = presence_bce(Tensor(np.array(z)), truth).item()
    assert np.isfinite(v) and v >= -1e-6


def test_combined_loss_arithmetic_and_lambda_zero():
    labels = np.random.default_rng(1).integers(0, 3, (4, 4))
    logits, z = Tensor(np.random.default_rng(2).normal(size=(3, 4, 4))), Tensor([0.3, -0.2])
    t0 = combined_loss(logits, labels, z, [1, 0], lam=0.0)
    assert t0.combined.item() == pytest.approx(t0.seg_total.item(), rel=1e-7)
    t1 = combined_loss(logits, labels, z, [1, 0], lam=1.0)
    assert t1.combined.item() == pytest.approx(t1.seg_total.item() + t1.presence_bce.item(), rel=1e-6)
    with pytest.raises(ValueError):
        combined_loss(logits, labels, z, [1, 0], lam=-1)


def test_head_gradient_scales_with_lambda():
    params = init_params(NetSpec(stage_classes=3, base_width=2, depth=1), seed=0)
    x = Tensor(np.random.default_rng(3).uniform(0, 1, (3, 8, 8)))
    labels = np.random.default_rng(4).integers(0, 3, (8, 8))
    truth = [1, 0]
    head = params["presence_head.w"]

    def head_grad(fn):
        with ad.Tape() as tape:
            out = forward(params, x)
            loss = fn(out)
        return ad.backward(loss, tape)

    lam = 0.7
    g_comb = head_grad(lambda o: combined_loss(o.seg_logits, labels, o.presence_logits, truth, lam).combined)
    g_bce = head_grad(lambda o: presence_bce(o.presence_logits, truth))
    np.testing.assert_allclose(g_comb[head], lam * g_bce[head], rtol=1e-5, atol=1e-8)
    g_seg = head_grad(lambda o: seg_loss(o.seg_logits, labels).seg_total)
    assert head not in g_seg or not g_seg[head].any()


def test_batched_loss_is_mean_of_singles():
    rng = np.random.default_rng(6)
    logits = rng.normal(size=(3, 4, 5, 5))
    labels = rng.integers(0, 4, (3, 5, 5))
    with ad.precision(np.float64):
        batch = seg_loss(Tensor(logits), labels).seg_total.item()
        singles = [seg_loss(Tensor(logits[i]), labels[i]).seg_total.item() for i in range(3)]
    assert batch == pytest.approx(np.mean(singles), rel=1e-10)

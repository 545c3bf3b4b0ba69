import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dice_per_channel, ncc_sliding
from volinterp import losses
from volinterp.losses import (COMPONENT_COEF, LossBreakdown, charbonnier, dice_loss, grad_check,
                              gradient_suite, image_loss, ncc_global, ncc_local, smoothness, warp_loss)
from volinterp.volcore import ContractViolation


def t64(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


def rand(shape, seed):
    return t64(np.random.default_rng(seed).random(shape))


def test_ncc_self_is_one():
    v = rand((1, 1, 8, 8, 8), 0)
    assert abs(float(ncc_local(v, v)) - 1.0) <= 1e-5


def test_ncc_anticorrelated_is_minus_one():
    v = rand((1, 1, 8, 8, 8), 1)
    assert abs(float(ncc_local(v, 3.0 - v)) + 1.0) <= 1e-5


def test_ncc_squared_form_is_non_negative():
    v = rand((1, 1, 8, 8, 8), 2)
    assert abs(float(ncc_local(v, 3.0 - v, squared=True)) - 1.0) <= 1e-5


@pytest.mark.parametrize("window", [3, 5])
def test_ncc_matches_sliding_window_oracle(window):
    a, b = rand((1, 1, 6, 7, 5), 3), rand((1, 1, 6, 7, 5), 4)
    expect = ncc_sliding(a[0, 0].numpy(), b[0, 0].numpy(), window)
    assert float(ncc_local(a, b, window)) == pytest.approx(expect, abs=1e-10)


def test_ncc_affine_invariance():
    v = rand((1, 1, 8, 8, 8), 5)
    base = float(ncc_local(v, v))
    for a, b in [(2.0, 0.3), (0.5, -1.0), (7.0, 2.0)]:
        assert abs(float(ncc_local(v, a * v + b)) - base) <= 1e-4


def test_ncc_rejects_bad_window():
    v = rand((1, 1, 4, 4, 4), 6)
    for w in (1, 4):
        with pytest.raises(ContractViolation):
            ncc_local(v, v, w)


def test_ncc_global_pearson():
    a, b = rand((1, 1, 5, 5, 5), 7), rand((1, 1, 5, 5, 5), 8)
    expect = np.corrcoef(a.numpy().ravel(), b.numpy().ravel())[0, 1]
    assert float(ncc_global(a, b)) == pytest.approx(expect, abs=1e-6)


def test_charbonnier_identical_is_eps_exactly():
    v = rand((1, 1, 6, 6, 6), 9)
    for eps in (1e-3, 1e-2, 0.37):
        assert float(charbonnier(v, v, eps)) == eps
    v32 = v.float()
    assert float(charbonnier(v32, v32, 1e-3)) == np.float32(1e-3)


def test_charbonnier_formula():
    a, b = rand((1, 1, 4, 4, 4), 10), rand((1, 1, 4, 4, 4), 11)
    expect = np.mean(np.sqrt((a.numpy() - b.numpy()) ** 2 + 1e-6))
    assert float(charbonnier(a, b, 1e-3)) == pytest.approx(expect, rel=1e-12)
    with pytest.raises(ContractViolation):
        charbonnier(a, b, 0.0)


def test_smoothness():
    assert float(smoothness(torch.full((1, 3, 4, 4, 4), 2.5))) == 0.0
    z, y, x = np.meshgrid(np.arange(4.0), np.arange(4.0), np.arange(4.0), indexing="ij")
    f = t64(np.stack([2 * x, 0 * x, 0 * x])[None])
    # only the width difference of one component is non-zero (value 2)
    assert float(smoothness(f)) == pytest.approx(4.0 / 3 / 3)


def test_image_loss_modes():
    a, b = rand((1, 1, 6, 6, 6), 12), rand((1, 1, 6, 6, 6), 13)
    loc = float(image_loss(a, b, 3))
    glob = float(image_loss(a, b, 3, ncc_mode="global"))
    assert loc == pytest.approx(-float(ncc_local(a, b, 3)) + float(charbonnier(a, b)))
    assert glob == pytest.approx(-float(ncc_global(a, b)) + float(charbonnier(a, b)))
    with pytest.raises(ContractViolation):
        image_loss(a, b, ncc_mode="bogus")


def test_warp_loss_zero_flow_identical_images():
    v = rand((1, 1, 6, 6, 6), 14)
    z = torch.zeros(1, 3, 6, 6, 6, dtype=torch.float64)
    assert float(warp_loss(v, v, z, z, window=3)) == pytest.approx(2 * (-1 + 1e-3), abs=1e-5)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_warp_loss_swap_symmetry_exact(seed):
    rng = np.random.default_rng(seed)
    i0, i1 = t64(rng.random((1, 1, 6, 6, 6))), t64(rng.random((1, 1, 6, 6, 6)))
    f01, f10 = t64(rng.normal(size=(1, 3, 6, 6, 6))), t64(rng.normal(size=(1, 3, 6, 6, 6)))
    assert float(warp_loss(i0, i1, f01, f10, window=3)) == float(warp_loss(i1, i0, f10, f01, window=3))


def test_dice_one_hot_self():
    lab = np.random.default_rng(15).integers(0, 3, (6, 6, 6))
    onehot = t64(np.eye(3)[lab].transpose(3, 0, 1, 2)[None])
    assert float(dice_loss(onehot, onehot)) <= 1e-4


def test_dice_matches_oracle():
    rng = np.random.default_rng(16)
    logits = rng.normal(size=(3, 5, 5, 5))
    soft = np.exp(logits) / np.exp(logits).sum(0)
    onehot = np.eye(3)[rng.integers(0, 3, (5, 5, 5))].transpose(3, 0, 1, 2)
    assert float(dice_loss(t64(soft[None]), t64(onehot[None]))) == pytest.approx(
        dice_per_channel(soft, onehot), abs=1e-12)


def test_loss_breakdown_bookkeeping():
    bd = LossBreakdown(smooth_fwd=0.1, smooth_bwd=0.2, image_fwd=-0.3, image_bwd=-0.4, cyc_image_0=-0.9,
                       cyc_image_1=-0.8, reg_0=0.01, reg_1=0.02, coefficients={
                           "smooth": 2.0, "image": 1.0, "cyc_image": 0.5, "reg": 3.0, "dice": 1.0})
    expect = 2 * 0.3 - 0.7 + 0.5 * -1.7 + 3 * 0.03
    assert bd.weighted_sum() == pytest.approx(expect)
    rec = json.loads(bd.to_json(step=4))
    assert rec["step"] == 4 and set(COMPONENT_COEF) <= set(rec)


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(4, dtype=torch.float64)

    good = grad_check(lambda x: (x ** 2).sum(), {"x": np.arange(4.0)})
    bad = grad_check(lambda x: Wrong.apply(x), {"x": np.arange(4.0)})
    assert good.passed and not bad.passed
    assert "[FAIL]" in str(bad)


def test_gradient_suite_passes():
    reports = gradient_suite()
    assert [r.name for r in reports] == ["charbonnier", "ncc_local(w=3)", "smoothness", "warp-composite", "dice"]
    for r in reports:
        assert r.passed, str(r)


def test_window_sum_count_counts_in_bounds_voxels():
    count = losses._window_count((5, 5, 5), 3, torch.float64)
    assert float(count[0, 0, 0, 0, 0]) == 8 and float(count[0, 0, 2, 2, 2]) == 27

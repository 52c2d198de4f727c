import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from crossdisc.losses import (EPS, SupervisionTarget, background_nll, completion_mse, dist_term, total_loss,
                              weighted_bce)
from oracles import coordinate_fd_check

f64 = dict(dtype=torch.float64)


def test_weighted_bce_hand_value():
    # -1/2 [1.5 ln 0.8 + ln 0.8]
    loss = weighted_bce(torch.tensor([1.0, 0.0], **f64), torch.tensor([0.8, 0.2], **f64), 0.5)
    assert loss.item() == pytest.approx(-0.5 * (1.5 * math.log(0.8) + math.log(0.8)), abs=1e-15)
    assert loss.item() == pytest.approx(0.27893, abs=1e-5)


def test_weighted_bce_perfect_prediction_is_tiny():
    m = torch.tensor([1.0, 0.0, 1.0, 0.0], **f64)
    for s in (0.0, 0.5, 1.0):
        assert weighted_bce(m, m, s).item() <= -math.log(1 - EPS) * (1 + s) + 1e-15


def test_weighted_bce_zero_confidence_is_plain_bce():
    gen = torch.Generator().manual_seed(0)
    m = (torch.rand(50, generator=gen) > 0.5).double()
    W = torch.rand(50, generator=gen, **f64) * 0.98 + 0.01
    ref = torch.nn.functional.binary_cross_entropy(W, m)
    torch.testing.assert_close(weighted_bce(m, W, 0.0), ref)


def test_weighted_bce_averages_over_pairs():
    gen = torch.Generator().manual_seed(1)
    m = (torch.rand(3, 20, generator=gen) > 0.5).double()
    W = torch.rand(3, 20, generator=gen, **f64) * 0.9 + 0.05
    s = torch.tensor([0.1, 0.5, 0.9], **f64)
    each = torch.stack([weighted_bce(m[i], W[i], s[i]) for i in range(3)])
    torch.testing.assert_close(weighted_bce(m, W, s), each.mean())


def test_weighted_bce_rejects_length_mismatch():
    with pytest.raises(ValueError):
        weighted_bce(torch.ones(3), torch.full((4,), 0.5))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), s=st.floats(0, 1))
def test_weighted_bce_monotonicity(seed, s):
    rng = np.random.default_rng(seed)
    m = torch.from_numpy((rng.random(12) > 0.5).astype(np.float64))
    W = torch.from_numpy(rng.uniform(0.05, 0.95, 12)).requires_grad_(True)
    loss = weighted_bce(m, W, s)
    assert loss.item() >= 0
    (g,) = torch.autograd.grad(loss, W)
    assert torch.all(g[m == 1] < 0) and torch.all(g[m == 0] > 0)
    if m.sum() > 0:
        st_ = torch.tensor(s, **f64, requires_grad=True)
        (gs,) = torch.autograd.grad(weighted_bce(m, W.detach(), st_), st_)
        assert gs.item() >= 0


def test_completion_mse_examples():
    img = torch.rand(4, 3, 5, **f64)
    valid = torch.zeros(3, 5, dtype=torch.bool)
    valid[1, 2] = True
    assert completion_mse(img, img, valid).item() == 0.0
    other = img.clone()
    other[0, 1, 2] += 1.0
    assert completion_mse(other, img, valid).item() == pytest.approx(0.25)
    with pytest.raises(ValueError):
        completion_mse(img, img, torch.zeros(3, 5, dtype=torch.bool))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_completion_mse_ignores_fill_pixels(seed):
    gen = torch.Generator().manual_seed(seed)
    pred = torch.rand(2, 4, 6, 7, generator=gen, **f64)
    target = torch.rand(2, 4, 6, 7, generator=gen, **f64)
    valid = torch.rand(2, 6, 7, generator=gen) > 0.5
    valid[0, 0, 0] = True
    base = completion_mse(pred, target, valid)
    noise = 100 * torch.randn(2, 4, 6, 7, generator=gen, **f64)
    corrupt = torch.where(valid[:, None], pred, pred + noise)
    assert completion_mse(corrupt, target, valid).item() == base.item()


def test_background_nll_examples():
    covered = torch.tensor([1.0, 0.0, 1.0], **f64)
    assert background_nll(1 - covered, covered).item() == pytest.approx(0.0, abs=1e-6)
    assert background_nll(torch.full((3,), 0.5, **f64), torch.ones(3, **f64)).item() == pytest.approx(math.log(2))
    with pytest.raises(ValueError):
        background_nll(torch.full((3,), 0.5), torch.ones(4))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_background_nll_equals_plain_bce_on_complement(seed):
    rng = np.random.default_rng(seed)
    covered = torch.from_numpy((rng.random(16) > 0.4).astype(np.float64))
    W_bg = torch.from_numpy(rng.uniform(0.01, 0.99, 16))
    torch.testing.assert_close(background_nll(W_bg, covered), weighted_bce(1 - covered, W_bg, 0.0))


@pytest.mark.parametrize("seed", range(3))
def test_loss_gradients_match_finite_differences(seed):
    gen = torch.Generator().manual_seed(seed)
    m = (torch.rand(3, 40, generator=gen) > 0.5).double()
    s = torch.rand(3, generator=gen, **f64)
    W = torch.rand(3, 40, generator=gen, **f64) * 0.9 + 0.05
    assert coordinate_fd_check(lambda x: weighted_bce(m, x, s), W) < 1e-4

    target = torch.rand(4, 5, 6, generator=gen, **f64)
    valid = torch.rand(5, 6, generator=gen) > 0.3
    assert coordinate_fd_check(lambda x: completion_mse(x, target, valid), torch.rand(4, 5, 6, generator=gen, **f64)) < 1e-4

    covered = (torch.rand(40, generator=gen) > 0.5).double()
    assert coordinate_fd_check(lambda x: background_nll(x, covered), torch.rand(40, generator=gen, **f64) * 0.9 + 0.05) < 1e-4


def test_total_loss_sum_and_weights():
    parts = {"motion": torch.tensor(1.0), "mse": torch.tensor(2.0), "bg": torch.tensor(0.5)}
    assert float(total_loss("3D", "burn_in", parts)) == 3.5
    assert float(total_loss("3D", "burn_in", parts, {"motion": 0, "mse": 0, "bg": 0})) == 0.0
    parts[dist_term("2D", "3D")] = torch.tensor(4.0)
    assert float(total_loss("3D", "distill", parts, {"dist": 0.5})) == 5.5


@pytest.mark.parametrize("branch,phase,name", [
    ("3D", "distill", "dist_3D->3D"),
    ("2D", "distill", "dist_2D->2D"),
    ("3D", "distill", "dist_3D->2D"),
    ("3D", "burn_in", "dist_2D->3D"),
    ("2D", "burn_in", "flow"),
])
def test_total_loss_rejects_bad_terms(branch, phase, name):
    with pytest.raises(ValueError):
        total_loss(branch, phase, {name: torch.tensor(1.0)})


def test_supervision_target_validation():
    t = SupervisionTarget(np.ones(4), 0.5, "teacher3D")
    assert t.modality == "3D" and t.is_teacher
    with pytest.raises(ValueError):
        SupervisionTarget(np.ones(4), 1.5, "motion2D")
    with pytest.raises(ValueError):
        SupervisionTarget(np.ones(4), 0.5, "flow")

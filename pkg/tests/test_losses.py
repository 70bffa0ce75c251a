import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from selcut.losses import (
    LossReport,
    loss_discriminator,
    loss_disjoincy,
    loss_fence,
    loss_reconstruction,
)

TOL = 1e-6


@pytest.mark.parametrize("scores, expected", [([1, 1, 1], 0.0), ([0], 1.0), ([-0.5, 0.5], 1.0)])
def test_loss_fence_examples(scores, expected):
    assert abs(loss_fence(scores).item() - expected) < TOL


def test_loss_disjoincy_examples():
    ones = np.ones((4, 4))
    left = np.zeros((4, 4))
    left[:, :2] = 1
    assert abs(loss_disjoincy(ones, ones).item() - 1.0) < TOL
    assert abs(loss_disjoincy(left, 1 - left).item()) < TOL
    assert abs(loss_disjoincy([1, 1, 0, 0], [0, 1, 1, 0]).item() - 0.5) < TOL


def test_loss_reconstruction_examples(rng):
    x = rng.random((3, 4, 4))
    assert loss_reconstruction(x, x).item() == 0.0
    assert abs(loss_reconstruction(np.ones((1, 2, 2)), np.zeros((1, 2, 2))).item() - 1.0) < TOL
    y = rng.random((3, 4, 4))
    total = 0.0
    for i in range(3):
        for r in range(4):
            for c in range(4):
                total += (x[i, r, c] - y[i, r, c]) ** 2
    assert abs(loss_reconstruction(x, y).item() - total / (3 * 4 * 4)) < 1e-12


@pytest.mark.parametrize(
    "fake, real, expected",
    [([-1, -1], [1, 1, 1], 0.0), ([0], [0], 1.0), ([0.5], [0.5], 1.0)],
)
def test_loss_discriminator_examples(fake, real, expected):
    assert abs(loss_discriminator(fake, real).item() - expected) < TOL


def test_adversarial_constant_sum(rng):
    # a fence-cut score pays |s-1| in the main phase and |s+1| in the D phase
    s = rng.uniform(-1, 1, 1000)
    for v in s:
        # a lone fake next to a perfect real: Loss_D = |s+1| / 2
        total = loss_fence([v]).item() + 2 * loss_discriminator([v], [1.0]).item()
        assert abs(total - 2.0) < 1e-12


@given(arrays(np.float64, (3, 5), elements=st.floats(0, 1)), arrays(np.float64, (3, 5), elements=st.floats(0, 1)))
def test_disjoincy_range_and_symmetry(a, b):
    d = loss_disjoincy(a, b).item()
    assert -1e-12 <= d <= 1 + 1e-12
    assert d == pytest.approx(loss_disjoincy(b, a).item(), abs=1e-15)


@given(arrays(np.float64, (2, 4), elements=st.floats(-1, 1)), arrays(np.float64, (3,), elements=st.floats(-1, 1)))
def test_losses_nonnegative(f, r):
    assert loss_fence(f).item() >= 0
    assert loss_discriminator(f, r).item() >= 0
    assert loss_reconstruction(f, f * 0.5).item() >= 0


def test_reconstruction_zero_iff_equal(rng):
    x = rng.random((2, 8, 8))
    y = x.copy()
    assert loss_reconstruction(x, y).item() == 0
    y[1, 3, 3] += 1e-3
    assert loss_reconstruction(x, y).item() > 0


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        loss_disjoincy(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        loss_reconstruction(np.ones(3), np.ones(4))
    with pytest.raises(ValueError):
        loss_fence([])
    with pytest.raises(ValueError):
        loss_discriminator([0.1], [])


def test_losses_keep_autograd():
    s = torch.tensor([0.2, -0.4], requires_grad=True)
    loss_fence(s).backward()
    assert torch.allclose(s.grad, torch.tensor([-0.5, -0.5]))


def test_loss_report_json_round_trip():
    rep = LossReport(0.5, 0.1, None, None, n=8, m=8, stage=2, cycle=0, phase="M", epoch=1)
    assert LossReport.from_json(rep.to_json()) == rep
    full = LossReport(0.5, 0.25, 0.125, None, n=1, m=1)
    assert full.main_total((1, 2, 4)) == pytest.approx(0.5 + 0.5 + 0.5)

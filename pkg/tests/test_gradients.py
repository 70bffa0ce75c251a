"""Autograd against central finite differences, float64 throughout."""

import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F

from selcut import losses
from selcut.netgraph import (
    FROZEN,
    TRAIN,
    BatchNorm,
    ConvBlock,
    Discriminator,
    MainModule,
    NetworkConfig,
    backward,
    dropout,
)

STEP = 1e-4
REL_TOL = 1e-3


@pytest.fixture(autouse=True)
def _seeded():
    # module construction draws from the global generator
    torch.manual_seed(0)


def fd_gradient(f, t: torch.Tensor) -> torch.Tensor:
    """Central differences of scalar f() with respect to every entry of t (perturbed in place)."""
    g = torch.zeros_like(t)
    flat, gflat = t.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + STEP
        up = f().item()
        flat[i] = old - STEP
        down = f().item()
        flat[i] = old
        gflat[i] = (up - down) / (2 * STEP)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.norm().item(), b.norm().item())
    return 0.0 if scale == 0 else (a - b).norm().item() / scale


def check(f, tensors: dict[str, torch.Tensor]) -> None:
    for t in tensors.values():
        t.requires_grad_(True)
    analytic = torch.autograd.grad(f(), list(tensors.values()), allow_unused=True)
    with torch.no_grad():
        for (name, t), a in zip(tensors.items(), analytic):
            a = torch.zeros_like(t) if a is None else a
            numeric = fd_gradient(f, t)
            err = rel_error(a, numeric)
            assert numeric.abs().max() > 0 or a.abs().max() == 0, name
            assert err < REL_TOL, f"{name}: relative error {err:.2e}"


def _g(seed=0):
    return torch.Generator().manual_seed(seed)


def randn(*shape, seed=0):
    return torch.randn(*shape, generator=_g(seed), dtype=torch.float64)


def projector(shape, seed=99):
    return randn(*shape, seed=seed)


def away_from_zero(x: torch.Tensor, gap=1e-2) -> torch.Tensor:
    return torch.sign(x) * (x.abs() + gap)


# --- individual layer types ---------------------------------------------------------


def test_conv3x3():
    conv = nn.Conv2d(4, 3, 3, padding=1).double()
    x = randn(2, 4, 8, 8)
    p = projector((2, 3, 8, 8))
    check(lambda: (conv(x) * p).sum(), {"x": x, "weight": conv.weight, "bias": conv.bias})


def test_conv1x1_reconstructor_shape():
    conv = nn.Conv2d(2, 1, 1).double()
    x = randn(2, 2, 8, 8, seed=1)
    p = projector((2, 1, 8, 8))
    check(lambda: (torch.sigmoid(conv(x)) * p).sum(), {"x": x, "weight": conv.weight, "bias": conv.bias})


def test_transposed_conv():
    up = nn.ConvTranspose2d(4, 2, 2, stride=2).double()
    x = randn(1, 4, 4, 4, seed=2)
    p = projector((1, 2, 8, 8))
    check(lambda: (up(x) * p).sum(), {"x": x, "weight": up.weight, "bias": up.bias})


@pytest.mark.parametrize("mode", [TRAIN, FROZEN])
def test_batchnorm_batch_statistics(mode):
    bn = BatchNorm(3, 0.9, 1e-3).double()
    with torch.no_grad():
        bn.weight.copy_(randn(3, seed=3))
        bn.bias.copy_(randn(3, seed=4))
    x = randn(2, 3, 4, 4, seed=5)
    p = projector((2, 3, 4, 4))
    check(lambda: (bn(x, mode) * p).sum(), {"x": x, "weight": bn.weight, "bias": bn.bias})


def test_batchnorm_running_statistics():
    bn = BatchNorm(3, 0.9, 1e-3).double()
    with torch.no_grad():
        bn.running_mean.copy_(randn(3, seed=6))
        bn.running_var.copy_(randn(3, seed=7).abs() + 0.5)
    x = randn(2, 3, 4, 4, seed=8)
    p = projector((2, 3, 4, 4))
    check(lambda: (bn(x, "eval") * p).sum(), {"x": x, "weight": bn.weight, "bias": bn.bias})


def test_relu():
    x = away_from_zero(randn(2, 4, 8, 8, seed=9))
    p = projector((2, 4, 8, 8))
    check(lambda: (F.relu(x) * p).sum(), {"x": x})


def test_maxpool():
    # distinct values with gaps far above the FD step, so no ties flip
    vals = torch.linspace(-1, 1, 2 * 4 * 8 * 8, dtype=torch.float64)
    x = vals[torch.randperm(vals.numel(), generator=_g(10))].reshape(2, 4, 8, 8).clone()
    p = projector((2, 4, 4, 4))
    check(lambda: (F.max_pool2d(x, 2) * p).sum(), {"x": x})


def test_dropout_fixed_mask():
    x = randn(2, 4, 8, 8, seed=11)
    p = projector((2, 4, 8, 8))
    check(lambda: (dropout(x, 0.3, _g(12)) * p).sum(), {"x": x})


def test_skip_concatenation():
    a, b = randn(1, 2, 8, 8, seed=13), randn(1, 2, 8, 8, seed=14)
    conv = nn.Conv2d(4, 1, 3, padding=1).double()
    p = projector((1, 1, 8, 8))
    check(lambda: (conv(torch.cat([a, b], 1)) * p).sum(), {"a": a, "b": b})


def test_sigmoid_and_tanh():
    x = randn(4, 8, seed=15)
    p = projector((4, 8))
    check(lambda: (torch.sigmoid(x) * p).sum() + (torch.tanh(x) * p).sum(), {"x": x})


def test_dense_tanh_head():
    dense = nn.Linear(32, 1).double()
    x = randn(3, 32, seed=16)
    check(lambda: torch.tanh(dense(x)).sum(), {"x": x, "weight": dense.weight, "bias": dense.bias})


def test_conv_block():
    cfg = NetworkConfig(input_size=(8, 8), encoder_channels=(2,), transition_channels=3)
    block = ConvBlock(1, 2, cfg).double()
    x = randn(2, 1, 8, 8, seed=17)
    p = projector((2, 2, 8, 8))
    check(lambda: (block(x, FROZEN) * p).sum(), {"x": x, "conv1.weight": block.conv1.weight})


# --- every loss --------------------------------------------------------------------


def test_loss_fence_gradient():
    s = torch.tensor([0.3, -0.7, 0.1, -0.2], dtype=torch.float64)
    check(lambda: losses.loss_fence(s), {"scores": s})


def test_loss_disjoincy_gradient():
    a = torch.sigmoid(randn(2, 8, 8, seed=18))
    b = torch.sigmoid(randn(2, 8, 8, seed=19))
    check(lambda: losses.loss_disjoincy(a, b), {"fence": a, "wild": b})


def test_loss_reconstruction_gradient():
    x, r = torch.rand(2, 8, 8, generator=_g(20), dtype=torch.float64), torch.rand(2, 8, 8, generator=_g(21), dtype=torch.float64)
    check(lambda: losses.loss_reconstruction(x, r), {"recon": r})


def test_loss_discriminator_gradient():
    f = torch.tensor([0.2, -0.5, 0.7], dtype=torch.float64)
    r = torch.tensor([0.4, -0.1], dtype=torch.float64)
    check(lambda: losses.loss_discriminator(f, r), {"fake": f, "real": r})


# --- whole modules through backward() --------------------------------------------


TOY = NetworkConfig(input_size=(8, 8), encoder_channels=(2, 3), transition_channels=4)


def _params(module, names):
    named = dict(module.named_parameters())
    return {n: named[n] for n in names}


def test_main_module_total_loss_via_backward():
    torch.manual_seed(0)
    main, disc = MainModule(TOY).double(), Discriminator(TOY).double()
    x = torch.rand(2, 1, 8, 8, generator=_g(22), dtype=torch.float64)

    def total():
        fc, wc, ro = main(x, FROZEN, _g(23))
        s = disc(fc, FROZEN, None)
        return losses.loss_fence(s) + losses.loss_disjoincy(fc, wc) + losses.loss_reconstruction(x, ro)

    names = ["recon.weight", "recon.bias", "fence.out.weight", "wild.up1.weight", "enc.block1.conv1.weight", "enc.transition.bn2.weight"]
    params = _params(main, names)
    grads = backward(params, total())
    with torch.no_grad():
        for n, p in params.items():
            err = rel_error(grads[n], fd_gradient(total, p))
            assert err < REL_TOL, f"{n}: {err:.2e}"


def test_discriminator_loss_via_backward():
    torch.manual_seed(1)
    disc = Discriminator(TOY).double()
    x = torch.rand(4, 1, 8, 8, generator=_g(24), dtype=torch.float64)
    y = torch.tensor([-1.0, -1.0, 1.0, 1.0], dtype=torch.float64)

    def loss():
        return (disc(x, FROZEN, _g(25)) - y).abs().mean()

    names = ["dense.weight", "dense.bias", "features.block1.conv2.weight", "features.transition.bn1.bias"]
    params = _params(disc, names)
    grads = backward(params, loss())
    with torch.no_grad():
        for n, p in params.items():
            err = rel_error(grads[n], fd_gradient(loss, p))
            assert err < REL_TOL, f"{n}: {err:.2e}"


def test_backward_skips_frozen_and_fills_unused():
    a = torch.tensor([1.0, 2.0], requires_grad=True)
    b = torch.tensor([3.0], requires_grad=True)
    c = torch.tensor([4.0], requires_grad=False)
    g = backward({"a": a, "b": b, "c": c}, (a**2).sum())
    assert set(g) == {"a", "b"}
    assert torch.equal(g["a"], torch.tensor([2.0, 4.0]))
    assert torch.equal(g["b"], torch.zeros(1))

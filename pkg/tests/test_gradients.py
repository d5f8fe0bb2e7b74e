import math

import numpy as np
import pytest
import torch

from conftest import random_spikes, small_net
from snncert.gradients import (AdamState, GradientTape, Surrogate, backprop,
                               loss_value, sgd_step)
from snncert.kernels import DTYPE
from snncert.network import LifParams, Layer, Network, run_network
from snncert.gradients import make_fire


def test_zero_width_surrogate_cuts_input_gradients():
    net = small_net(seed=1, tsteps=3)
    x = random_spikes((3, 2), 7)
    tape = backprop(net, x, 0, surrogate=Surrogate(width=0.0))
    assert not tape.input_grad.abs().any()


def test_gradient_shapes_mirror_parameters():
    net = small_net(arch="X-FC4-FC3", in_shape=(5,), seed=2, tsteps=2)
    x = random_spikes((2, 5), 8)
    tape = backprop(net, x, 1)
    for layer, dw, db in zip(net.layers, tape.weight_grads, tape.bias_grads):
        assert dw.shape == layer.weight.shape
        assert db.shape == layer.bias.shape
    assert tape.input_grad.shape == x.shape


def test_linear_debug_mode_matches_least_squares():
    # one FC layer, T=1, identity fire, MSE loss: the model is plain linear
    # regression and the gradient has the textbook closed form
    torch.manual_seed(0)
    w = torch.randn(3, 4, dtype=DTYPE) * 0.3
    b = torch.randn(3, dtype=DTYPE) * 0.1
    net = Network([Layer("fc", w.clone(), b.clone(), in_shape=(4,), out_shape=(3,))],
                  LifParams(0.25, 0.25), 1, (4,))
    x = torch.tensor([[1.0, 0.0, 1.0, 1.0]], dtype=DTYPE)
    y = 2
    tape = backprop(net, x, y, loss_kind="mse", mode="linear")
    # rates == m - th (identity fire of the shifted membrane); d(mse)/dm closed form
    m = (w @ x[0] + b) - 0.25
    onehot = torch.zeros(3, dtype=DTYPE)
    onehot[y] = 1.0
    dm = 2.0 * (m - onehot) / 3.0
    assert torch.allclose(tape.weight_grads[0], torch.outer(dm, x[0]), atol=1e-12)
    assert torch.allclose(tape.bias_grads[0], dm, atol=1e-12)


def fd_gradient(net, x, y, param, h=1e-5, surrogate=None, kappa_loss="ce"):
    """Central finite differences of the smooth-mode loss along each coordinate."""
    surrogate = surrogate or Surrogate(temperature=0.4)
    fire = make_fire(surrogate, mode="smooth")

    def eval_loss():
        trace = run_network(net, x, fire)
        return float(loss_value(trace.output_rates(), y, kappa_loss))

    grad = torch.zeros_like(param)
    flat = param.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + h
        up = eval_loss()
        with torch.no_grad():
            flat[i] = orig - h
        down = eval_loss()
        with torch.no_grad():
            flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


@pytest.mark.parametrize("seed", [3, 4, 5])
def test_smooth_mode_gradients_match_finite_differences(seed):
    surrogate = Surrogate(temperature=0.4)
    net = small_net(arch="X-FC3-FC2", in_shape=(3,), seed=seed, tsteps=3,
                    weight_scale=2.0)
    x = random_spikes((3, 1, 3), 30 + seed)
    tape = backprop(net, x, 1, surrogate=surrogate, mode="smooth")
    worst = 0.0
    for layer, dw in zip(net.layers, tape.weight_grads):
        fd = fd_gradient(net, x, 1, layer.weight, surrogate=surrogate)
        denom = fd.abs().clamp(min=1e-6)
        worst = max(worst, float(((dw - fd).abs() / denom).max()))
    assert worst < 1e-4


def test_smooth_mode_input_gradients_match_finite_differences():
    surrogate = Surrogate(temperature=0.4)
    net = small_net(arch="X-FC3-FC2", in_shape=(3,), seed=6, tsteps=2,
                    weight_scale=2.0)
    x = random_spikes((2, 1, 3), 40)
    tape = backprop(net, x, 0, surrogate=surrogate, mode="smooth")
    fire = make_fire(surrogate, mode="smooth")
    fd = torch.zeros_like(x)
    h = 1e-5
    for idx in np.ndindex(*x.shape):
        for sgn in (+1, -1):
            xs = x.clone()
            xs[idx] += sgn * h
            trace = run_network(net, xs, fire)
            fd[idx] += sgn * float(loss_value(trace.output_rates(), 0))
    fd /= 2 * h
    denom = fd.abs().clamp(min=1e-6)
    assert float(((tape.input_grad - fd).abs() / denom).max()) < 1e-4


def test_detach_reset_changes_gradients_but_not_spikes():
    net = small_net(seed=12, tsteps=4)
    x = random_spikes((4, 2), 13)
    full = backprop(net, x, 0, surrogate=Surrogate(width=1.0))
    cut = backprop(net, x, 0, surrogate=Surrogate(width=1.0), detach_reset=True)
    for a, b in zip(full.trace.spikes, cut.trace.spikes):
        assert torch.equal(a, b)
    assert not all(torch.equal(a, b) for a, b in
                   zip(full.weight_grads, cut.weight_grads))


def test_sgd_step_zero_grad_and_zero_lr():
    net = small_net(seed=7)
    x = random_spikes((2, 2), 9)
    tape = backprop(net, x, 0)
    before = [p.clone() for p in net.parameters()]
    zero_tape = GradientTape([torch.zeros_like(l.weight) for l in net.layers],
                             [torch.zeros_like(l.bias) for l in net.layers],
                             None, 0.0)
    sgd_step(net, zero_tape, 0.5)
    for p, b in zip(net.parameters(), before):
        assert torch.equal(p, b)
    sgd_step(net, tape, 0.0)
    for p, b in zip(net.parameters(), before):
        assert torch.equal(p, b)


def test_sgd_step_scalar_arithmetic():
    layer = Layer("fc", torch.tensor([[1.0]], dtype=DTYPE),
                  torch.zeros(1, dtype=DTYPE), in_shape=(1,), out_shape=(1,))
    net = Network([layer], LifParams(), 1, (1,))
    tape = GradientTape([torch.tensor([[2.0]], dtype=DTYPE)],
                        [torch.zeros(1, dtype=DTYPE)], None, 0.0)
    sgd_step(net, tape, 0.1)
    assert layer.weight.item() == pytest.approx(0.8)


def test_sgd_step_shape_mismatch():
    net = small_net(seed=8)
    bad = GradientTape([torch.zeros(1, 1, dtype=DTYPE) for _ in net.layers],
                       [torch.zeros(1, dtype=DTYPE) for _ in net.layers], None, 0.0)
    with pytest.raises(ValueError):
        sgd_step(net, bad, 0.1)


def test_adam_optimizer_reduces_loss():
    net = small_net(arch="X-FC4-FC2", in_shape=(4,), seed=10, tsteps=3,
                    weight_scale=2.0)
    adam = AdamState(net)
    x = random_spikes((3, 4), 11)
    first = backprop(net, x, 1, surrogate=Surrogate(width=1.0))
    for _ in range(30):
        tape = backprop(net, x, 1, surrogate=Surrogate(width=1.0))
        adam.step(net, tape, 0.05)
    last = backprop(net, x, 1, surrogate=Surrogate(width=1.0))
    assert last.loss <= first.loss


def test_loss_uniform_ce_is_log_num_classes():
    rates = torch.full((10,), 0.3, dtype=DTYPE)
    assert float(loss_value(rates, 4, "ce")) == pytest.approx(math.log(10), abs=1e-12)


def test_loss_matching_one_hot_mse_is_zero():
    rates = torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE)
    assert float(loss_value(rates, 1, "mse")) == 0.0


def test_loss_ce_matches_scalar_recomputation():
    rates = torch.tensor([0.2, 0.7, 0.1], dtype=DTYPE)
    got = float(loss_value(rates, 2, "ce"))
    exps = [math.exp(r) for r in rates.tolist()]
    want = -math.log(exps[2] / sum(exps))
    assert got == pytest.approx(want, abs=1e-12)


def test_loss_nonnegative_and_minimized_on_true_class():
    good = loss_value(torch.tensor([0.0, 1.0, 0.0], dtype=DTYPE), 1, "ce")
    bad = loss_value(torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE), 1, "ce")
    assert 0 <= float(good) < float(bad)


def test_loss_target_validation():
    with pytest.raises(ValueError):
        loss_value(torch.ones(3, dtype=DTYPE), 5, "ce")
    with pytest.raises(ValueError):
        loss_value(torch.ones(3, dtype=DTYPE), 0, "hinge")

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from snncert.data import synth_bars, synth_blobs, synth_spike_bars
from snncert.gradients import Surrogate
from snncert.input_box import derive_seed, sample_through_maps
from snncert.kernels import DTYPE
from snncert.network import init_network, run_network
from snncert.training import (TrainConfig, _build_box, _params_grad, accuracy,
                              eps_at, robust_loss, train_natural, train_robust,
                              verified_error)


def test_eps_schedule_endpoints_and_midpoint():
    cfg = TrainConfig(epochs_total=300, ramp_epochs=250, eps_final=0.12)
    assert eps_at(0, cfg) == 0.0
    assert eps_at(125, cfg) == pytest.approx(0.06)
    assert eps_at(250, cfg) == pytest.approx(0.12)
    assert eps_at(280, cfg) == pytest.approx(0.12)
    with pytest.raises(ValueError):
        eps_at(300, cfg)
    with pytest.raises(ValueError):
        eps_at(-1, cfg)


def test_eps_schedule_mid_ramp_linear():
    cfg = TrainConfig(epochs_total=250, ramp_epochs=250, eps_final=0.12)
    assert eps_at(125, cfg) == pytest.approx(0.06)


def small_digital_setup(seed=0):
    ds = synth_blobs(8, seed=seed, classes=2, dim=6)
    net = init_network("X-FC4-FC2", ds.input_shape, seed=seed + 1, time_steps=3)
    with torch.no_grad():
        for layer in net.layers:
            layer.weight *= 3.0
    return net, ds


def test_robust_loss_kappa_one_is_natural_loss():
    net, ds = small_digital_setup()
    x, y = ds.images, ds.labels
    full, parts = robust_loss(net, x, y, eps=0.1, tprime=2, kappa=1.0, seed=3,
                              input_kind="digital")
    assert float(full) == parts["natural"]
    assert parts["margins"] is None


def test_robust_loss_eps_zero_uses_exact_margins():
    net, ds = small_digital_setup(seed=4)
    x, y = ds.images, ds.labels
    loss, parts = robust_loss(net, x, y, eps=0.0, tprime=3, kappa=0.0, seed=5,
                              input_kind="digital")
    # degenerate box: bound margins equal the exact margins of the center input
    box = _build_box(net, x, "digital", 0.0, 3, derive_seed(5, 1))
    center = sample_through_maps(x, box.rand_maps)
    with torch.no_grad():
        trace = run_network(net, center)
    rates = trace.output_rates()
    eye = torch.eye(2, dtype=DTYPE)
    exact_margins = (rates * eye[y]).sum(-1, keepdim=True) - rates
    exact_margins[torch.arange(len(y)), y] = 0.0
    want = F.cross_entropy(-exact_margins, y)
    assert float(loss) == pytest.approx(float(want), abs=1e-9)


def test_robust_loss_mixes_components():
    net, ds = small_digital_setup(seed=6)
    x, y = ds.images, ds.labels
    loss, parts = robust_loss(net, x, y, eps=0.2, tprime=2, kappa=0.3, seed=7,
                              input_kind="digital")
    assert float(loss) == pytest.approx(0.3 * parts["natural"] + 0.7 * parts["robust"])
    assert torch.isfinite(parts["margins"]).all()


def test_robust_loss_spike_inputs():
    ds = synth_spike_bars(6, seed=8, tsteps=4, classes=3, height=4, width=4)
    net = init_network("X-FC6-FC3", ds.input_shape, seed=9, time_steps=4)
    loss, parts = robust_loss(net, ds.spikes, ds.labels, eps=0.1, tprime=2,
                              kappa=0.5, seed=10, input_kind="spike")
    assert torch.isfinite(loss)
    assert parts["margins"].shape == (6, 3)


def test_robust_loss_aborts_on_non_finite_bounds():
    net, ds = small_digital_setup(seed=11)
    with torch.no_grad():
        net.layers[0].weight[0, 0] = float("inf")
    with pytest.raises(RuntimeError, match="finite"):
        robust_loss(net, ds.images, ds.labels, eps=0.1, tprime=2, kappa=0.0,
                    seed=12, input_kind="digital")


def test_robust_loss_gradients_match_finite_differences_smooth():
    net, ds = small_digital_setup(seed=13)
    x, y = ds.images[:4], ds.labels[:4]
    sur = Surrogate(temperature=0.4)

    def compute():
        loss, _ = robust_loss(net, x, y, eps=0.15, tprime=2, kappa=0.5, seed=14,
                              input_kind="digital", surrogate=sur, smooth=True)
        return loss

    with _params_grad(net) as params:
        grads = torch.autograd.grad(compute(), params)
    h = 1e-6
    worst = 0.0
    for p, g in zip(net.parameters(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(min(flat.numel(), 12)):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
            up = float(compute().detach())
            with torch.no_grad():
                flat[i] = orig - h
            down = float(compute().detach())
            with torch.no_grad():
                flat[i] = orig
            fd = (up - down) / (2 * h)
            if abs(fd) > 1e-5:
                worst = max(worst, abs(float(gflat[i]) - fd) / abs(fd))
    assert worst < 1e-3


def test_train_zero_epochs_returns_unchanged_network():
    ds = synth_bars(20, seed=15)
    net = init_network("X-FC8-FC10", ds.input_shape, seed=16, time_steps=4)
    before = [p.clone() for p in net.parameters()]
    _, metrics = train_natural(net, ds, ds, TrainConfig(epochs=0, seed=0))
    assert metrics == []
    _, metrics = train_robust(net, ds, ds, TrainConfig(epochs_total=0, seed=0))
    assert metrics == []
    for p, b in zip(net.parameters(), before):
        assert torch.equal(p, b)


def test_training_is_deterministic():
    ds_train = synth_bars(80, seed=17)
    ds_test = synth_bars(40, seed=18)
    results = []
    for _ in range(2):
        net = init_network("X-FC8-FC10", ds_train.input_shape, seed=19, time_steps=4)
        cfg = TrainConfig(epochs_total=3, ramp_epochs=2, eps_final=0.05,
                          tprime=2, robust_lr=0.05, batch_size=16, seed=20,
                          eval_examples=40)
        net, metrics = train_robust(net, ds_train, ds_test, cfg)
        results.append(([p.clone() for p in net.parameters()],
                        [(m.eps, m.nat_loss, m.robust_loss, m.nat_acc, m.verified_err)
                         for m in metrics]))
    assert results[0][1] == results[1][1]
    for a, b in zip(results[0][0], results[1][0]):
        assert torch.equal(a, b)


def trained_bars_net(seed=21, epochs=6):
    train = synth_bars(400, seed=seed)
    test = synth_bars(200, seed=seed + 1)
    net = init_network("X-FC16-FC10", train.input_shape, seed=seed + 2, time_steps=6)
    cfg = TrainConfig(epochs=epochs, batch_size=32, lr=0.05, lr_drop_epoch=100,
                      seed=seed, eval_examples=100)
    net, _ = train_natural(net, train, test, cfg)
    return net, test


def test_verified_error_at_eps_zero_equals_natural_error():
    net, test = trained_bars_net()
    seed = 30
    ve = verified_error(net, test, 0.0, net.time_steps, seed, limit=120)
    # recompute the natural error on the identical center samples
    from snncert.data import batch_iter
    wrong = 0
    done = 0
    for bi, (x, y) in enumerate(batch_iter(test, 64)):
        if done >= 120:
            break
        x, y = x[:120 - done], y[:120 - done]
        box = _build_box(net, x, "digital", 0.0, net.time_steps,
                         derive_seed(seed, 3, bi))
        center = sample_through_maps(x, box.rand_maps)
        with torch.no_grad():
            trace = run_network(net, center)
        preds = np.argmax(trace.output_counts.numpy(), axis=-1)
        wrong += int((preds != y.numpy()).sum())
        done += x.shape[0]
    assert ve == pytest.approx(wrong / 120)


def test_verified_error_monotone_in_eps():
    net, test = trained_bars_net(seed=23)
    errs = [verified_error(net, test, e, 3, seed=24, limit=100)
            for e in (0.0, 0.06, 0.12)]
    assert errs[0] <= errs[1] <= errs[2]
    assert all(0.0 <= e <= 1.0 for e in errs)


def test_accuracy_on_trained_model():
    net, test = trained_bars_net(seed=25)
    assert accuracy(net, test, seed=26, limit=100) > 0.9


def test_robust_training_on_spike_dataset():
    train = synth_spike_bars(120, seed=31, tsteps=5, classes=4, height=4, width=4)
    test = synth_spike_bars(60, seed=32, tsteps=5, classes=4, height=4, width=4)
    net = init_network("X-FC12-FC4", train.input_shape, seed=33, time_steps=5)
    cfg = TrainConfig(epochs_total=4, ramp_epochs=3, eps_final=0.08, tprime=2,
                      robust_lr=0.05, batch_size=24, seed=34, eval_examples=40)
    net, metrics = train_robust(net, train, test, cfg)
    assert len(metrics) == 4
    assert all(np.isfinite(m.robust_loss) for m in metrics)
    ve = verified_error(net, test, 0.08, 2, seed=35, limit=40)
    assert 0.0 <= ve <= 1.0


def test_metrics_csv_written(tmp_path):
    ds = synth_bars(40, seed=27)
    net = init_network("X-FC8-FC10", ds.input_shape, seed=28, time_steps=4)
    cfg = TrainConfig(epochs=2, batch_size=16, seed=29, eval_examples=20,
                      checkpoint_every=1)
    train_natural(net, ds, ds, cfg, out_dir=str(tmp_path))
    lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "epoch,eps,nat_loss,robust_loss,nat_acc,verified_err,seconds"
    assert len(lines) == 3
    assert (tmp_path / "checkpoints" / "final.ckpt").exists()
    assert (tmp_path / "checkpoints" / "epoch0001.ckpt").exists()

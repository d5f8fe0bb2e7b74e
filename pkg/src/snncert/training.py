"""Natural and certified training loops.

Certified training follows the usual ramp recipe: the perturbation budget
grows linearly from zero over most of the schedule, and the loss mixes the
plain rate cross-entropy with a cross-entropy on bound logits built from the
certified margin lower bounds (negated, zero for the true class). Gradients
flow through the interval pass and the relaxation coefficients; which case a
neuron falls into is treated as locally constant.

Bounding can run on fewer time steps than the simulation uses (parameters are
shared across time), which is the main cost knob of certified training.
"""

import csv
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .gradients import (GradientTape, AdamState, Surrogate, _run_detached_reset,
                        loss_value, make_fire, sgd_step)
from .input_box import (bound_digital, bound_spike_batch, derive_seed,
                        sample_digital, sample_through_maps)
from .kernels import DTYPE
from .linear_bounds import is_certified, margin_lower_bounds
from .network import Network, run_network, save_checkpoint
from .data import batch_iter


@dataclass
class TrainConfig:
    # shared
    batch_size: int = 64
    seed: int = 0
    loss_kind: str = "ce"
    optimizer: str = "sgd"            # "sgd" | "adam"
    surrogate: Surrogate = field(default_factory=Surrogate)
    detach_reset: bool = False
    eval_examples: int = 256          # test subset for per-epoch metrics
    checkpoint_every: int = 0         # 0 = final checkpoint only
    # natural schedule
    epochs: int = 80
    lr: float = 0.01
    lr_after: float = 0.001
    lr_drop_epoch: int = 55
    # certified schedule
    epochs_total: int = 300
    ramp_epochs: int = 250
    eps_final: float = 0.12
    tprime: int = 3
    robust_lr: float = 0.001
    kappa: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        if self.tprime < 1:
            raise ValueError("tprime must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    eps: float
    nat_loss: float
    robust_loss: float
    nat_acc: float
    verified_err: float
    seconds: float


METRICS_FIELDS = ["epoch", "eps", "nat_loss", "robust_loss", "nat_acc",
                  "verified_err", "seconds"]


def eps_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear ramp to eps_final over ramp_epochs, flat afterwards."""
    if not 0 <= epoch < cfg.epochs_total:
        raise ValueError(f"epoch {epoch} outside schedule of {cfg.epochs_total}")
    if cfg.ramp_epochs <= 0:
        return cfg.eps_final
    return cfg.eps_final * min(1.0, epoch / cfg.ramp_epochs)


@contextmanager
def _params_grad(net: Network):
    params = list(net.parameters())
    for p in params:
        p.requires_grad_(True)
    try:
        yield params
    finally:
        for p in params:
            p.requires_grad_(False)


def _natural_spikes(net: Network, x: torch.Tensor, kind: str, seed: int):
    """Time-major spike input for the simulation horizon."""
    if kind == "digital":
        return sample_digital(x, net.time_steps, seed)
    return x.movedim(1, 0).to(DTYPE)


def _build_box(net: Network, x: torch.Tensor, kind: str, eps: float,
               tprime: int, seed: int):
    if kind == "digital":
        return bound_digital(x, eps, tprime, seed)
    return bound_spike_batch(x.movedim(1, 0)[:tprime].to(DTYPE), eps, seed)


def _run_training_graph(net, spikes, fire, detach_reset):
    if detach_reset:
        return _run_detached_reset(net, spikes, fire)
    return run_network(net, spikes, fire)


def robust_loss(net: Network, x: torch.Tensor, labels: torch.Tensor, eps: float,
                tprime: int, kappa: float, seed: int, input_kind: str,
                surrogate: Surrogate = None, smooth: bool = False,
                loss_kind: str = "ce", detach_reset: bool = False):
    """Mixed natural / certified-bound loss for one batch.

    Returns (loss, parts) where parts carries the two components and the raw
    margin lower bounds. kappa=1 skips the bound computation entirely.
    """
    surrogate = surrogate or Surrogate()
    labels = torch.as_tensor(labels).reshape(-1)
    nat_spikes = _natural_spikes(net, x, input_kind, derive_seed(seed, 0))
    trace = _run_training_graph(net, nat_spikes, make_fire(surrogate, smooth=smooth),
                                detach_reset)
    nat_ce = loss_value(trace.output_rates(), labels, loss_kind)

    parts = {"natural": float(nat_ce.detach()), "robust": float(nat_ce.detach()), "margins": None}
    if kappa >= 1.0:
        return nat_ce, parts

    box = _build_box(net, x, input_kind, eps, tprime, derive_seed(seed, 1))
    margins = margin_lower_bounds(net, box, tprime, labels)
    if not torch.isfinite(margins).all():
        raise RuntimeError(f"certified bounds are not finite (eps={eps}, "
                           f"tprime={tprime}); aborting")
    rob_ce = F.cross_entropy(-margins, labels)
    parts["robust"] = float(rob_ce.detach())
    parts["margins"] = margins.detach()
    loss = kappa * nat_ce + (1.0 - kappa) * rob_ce
    return loss, parts


def _apply_update(net, grads, lr, adam):
    tape = GradientTape(weight_grads=list(grads[0::2]), bias_grads=list(grads[1::2]),
                        input_grad=None, loss=0.0)
    if adam is not None:
        adam.step(net, tape, lr)
    else:
        sgd_step(net, tape, lr)


def accuracy(net: Network, dataset, seed: int, limit: int = None,
             batch_size: int = 256, horizon: int = None) -> float:
    """Rate-coded accuracy; digital inputs are Bernoulli sampled per call."""
    n = min(limit or len(dataset), len(dataset))
    horizon = horizon or net.time_steps
    hits = 0
    done = 0
    for bi, (x, y) in enumerate(batch_iter(dataset, batch_size)):
        if done >= n:
            break
        x, y = x[: n - done], y[: n - done]
        spikes = _natural_spikes(net, x, dataset.kind, derive_seed(seed, 2, bi))
        with torch.no_grad():
            trace = run_network(net, spikes[:horizon])
        preds = np.argmax(trace.output_counts.numpy(), axis=-1)
        hits += int((preds == y.numpy()).sum())
        done += x.shape[0]
    return hits / max(1, done)


def verified_error(net: Network, dataset, eps: float, tprime: int, seed: int,
                   limit: int = None, batch_size: int = 64) -> float:
    """Fraction of examples that are misclassified on the box's center input
    or have any certified margin <= 0, both at the bounding horizon."""
    n = min(limit or len(dataset), len(dataset))
    bad = 0
    done = 0
    for bi, (x, y) in enumerate(batch_iter(dataset, batch_size)):
        if done >= n:
            break
        x, y = x[: n - done], y[: n - done]
        bseed = derive_seed(seed, 3, bi)
        box = _build_box(net, x, dataset.kind, eps, tprime, bseed)
        if dataset.kind == "digital":
            center = sample_through_maps(x, box.rand_maps)
        else:
            center = x.movedim(1, 0)[:tprime].to(DTYPE)
        with torch.no_grad():
            trace = run_network(net, center)
            margins = margin_lower_bounds(net, box, tprime, y)
        preds = np.argmax(trace.output_counts.numpy(), axis=-1)
        ok = torch.as_tensor(preds == y.numpy()) & is_certified(margins, y)
        bad += int((~ok).sum())
        done += x.shape[0]
    return bad / max(1, done)


def _write_metrics(out_dir, rows):
    if out_dir is None:
        return
    path = os.path.join(out_dir, "metrics.csv")
    write_header = not os.path.exists(path)
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
        if write_header:
            w.writeheader()
        for row in rows:
            w.writerow({k: getattr(row, k) for k in METRICS_FIELDS})


def _maybe_checkpoint(net, out_dir, epoch, cfg, final=False):
    if out_dir is None:
        return
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    if final:
        save_checkpoint(net, os.path.join(ckpt_dir, "final.ckpt"))
    elif cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
        save_checkpoint(net, os.path.join(ckpt_dir, f"epoch{epoch + 1:04d}.ckpt"))


def train_natural(net: Network, train_set, test_set, cfg: TrainConfig,
                  out_dir: str = None):
    """Plain surrogate-gradient training on rate cross-entropy."""
    metrics = []
    adam = AdamState(net) if cfg.optimizer == "adam" else None
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr if epoch < cfg.lr_drop_epoch else cfg.lr_after
        losses = []
        for step, (x, y) in enumerate(batch_iter(train_set, cfg.batch_size,
                                                 cfg.seed, epoch)):
            spikes = _natural_spikes(net, x, train_set.kind,
                                     derive_seed(cfg.seed, 10, epoch, step))
            with _params_grad(net) as params:
                trace = _run_training_graph(net, spikes, make_fire(cfg.surrogate),
                                            cfg.detach_reset)
                loss = loss_value(trace.output_rates(), y, cfg.loss_kind)
                grads = torch.autograd.grad(loss, params)
            _apply_update(net, grads, lr, adam)
            losses.append(float(loss.detach()))
        nat_acc = accuracy(net, test_set, cfg.seed, cfg.eval_examples)
        row = EpochMetrics(epoch, 0.0, float(np.mean(losses)), 0.0, nat_acc, 0.0,
                           time.perf_counter() - t0)
        metrics.append(row)
        _write_metrics(out_dir, [row])
        _maybe_checkpoint(net, out_dir, epoch, cfg)
    _maybe_checkpoint(net, out_dir, cfg.epochs, cfg, final=True)
    return net, metrics


def train_robust(net: Network, train_set, test_set, cfg: TrainConfig,
                 out_dir: str = None):
    """Certified training with the linear eps ramp and reduced-step bounding."""
    metrics = []
    adam = AdamState(net) if cfg.optimizer == "adam" else None
    for epoch in range(cfg.epochs_total):
        t0 = time.perf_counter()
        eps = eps_at(epoch, cfg)
        nat_losses, rob_losses = [], []
        for step, (x, y) in enumerate(batch_iter(train_set, cfg.batch_size,
                                                 cfg.seed, epoch)):
            step_seed = derive_seed(cfg.seed, 20, epoch, step)
            with _params_grad(net) as params:
                loss, parts = robust_loss(net, x, y, eps, cfg.tprime, cfg.kappa,
                                          step_seed, train_set.kind,
                                          cfg.surrogate, loss_kind=cfg.loss_kind,
                                          detach_reset=cfg.detach_reset)
                grads = torch.autograd.grad(loss, params)
            _apply_update(net, grads, cfg.robust_lr, adam)
            nat_losses.append(parts["natural"])
            rob_losses.append(parts["robust"])
        nat_acc = accuracy(net, test_set, cfg.seed, cfg.eval_examples)
        ver_err = verified_error(net, test_set, eps, cfg.tprime,
                                 derive_seed(cfg.seed, 21, epoch),
                                 limit=cfg.eval_examples)
        row = EpochMetrics(epoch, eps, float(np.mean(nat_losses)),
                           float(np.mean(rob_losses)), nat_acc, ver_err,
                           time.perf_counter() - t0)
        metrics.append(row)
        _write_metrics(out_dir, [row])
        _maybe_checkpoint(net, out_dir, epoch, cfg)
    _maybe_checkpoint(net, out_dir, cfg.epochs_total, cfg, final=True)
    return net, metrics

"""Untargeted white-box gradient attacks on spike and digital inputs.

Spike attack: iteratively flip the input bits whose gradient sign says the
flip raises the loss, a capped number per iteration, never moving more than a
total flip budget away from the original input. Digital attack: sample spikes,
average the per-time-step input gradients, take a signed step on the image,
clip into the allowed interval around the original, re-sample and re-test.

Both stop at the first misclassification; an originally misclassified input
counts as attacked, so the aggregate attack error always contains the
original error.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .gradients import Surrogate, backprop
from .input_box import (SpikeInputBox, derive_seed, sample_digital,
                        sample_through_maps)
from .kernels import DTYPE
from .network import Network, forward, predict


@dataclass
class AttackConfig:
    eps: float = 0.1
    max_iters: int = 20
    divisor: int = 0                 # per-iteration flip cap divisor; 0 = auto
    step_divisor: float = 8.0        # digital step size = eps / step_divisor
    examples: int = 300
    seed: int = 0
    loss_kind: str = "ce"
    surrogate: Surrogate = field(default_factory=Surrogate)

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("attack eps must be >= 0")

    def flip_divisor(self, net: "Network") -> int:
        """Explicit value, or 2 for pure-FC networks and 6 for conv networks."""
        if self.divisor:
            return self.divisor
        return 6 if any(l.kind == "conv" for l in net.layers) else 2


@dataclass
class AttackOutcome:
    success: bool
    iterations: int
    distance: float                  # flips used (spike) / max image shift (digital)
    originally_wrong: bool


@dataclass
class AttackResult:
    outcomes: list

    @property
    def org_err(self) -> float:
        return float(np.mean([o.originally_wrong for o in self.outcomes]))

    @property
    def attack_err(self) -> float:
        return float(np.mean([o.success for o in self.outcomes]))


def _select_flips(benefit: np.ndarray, changed: np.ndarray, allowed: np.ndarray,
                  per_iter: int, budget: int):
    """Pick flip positions by descending benefit.

    Flips of already-changed positions move the input back toward the original
    and are always admissible; flips of unchanged positions are admitted only
    while the total change count stays within the budget.
    """
    order = np.argsort(-benefit, kind="stable")
    used = int(changed.sum())
    picks = []
    for idx in order:
        if len(picks) >= per_iter or benefit[idx] <= 0:
            break
        if not allowed[idx]:
            continue
        if changed[idx]:
            picks.append(idx)
            used -= 1
        elif used < budget:
            picks.append(idx)
            used += 1
    return picks


def attack_spike(net: Network, x_dot: torch.Tensor, y_org: int, cfg: AttackConfig,
                 box: SpikeInputBox = None, horizon: int = None) -> AttackOutcome:
    """Gradient-guided bit-flip attack on one binary spike input (T, *shape).

    With a box the flips are confined to its unstable positions and the budget
    is the box size, which makes the attack comparable against certificates
    computed for the same box.
    """
    horizon = horizon or net.time_steps
    x0 = x_dot[:horizon].to(DTYPE).clone()
    n = x0.numel()
    if box is not None:
        allowed = (box.upper - box.lower).reshape(-1).numpy() > 0
        budget = int(allowed.sum())
    else:
        allowed = np.ones(n, dtype=bool)
        budget = int(n * cfg.eps)
    divisor = cfg.flip_divisor(net)
    per_iter = min(budget, max(1, int(n * cfg.eps / divisor))) if budget else 0

    pred = predict(forward(net, x0))
    if pred != int(y_org):
        return AttackOutcome(True, 0, 0.0, True)

    x = x0.clone()
    flat0 = x0.reshape(-1).numpy()
    for it in range(1, cfg.max_iters + 1):
        if per_iter == 0:
            break
        tape = backprop(net, x, int(y_org), cfg.loss_kind, cfg.surrogate)
        g = tape.input_grad.reshape(-1).numpy()
        cur = x.reshape(-1).numpy()
        benefit = g * (1.0 - 2.0 * cur)
        picks = _select_flips(benefit, cur != flat0, allowed, per_iter, budget)
        if not picks:
            break
        flat = x.reshape(-1)
        for idx in picks:
            flat[idx] = 1.0 - flat[idx]
        if predict(forward(net, x)) != int(y_org):
            dist = float((x.reshape(-1) != torch.as_tensor(flat0)).sum())
            return AttackOutcome(True, it, dist, False)
    dist = float((x.reshape(-1) != torch.as_tensor(flat0)).sum())
    return AttackOutcome(False, cfg.max_iters, dist, False)


def attack_digital(net: Network, x_hat: torch.Tensor, y_org: int, cfg: AttackConfig,
                   seed: int = None, rand_maps: torch.Tensor = None,
                   horizon: int = None) -> AttackOutcome:
    """Signed-gradient attack on one digital input (*shape) in [0, 1].

    rand_maps pins every Bernoulli sampling to fixed maps (the box-aligned
    evaluation mode); otherwise each sampling draws fresh maps from the seed.
    """
    seed = cfg.seed if seed is None else seed
    horizon = horizon or net.time_steps
    x0 = x_hat.to(DTYPE).clone()
    lo_clip = (x0 - cfg.eps / 2).clamp(min=0.0)
    hi_clip = (x0 + cfg.eps / 2).clamp(max=1.0)

    def encode(img, sub):
        if rand_maps is not None:
            return sample_through_maps(img, rand_maps[:horizon])
        return sample_digital(img, horizon, derive_seed(seed, sub))

    pred = predict(forward(net, encode(x0, 0)))
    if pred != int(y_org):
        return AttackOutcome(True, 0, 0.0, True)
    if cfg.eps == 0:
        return AttackOutcome(False, 0, 0.0, False)

    step = cfg.eps / cfg.step_divisor
    x = x0.clone()
    for it in range(1, cfg.max_iters + 1):
        spikes = encode(x, 2 * it - 1)
        tape = backprop(net, spikes, int(y_org), cfg.loss_kind, cfg.surrogate)
        g = tape.input_grad.mean(dim=0)
        x = (x + step * torch.sign(g)).clamp(min=lo_clip, max=hi_clip)
        if predict(forward(net, encode(x, 2 * it))) != int(y_org):
            return AttackOutcome(True, it, float((x - x0).abs().max()), False)
    return AttackOutcome(False, cfg.max_iters, float((x - x0).abs().max()), False)


def evaluate(net: Network, dataset, cfg: AttackConfig, workers: int = 1) -> AttackResult:
    """Attack the first `examples` entries of the dataset and aggregate."""
    n = min(cfg.examples, len(dataset))

    def run_one(i):
        if dataset.kind == "digital":
            return attack_digital(net, dataset.images[i], int(dataset.labels[i]),
                                  cfg, seed=derive_seed(cfg.seed, 4, i))
        return attack_spike(net, dataset.spikes[i], int(dataset.labels[i]), cfg)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_one, range(n)))
    else:
        outcomes = [run_one(i) for i in range(n)]
    return AttackResult(outcomes)

"""Perturbation sets at the input layer.

Spike inputs get a flip-count boundary: per time step a seeded random subset of
elements is marked unstable (free to be 0 or 1), everything else is pinned to
the observed spike. Digital inputs in [0, 1] get a per-pixel interval of width
eps; sampling the interval endpoints through one shared random map per time
step yields binary upper/lower spike planes whose per-element unstable
probability is exactly eps, so the two boundary styles coincide statistically.

All randomness comes from counter-based Philox streams keyed by a 64-bit seed.
"""

from dataclasses import dataclass

import numpy as np
import torch

from .kernels import DTYPE

RNG_NAME = "philox"


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Deterministic stream for (seed, path...); independent across paths."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path: int) -> int:
    """Fold (seed, path...) into a fresh 64-bit seed for downstream streams."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0])


@dataclass
class SpikeInputBox:
    """Elementwise bounds on a binary spike tensor, lower <= upper."""
    lower: torch.Tensor          # (T, *shape) or (T, B, *shape), values in {0,1}
    upper: torch.Tensor
    seed: int = None
    rand_maps: torch.Tensor = None   # digital boxes keep the sampling maps

    def __post_init__(self):
        if self.lower.shape != self.upper.shape:
            raise ValueError("box bounds must share a shape")
        if bool((self.lower > self.upper).any()):
            raise ValueError("box lower bound exceeds upper bound")
        for side in (self.lower, self.upper):
            if not bool(((side == 0) | (side == 1)).all()):
                raise ValueError("box bounds must be binary")

    @property
    def unstable(self) -> torch.Tensor:
        return self.upper - self.lower

    @property
    def unstable_count(self) -> int:
        return int(self.unstable.sum().item())

    def contains(self, spikes: torch.Tensor) -> bool:
        return bool(((spikes >= self.lower) & (spikes <= self.upper)).all())


def _check_eps(eps: float):
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")


def bound_spike(x_dot: torch.Tensor, eps: float, seed: int) -> SpikeInputBox:
    """Flip-count boundary for a binary spike input of shape (T, *shape):
    floor(n_elements * eps) uniformly chosen elements per time step become
    unstable (lower 0, upper 1); all others stay pinned to the observed value."""
    _check_eps(eps)
    x_dot = x_dot.to(DTYPE)
    if not bool(((x_dot == 0) | (x_dot == 1)).all()):
        raise ValueError("spike input must be binary")
    tsteps = x_dot.shape[0]
    n_elems = int(np.prod(x_dot.shape[1:]))
    lower = x_dot.clone().reshape(tsteps, -1)
    upper = x_dot.clone().reshape(tsteps, -1)
    k = int(n_elems * eps)
    if k > 0:
        for t in range(tsteps):
            pick = torch.as_tensor(rng_for(seed, t).choice(n_elems, size=k, replace=False))
            lower[t].index_fill_(0, pick, 0.0)
            upper[t].index_fill_(0, pick, 1.0)
    return SpikeInputBox(lower.reshape(x_dot.shape), upper.reshape(x_dot.shape), seed=seed)


def bound_spike_batch(x_dot: torch.Tensor, eps: float, seed: int) -> SpikeInputBox:
    """bound_spike for (T, B, *shape) inputs; the pick is independent per
    example and time step (streams keyed by both indices)."""
    _check_eps(eps)
    x_dot = x_dot.to(DTYPE)
    tsteps, batch = x_dot.shape[0], x_dot.shape[1]
    n_elems = int(np.prod(x_dot.shape[2:]))
    lower = x_dot.clone().reshape(tsteps, batch, -1)
    upper = x_dot.clone().reshape(tsteps, batch, -1)
    k = int(n_elems * eps)
    if k > 0:
        for t in range(tsteps):
            for b in range(batch):
                pick = torch.as_tensor(rng_for(seed, t, b).choice(n_elems, size=k, replace=False))
                lower[t, b].index_fill_(0, pick, 0.0)
                upper[t, b].index_fill_(0, pick, 1.0)
    return SpikeInputBox(lower.reshape(x_dot.shape), upper.reshape(x_dot.shape), seed=seed)


def bound_digital(x_hat: torch.Tensor, eps: float, tsteps: int, seed: int) -> SpikeInputBox:
    """Interval boundary for a digital input of shape (*shape) or (B, *shape).

    Per time step one shared uniform map rand_t is drawn; the upper spike plane
    samples x_hat + eps/2 against it and the lower plane samples x_hat - eps/2,
    so any sample of any image within eps/2 of x_hat (under the same maps)
    lands inside the box.
    """
    _check_eps(eps)
    x_hat = x_hat.to(DTYPE)
    if bool((x_hat < 0).any()) or bool((x_hat > 1).any()):
        raise ValueError("digital input must lie in [0, 1]")
    rng = rng_for(seed)
    rand = torch.from_numpy(rng.random((tsteps, *x_hat.shape), dtype=np.float64))
    upper = ((x_hat + eps / 2) > rand).to(DTYPE)
    lower = ((x_hat - eps / 2) > rand).to(DTYPE)
    return SpikeInputBox(lower, upper, seed=seed, rand_maps=rand)


def sample_through_maps(x_hat: torch.Tensor, rand_maps: torch.Tensor) -> torch.Tensor:
    """Bernoulli sample of x_hat using stored maps; the center sample of a
    digital box when called with the box's own rand_maps."""
    return (x_hat > rand_maps).to(DTYPE)


def sample_digital(x_hat: torch.Tensor, tsteps: int, seed: int) -> torch.Tensor:
    """Plain Bernoulli encoding: P(spike at t, i) = x_hat[i], independent across
    elements and time steps. Output shape (tsteps, *x_hat.shape)."""
    x_hat = x_hat.to(DTYPE)
    if bool((x_hat < 0).any()) or bool((x_hat > 1).any()):
        raise ValueError("digital input must lie in [0, 1]")
    rng = rng_for(seed)
    rand = torch.from_numpy(rng.random((tsteps, *x_hat.shape), dtype=np.float64))
    return (x_hat > rand).to(DTYPE)

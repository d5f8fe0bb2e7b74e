"""Forward interval propagation through a spiking network.

Given elementwise bounds on the input spikes, propagate sound lower/upper
bounds for every membrane potential, spike and reset carry at every layer and
time step. Per (t, k) the order matches the exact simulation: accumulate the
spatial projection into the membrane bounds, derive the decayed carry bounds
feeding the next time step, then threshold to get the spike bounds.

The carry z = m * (1 - s) is bounded per neuron by three cases on the membrane
interval: below threshold it passes m through, at or above threshold it is
exactly zero, and a straddling interval yields [min(0, m_lo), threshold).
"""

from dataclasses import dataclass

import torch

from .input_box import SpikeInputBox
from .kernels import DTYPE, conv2d, matmul, split_sign
from .network import Layer, Network


@dataclass
class IntervalBounds:
    """Per-layer bound tensors, time-major: each entry is (T, B, *shape_k)."""
    m_lo: list
    m_hi: list
    s_lo: list
    s_hi: list
    z_lo: list
    z_hi: list
    input_lo: torch.Tensor
    input_hi: torch.Tensor

    def layer_count(self) -> int:
        return len(self.m_lo)


def fire_interval(m_hi: torch.Tensor, m_lo: torch.Tensor, threshold: float):
    """Spike bounds: thresholding is monotone, so bound images of the endpoints."""
    s_hi = (m_hi >= threshold).to(DTYPE)
    s_lo = (m_lo >= threshold).to(DTYPE)
    return s_hi, s_lo


def carry_interval(m_hi: torch.Tensor, m_lo: torch.Tensor, threshold: float):
    """Bounds on the pre-decay reset carry z = m * (1 - fire(m - threshold))."""
    silent = m_hi < threshold
    firing = m_lo >= threshold
    z_hi = torch.where(silent, m_hi,
                       torch.where(firing, torch.zeros_like(m_hi),
                                   torch.full_like(m_hi, threshold)))
    z_lo = torch.where(silent, m_lo,
                       torch.where(firing, torch.zeros_like(m_lo),
                                   m_lo.clamp(max=0.0)))
    return z_hi, z_lo


def spatial_interval(layer: Layer, s_hi: torch.Tensor, s_lo: torch.Tensor):
    """Bounds on w (x) s + b over binary spikes with s_lo <= s <= s_hi.

    Stable spikes contribute through the center term; each unstable presynaptic
    neuron adds its positive weights to the upper bound and its negative
    weights to the lower bound.
    """
    unstable = (s_hi - s_lo).detach()
    center = layer.spatial(s_lo)
    w_plus, w_minus = split_sign(layer.weight)
    if layer.kind == "fc":
        flat = unstable.reshape(unstable.shape[0], -1)
        up = center + matmul(flat, w_plus.t())
        lo = center + matmul(flat, w_minus.t())
    else:
        up = center + conv2d(unstable, w_plus, None, layer.stride, layer.padding)
        lo = center + conv2d(unstable, w_minus, None, layer.stride, layer.padding)
    return up, lo


def run_intervals(net: Network, box: SpikeInputBox, tsteps: int = None) -> IntervalBounds:
    """Propagate the input box through `tsteps` time steps of the network.

    Box tensors may be (T, *input_shape) or (T, B, *input_shape); bounds come
    back batched either way (B=1 for the former).
    """
    lo, hi = box.lower.to(DTYPE), box.upper.to(DTYPE)
    if lo.dim() == 1 + len(net.input_shape):
        lo, hi = lo.unsqueeze(1), hi.unsqueeze(1)
    tsteps = tsteps if tsteps is not None else lo.shape[0]
    if tsteps < 1 or tsteps > lo.shape[0]:
        raise ValueError(f"tsteps must lie in [1, {lo.shape[0]}], got {tsteps}")
    if lo.shape[2:] != net.input_shape:
        raise ValueError(f"box shape {tuple(lo.shape[2:])} does not match network "
                         f"input {net.input_shape}")
    th, decay = net.lif.threshold, net.lif.decay
    n_layers = len(net.layers)

    carry_hi = [None] * n_layers
    carry_lo = [None] * n_layers
    rows = lambda: [[] for _ in range(n_layers)]
    m_lo, m_hi, s_lo, s_hi, z_lo, z_hi = rows(), rows(), rows(), rows(), rows(), rows()

    for t in range(tsteps):
        below_hi, below_lo = hi[t], lo[t]
        for k, layer in enumerate(net.layers):
            sp_hi, sp_lo = spatial_interval(layer, below_hi, below_lo)
            mu = sp_hi + (carry_hi[k] if carry_hi[k] is not None else 0.0)
            ml = sp_lo + (carry_lo[k] if carry_lo[k] is not None else 0.0)
            zu, zl = carry_interval(mu, ml, th)
            carry_hi[k], carry_lo[k] = decay * zu, decay * zl
            su, sl = fire_interval(mu, ml, th)
            m_hi[k].append(mu); m_lo[k].append(ml)
            z_hi[k].append(zu); z_lo[k].append(zl)
            s_hi[k].append(su); s_lo[k].append(sl)
            below_hi, below_lo = su, sl

    stack = lambda rows_k: [torch.stack(r) for r in rows_k]
    return IntervalBounds(m_lo=stack(m_lo), m_hi=stack(m_hi),
                          s_lo=stack(s_lo), s_hi=stack(s_hi),
                          z_lo=stack(z_lo), z_hi=stack(z_hi),
                          input_lo=lo[:tsteps], input_hi=hi[:tsteps])

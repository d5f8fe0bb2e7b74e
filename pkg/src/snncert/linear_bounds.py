"""Backward linear bound propagation through a spiking network.

Expresses a lower bound on linear output specifications (per-class rates, or
true-minus-other rate margins) as a linear function of the bounded input
spikes, then concretizes it over the input box. Each nonlinearity is replaced
by a pair of bounding lines selected per neuron from its forward interval:

Fire (spike as a function of membrane potential): stable neurons get the exact
constant lines 0/0 or 1/1. A straddling interval [m_lo, m_hi) around the
threshold gets, depending on which side is wider, either lower line 0 with an
upper line through (m_lo, 0) and (threshold, 1), or upper line 1 with a lower
line through (threshold, 0) and (m_hi, 1).

Reset carry (z = m * (1 - s), jointly in m and (1 - s)): stable neurons are
exact (z = m or z = 0); straddling neurons are bounded by the planes
(1 - s) * m_lo <= z <= (1 - s) * threshold.

Coefficients propagate backward through layers and time: positive coefficients
bind to lower relaxations and negative ones to upper relaxations, affine
layers transpose through exactly, and the carry planes route coefficients from
a membrane at time t onto the membrane and spike at time t-1.
"""

import torch

from .input_box import SpikeInputBox
from .interval_bounds import IntervalBounds, run_intervals
from .kernels import DTYPE, conv2d_transpose, matmul, split_sign
from .network import Layer, Network


def fire_relaxation(m_hi: torch.Tensor, m_lo: torch.Tensor, threshold: float):
    """Bounding lines d_l*m + b_l <= fire(m - threshold) <= d_u*m + b_u over
    [m_lo, m_hi]. Returns (d_l, b_l, d_u, b_u) elementwise."""
    silent = m_hi < threshold
    firing = m_lo >= threshold
    unstable = ~(silent | firing)
    wide_top = unstable & ((m_hi - threshold) >= (threshold - m_lo))
    narrow_top = unstable & ~wide_top

    zeros = torch.zeros_like(m_hi)
    ones = torch.ones_like(m_hi)
    # guarded denominators: strictly positive wherever the case is selected
    den_n = torch.where(narrow_top, threshold - m_lo, ones)
    den_w = torch.where(wide_top, m_hi - threshold, ones)

    d_u = torch.where(narrow_top, 1.0 / den_n, zeros)
    b_u = torch.where(narrow_top, -m_lo / den_n,
                      torch.where(firing | wide_top, ones, zeros))
    d_l = torch.where(wide_top, 1.0 / den_w, zeros)
    b_l = torch.where(wide_top, -threshold / den_w,
                      torch.where(firing, ones, zeros))
    return d_l, b_l, d_u, b_u


def carry_relaxation(m_hi: torch.Tensor, m_lo: torch.Tensor, threshold: float):
    """Bounding planes m*d2 + (1-s)*d3 for the reset carry z = m*(1-s).

    Returns (d2_l, d3_l, d2_u, d3_u); both target lines {s=1: z=0} and
    {s=0: z=m} lie between the planes over [m_lo, m_hi]."""
    silent = m_hi < threshold
    firing = m_lo >= threshold
    unstable = ~(silent | firing)
    zeros = torch.zeros_like(m_hi)
    ones = torch.ones_like(m_hi)
    d2 = torch.where(silent, ones, zeros)
    d3_l = torch.where(unstable, m_lo, zeros)
    d3_u = torch.where(unstable, torch.full_like(m_hi, threshold), zeros)
    return d2, d3_l, d2.clone(), d3_u


def identity_spec(num_classes: int) -> torch.Tensor:
    """One row per output neuron: lower-bounds each class rate individually."""
    return torch.eye(num_classes, dtype=DTYPE)


def margin_spec(labels, num_classes: int) -> torch.Tensor:
    """Rows e_true - e_j per example: lower-bounds the rate margin of the true
    class over each class j. The row for j == true is identically zero."""
    labels = torch.as_tensor(labels).reshape(-1)
    eye = torch.eye(num_classes, dtype=DTYPE)
    return eye[labels].unsqueeze(1) - eye.unsqueeze(0)


def _feature_dims(a: torch.Tensor):
    return tuple(range(2, a.dim()))


def _substitute_spatial(layer: Layer, coeff: torch.Tensor):
    """Map coefficients on a layer's output onto its input spikes; returns the
    input-side coefficients and per-row bias contribution."""
    batch, rows = coeff.shape[0], coeff.shape[1]
    if layer.kind == "fc":
        flat = coeff.reshape(batch, rows, -1)
        below = matmul(flat, layer.weight)
        bias_c = matmul(flat, layer.bias)
    else:
        a4 = coeff.reshape(batch * rows, *layer.out_shape)
        below = conv2d_transpose(a4, layer.weight, layer.in_shape,
                                 layer.stride, layer.padding)
        bias_c = (coeff.sum(dim=(-2, -1)) * layer.bias).sum(dim=-1)
    return below.reshape(batch, rows, *layer.in_shape), bias_c


def backward_bounds(net: Network, bounds: IntervalBounds, spec: torch.Tensor,
                    tsteps: int):
    """Backward substitution of an output specification through all layers and
    time steps.

    spec: (rows, num_classes) shared across the batch or (B, rows, num_classes)
    per example; rows act on the per-time-step output spikes scaled by
    1/tsteps, so the bound is on rate-based functionals.

    Returns (coeffs, bias): coeffs is a list over time steps of input-spike
    coefficient tensors (B, rows, *input_shape); bias is (B, rows).
    """
    th, decay = net.lif.threshold, net.lif.decay
    batch = bounds.m_lo[0].shape[1]
    if spec.dim() == 2:
        spec = spec.unsqueeze(0).expand(batch, -1, -1)
    if spec.shape[0] != batch:
        raise ValueError("spec batch does not match interval bounds batch")
    if bounds.m_lo[0].shape[0] < tsteps:
        raise ValueError("interval bounds cover fewer time steps than requested")

    spec = spec.to(DTYPE)
    rows = spec.shape[1]
    coeff_s = [spec / tsteps for _ in range(tsteps)]   # on s_t of current layer
    bias = torch.zeros(batch, rows, dtype=DTYPE)

    for ki in reversed(range(len(net.layers))):
        layer = net.layers[ki]
        m_hi, m_lo = bounds.m_hi[ki], bounds.m_lo[ki]
        d_l, b_l, d_u, b_u = fire_relaxation(m_hi, m_lo, th)
        d2, d3_l, _, d3_u = carry_relaxation(m_hi, m_lo, th)
        coeff_m = [None] * tsteps                      # on m_t of current layer
        below = [None] * tsteps
        for t in reversed(range(tsteps)):
            a_pos, a_neg = split_sign(coeff_s[t])
            am = a_neg * d_u[t].unsqueeze(1) + a_pos * d_l[t].unsqueeze(1)
            if coeff_m[t] is not None:
                am = am + coeff_m[t]
            bias = bias + (a_neg * b_u[t].unsqueeze(1)
                           + a_pos * b_l[t].unsqueeze(1)).sum(dim=_feature_dims(a_pos))
            if t > 0:
                am_pos, am_neg = split_sign(am)
                # the m-axis slope d2 is identical on both planes, so no split there
                coeff_m[t - 1] = decay * (am * d2[t - 1].unsqueeze(1))
                routed = decay * (am_neg * d3_u[t - 1].unsqueeze(1)
                                  + am_pos * d3_l[t - 1].unsqueeze(1))
                coeff_s[t - 1] = coeff_s[t - 1] - routed
                bias = bias + routed.sum(dim=_feature_dims(routed))
            below[t], bias_c = _substitute_spatial(layer, am)
            bias = bias + bias_c
        coeff_s = below
    return coeff_s, bias


def concretize(coeffs, bias: torch.Tensor, box: SpikeInputBox) -> torch.Tensor:
    """Evaluate the linear lower bound over the box via center/radius form."""
    lo, hi = box.lower.to(DTYPE), box.upper.to(DTYPE)
    if lo.dim() == coeffs[0].dim() - 1:   # (T, *shape) -> (T, 1, *shape)
        lo, hi = lo.unsqueeze(1), hi.unsqueeze(1)
    center = (hi + lo) / 2
    radius = (hi - lo) / 2
    out = bias
    for t, a in enumerate(coeffs):
        dims = _feature_dims(a)
        out = out + (a * center[t].unsqueeze(1)).sum(dim=dims) \
                  - (a.abs() * radius[t].unsqueeze(1)).sum(dim=dims)
    return out


def lower_bounds(net: Network, box: SpikeInputBox, tsteps: int,
                 spec: torch.Tensor, bounds: IntervalBounds = None) -> torch.Tensor:
    """Interval pass plus backward substitution plus concretization."""
    if bounds is None:
        bounds = run_intervals(net, box, tsteps)
    coeffs, bias = backward_bounds(net, bounds, spec, tsteps)
    return concretize(coeffs, bias, box)


def margin_lower_bounds(net: Network, box: SpikeInputBox, tsteps: int,
                        labels, bounds: IntervalBounds = None) -> torch.Tensor:
    """Lower bounds on (rate_true - rate_j) for every class j, shape (B, C).

    The input is certified robust within the box iff every entry for j != true
    is strictly positive."""
    spec = margin_spec(labels, net.num_classes)
    return lower_bounds(net, box, tsteps, spec, bounds=bounds)


def is_certified(margins: torch.Tensor, labels) -> torch.Tensor:
    """Per-example certification flag from margin lower bounds."""
    labels = torch.as_tensor(labels).reshape(-1)
    masked = margins.clone()
    masked[torch.arange(masked.shape[0]), labels] = float("inf")
    return (masked > 0).all(dim=1)

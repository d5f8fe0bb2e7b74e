"""Independent verification oracles.

Everything here cross-checks the bounding machinery by brute force: exact
enumeration or Monte Carlo sampling of input-box corners through the plain
simulator, naive loop re-implementations of the dense kernels, and grid
containment checks for the relaxation lines. None of it touches the bound
propagation code paths it is used to validate.
"""

from dataclasses import dataclass, field

import numpy as np
import torch

from .input_box import SpikeInputBox, rng_for
from .interval_bounds import IntervalBounds
from .kernels import DTYPE
from .linear_bounds import carry_relaxation, fire_relaxation
from .network import Network, run_network

MAX_ENUM_BITS = 20


@dataclass
class EnumerationReport:
    unstable_bits: int
    corners: int
    m_min: list                  # per layer, (T, *shape)
    m_max: list
    s_min: list
    s_max: list
    spec_min: torch.Tensor = None   # (rows,)
    spec_max: torch.Tensor = None
    violations: list = field(default_factory=list)


def _unstable_positions(box: SpikeInputBox):
    lo = box.lower.reshape(-1)
    hi = box.upper.reshape(-1)
    return torch.nonzero(hi > lo, as_tuple=False).reshape(-1)


def _spec_values(spec: torch.Tensor, out_spikes: torch.Tensor, tsteps: int):
    # out_spikes: (T, B, C); rows act on rates
    rates = out_spikes.sum(dim=0) / tsteps
    return rates @ spec.t()


def _scan_corners(net: Network, box: SpikeInputBox, tsteps: int,
                  spec: torch.Tensor, assignments: np.ndarray, positions):
    """Simulate a (n_corners, n_bits) block of corner assignments; returns the
    running extrema structures."""
    lo = box.lower.to(DTYPE).reshape(-1)
    n_corners = assignments.shape[0]
    x = lo.unsqueeze(0).repeat(n_corners, 1)
    if positions.numel():
        x[:, positions] = torch.as_tensor(assignments, dtype=DTYPE)
    x = x.reshape(n_corners, *box.lower.shape).permute(
        1, 0, *range(2, 1 + box.lower.dim())).contiguous()
    with torch.no_grad():
        trace = run_network(net, x[:tsteps])
    m_min = [m.min(dim=1).values for m in trace.membranes]
    m_max = [m.max(dim=1).values for m in trace.membranes]
    s_min = [s.min(dim=1).values for s in trace.spikes]
    s_max = [s.max(dim=1).values for s in trace.spikes]
    spec_vals = None
    if spec is not None:
        spec_vals = _spec_values(spec.to(DTYPE), trace.spikes[-1], tsteps)
    return m_min, m_max, s_min, s_max, spec_vals


def _merge(acc, new, fn):
    return new if acc is None else [fn(a, b) for a, b in zip(acc, new)]


def enumerate_box(net: Network, box: SpikeInputBox, tsteps: int,
                  spec: torch.Tensor = None, chunk: int = 4096) -> EnumerationReport:
    """Exact extrema of every membrane, spike and spec value over all corners
    of the box (single-example box of shape (T, *input_shape))."""
    positions = _unstable_positions(box)
    u = int(positions.numel())
    if u > MAX_ENUM_BITS:
        raise ValueError(f"too many unstable bits to enumerate: {u} > {MAX_ENUM_BITS}")
    total = 1 << u
    m_min = m_max = s_min = s_max = None
    spec_min = spec_max = None
    for start in range(0, total, chunk):
        count = min(chunk, total - start)
        idx = np.arange(start, start + count, dtype=np.uint64)[:, None]
        bits = (idx >> np.arange(u, dtype=np.uint64)[None, :]) & 1
        out = _scan_corners(net, box, tsteps, spec, bits.astype(np.float64), positions)
        m_min = _merge(m_min, out[0], torch.minimum)
        m_max = _merge(m_max, out[1], torch.maximum)
        s_min = _merge(s_min, out[2], torch.minimum)
        s_max = _merge(s_max, out[3], torch.maximum)
        if out[4] is not None:
            lo_v = out[4].min(dim=0).values
            hi_v = out[4].max(dim=0).values
            spec_min = lo_v if spec_min is None else torch.minimum(spec_min, lo_v)
            spec_max = hi_v if spec_max is None else torch.maximum(spec_max, hi_v)
    return EnumerationReport(u, total, m_min, m_max, s_min, s_max, spec_min, spec_max)


def monte_carlo_report(net: Network, box: SpikeInputBox, tsteps: int,
                       spec: torch.Tensor, samples: int, seed: int,
                       chunk: int = 512) -> EnumerationReport:
    """Extrema over `samples` random corners of the box."""
    positions = _unstable_positions(box)
    u = int(positions.numel())
    rng = rng_for(seed)
    m_min = m_max = s_min = s_max = None
    spec_min = spec_max = None
    done = 0
    while done < samples:
        count = min(chunk, samples - done)
        bits = rng.integers(0, 2, size=(count, u)).astype(np.float64)
        out = _scan_corners(net, box, tsteps, spec, bits, positions)
        m_min = _merge(m_min, out[0], torch.minimum)
        m_max = _merge(m_max, out[1], torch.maximum)
        s_min = _merge(s_min, out[2], torch.minimum)
        s_max = _merge(s_max, out[3], torch.maximum)
        if out[4] is not None:
            lo_v = out[4].min(dim=0).values
            hi_v = out[4].max(dim=0).values
            spec_min = lo_v if spec_min is None else torch.minimum(spec_min, lo_v)
            spec_max = hi_v if spec_max is None else torch.maximum(spec_max, hi_v)
        done += count
    return EnumerationReport(u, samples, m_min, m_max, s_min, s_max, spec_min, spec_max)


def interval_violations(report: EnumerationReport, bounds: IntervalBounds,
                        tol: float = 1e-9) -> list:
    """Places where observed extrema escape the propagated intervals."""
    out = []
    for k in range(len(report.m_min)):
        b_lo = bounds.m_lo[k].squeeze(1)
        b_hi = bounds.m_hi[k].squeeze(1)
        if bool((report.m_min[k] < b_lo - tol).any()) or bool((report.m_max[k] > b_hi + tol).any()):
            out.append(f"membrane bounds violated at layer {k}")
        sb_lo = bounds.s_lo[k].squeeze(1)
        sb_hi = bounds.s_hi[k].squeeze(1)
        if bool((report.s_min[k] < sb_lo - tol).any()) or bool((report.s_max[k] > sb_hi + tol).any()):
            out.append(f"spike bounds violated at layer {k}")
    return out


def spec_violations(report: EnumerationReport, lower_bound: torch.Tensor,
                    tol: float = 1e-9) -> list:
    """Rows whose observed minimum spec value dips below the certified bound."""
    if report.spec_min is None:
        return []
    lb = lower_bound.reshape(-1)
    bad = torch.nonzero(report.spec_min < lb - tol).reshape(-1)
    return [f"spec row {int(i)}: observed {float(report.spec_min[i]):.12g} "
            f"< bound {float(lb[i]):.12g}" for i in bad]


def monte_carlo_box(net: Network, box: SpikeInputBox, tsteps: int,
                    spec: torch.Tensor, samples: int, seed: int,
                    bounds: IntervalBounds = None,
                    lower_bound: torch.Tensor = None, tol: float = 1e-9) -> int:
    """Number of bound violations observed over random box corners (0 = pass)."""
    report = monte_carlo_report(net, box, tsteps, spec, samples, seed)
    bad = []
    if bounds is not None:
        bad += interval_violations(report, bounds, tol)
    if lower_bound is not None:
        bad += spec_violations(report, lower_bound, tol)
    report.violations = bad
    return len(bad)


def fire_grid_check(m_lo: float, m_hi: float, threshold: float,
                    points: int = 100, tol: float = 1e-12) -> bool:
    """True iff the fire relaxation lines contain the step function on a grid."""
    if points < 2:
        raise ValueError("need at least 2 grid points")
    lo = torch.tensor([m_lo], dtype=DTYPE)
    hi = torch.tensor([m_hi], dtype=DTYPE)
    d_l, b_l, d_u, b_u = fire_relaxation(hi, lo, threshold)
    m = torch.linspace(m_lo, m_hi, points, dtype=DTYPE)
    true = (m >= threshold).to(DTYPE)
    lower = d_l * m + b_l
    upper = d_u * m + b_u
    return bool((lower <= true + tol).all()) and bool((upper >= true - tol).all())


def carry_grid_check(m_lo: float, m_hi: float, threshold: float,
                     points: int = 100, tol: float = 1e-12) -> bool:
    """True iff the carry planes contain both true branches of z = m*(1-s).

    The s=0 branch (z = m) only exists where m < threshold and the s=1 branch
    (z = 0) only where m >= threshold; each branch is checked on its domain.
    """
    if points < 2:
        raise ValueError("need at least 2 grid points")
    lo = torch.tensor([m_lo], dtype=DTYPE)
    hi = torch.tensor([m_hi], dtype=DTYPE)
    d2_l, d3_l, d2_u, d3_u = carry_relaxation(hi, lo, threshold)
    m = torch.linspace(m_lo, m_hi, points, dtype=DTYPE)
    ok = True
    silent = m < threshold
    if bool(silent.any()):
        z = m[silent]
        lower = d2_l * m[silent] + d3_l          # (1 - s) = 1
        upper = d2_u * m[silent] + d3_u
        ok &= bool((lower <= z + tol).all()) and bool((upper >= z - tol).all())
    firing = ~silent
    if bool(firing.any()):
        lower = d2_l * m[firing]                 # (1 - s) = 0, z = 0
        upper = d2_u * m[firing]
        ok &= bool((lower <= tol).all()) and bool((upper >= -tol).all())
    return ok


def relaxation_grid_check(kind: str, m_lo: float, m_hi: float, threshold: float,
                          points: int = 100, tol: float = 1e-12) -> bool:
    if kind == "fire":
        return fire_grid_check(m_lo, m_hi, threshold, points, tol)
    if kind == "carry":
        return carry_grid_check(m_lo, m_hi, threshold, points, tol)
    raise ValueError(f"unknown relaxation kind {kind!r}")


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop reference matrix product."""
    m, kk = a.shape
    k2, n = b.shape
    assert kk == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(kk):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def naive_conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray,
                 stride: int, padding: int) -> np.ndarray:
    """Direct six-loop cross-correlation with zero padding, (C,H,W) input."""
    c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    assert c == c2
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (wd + 2 * padding - kw) // stride + 1
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, padding:padding + h, padding:padding + wd] = x
    out = np.zeros((o, out_h, out_w), dtype=np.float64)
    for oc in range(o):
        for i in range(out_h):
            for j in range(out_w):
                acc = 0.0
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            acc += w[oc, ic, di, dj] * xp[ic, i * stride + di, j * stride + dj]
                out[oc, i, j] = acc + (bias[oc] if bias is not None else 0.0)
    return out

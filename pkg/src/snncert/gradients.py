"""Surrogate-gradient backpropagation through time.

The step-function spike is non-differentiable, so training replaces its
derivative with a surrogate (rectangular window by default). A separate smooth
mode swaps the step function for a sigmoid in the forward pass as well, which
makes the whole unrolled computation differentiable end to end; that mode
exists so gradients can be validated against finite differences.
"""

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .kernels import DTYPE
from .network import Network, SimTrace, run_network


@dataclass
class Surrogate:
    kind: str = "rectangular"    # "rectangular" | "sigmoid"
    width: float = 0.5           # rectangular window half-width
    temperature: float = 1.0     # sigmoid steepness (also used by smooth mode)

    def __post_init__(self):
        if self.kind not in ("rectangular", "sigmoid"):
            raise ValueError(f"unknown surrogate kind {self.kind!r}")
        if self.width < 0:
            raise ValueError("surrogate width must be >= 0")


class _SpikeFn(torch.autograd.Function):
    """Heaviside forward, surrogate derivative backward."""

    @staticmethod
    def forward(ctx, x, kind, width, temperature):
        ctx.save_for_backward(x)
        ctx.kind, ctx.width, ctx.temperature = kind, width, temperature
        return (x >= 0).to(x.dtype)

    @staticmethod
    def backward(ctx, grad_out):
        (x,) = ctx.saved_tensors
        if ctx.kind == "rectangular":
            d = (x.abs() < ctx.width).to(x.dtype)
        else:
            sig = torch.sigmoid(x / ctx.temperature)
            d = sig * (1 - sig) / ctx.temperature
        return grad_out * d, None, None, None


def make_fire(surrogate: Surrogate, smooth: bool = False, mode: str = None):
    """Build the fire callable used by run_network.

    mode "spike" (default) is the exact step function with the surrogate
    derivative; "smooth" replaces it by a sigmoid in the forward pass too,
    turning the whole simulation into a differentiable relaxation; "linear"
    passes the shifted membrane potential straight through (debug only).
    """
    mode = mode or ("smooth" if smooth else "spike")
    if mode == "smooth":
        def fire(x):
            return torch.sigmoid(x / surrogate.temperature)
    elif mode == "linear":
        def fire(x):
            return x
    elif mode == "spike":
        def fire(x):
            return _SpikeFn.apply(x, surrogate.kind, surrogate.width, surrogate.temperature)
    else:
        raise ValueError(f"unknown fire mode {mode!r}")
    return fire


@dataclass
class GradientTape:
    weight_grads: list
    bias_grads: list
    input_grad: torch.Tensor
    loss: float
    trace: SimTrace = None


def loss_value(rates: torch.Tensor, target, kind: str = "ce") -> torch.Tensor:
    """Training loss on per-class firing rates.

    "ce": cross-entropy with the rates used directly as logits.
    "mse": mean squared error against the one-hot target.
    """
    if rates.dim() == 1:
        rates = rates.unsqueeze(0)
    target_t = torch.as_tensor(target).reshape(-1)
    n = rates.shape[-1]
    if bool((target_t < 0).any()) or bool((target_t >= n).any()):
        raise ValueError(f"target out of range [0, {n})")
    if kind == "ce":
        return F.cross_entropy(rates, target_t)
    if kind == "mse":
        onehot = F.one_hot(target_t, n).to(rates.dtype)
        return ((rates - onehot) ** 2).mean()
    raise ValueError(f"unknown loss kind {kind!r}")


def _shadow_net(net: Network):
    """Copy of the network whose parameters are detached requires-grad views of
    the same storage. Differentiating through the shadow never mutates shared
    state, so per-example gradient computations are safe to run concurrently."""
    from dataclasses import replace
    layers = [replace(l, weight=l.weight.detach().requires_grad_(True),
                      bias=l.bias.detach().requires_grad_(True))
              for l in net.layers]
    shadow = replace(net, layers=layers)
    return shadow, [p for p in shadow.parameters()]


def _run_with_grads(net: Network, spikes: torch.Tensor, surrogate: Surrogate,
                    mode: str, detach_reset: bool, need_input_grad: bool):
    shadow, params = _shadow_net(net)
    if need_input_grad:
        spikes = spikes.detach().clone().requires_grad_(True)
    fire = make_fire(surrogate, mode=mode)
    if detach_reset:
        trace = _run_detached_reset(shadow, spikes, fire)
    else:
        trace = run_network(shadow, spikes, fire)
    return trace, params, spikes


def _run_detached_reset(net: Network, spikes: torch.Tensor, fire):
    """run_network variant with a stop-gradient on the reset factor."""
    th, decay = net.lif.threshold, net.lif.decay
    prev_m = [None] * len(net.layers)
    prev_s = [None] * len(net.layers)
    membranes = [[] for _ in net.layers]
    out_spikes = [[] for _ in net.layers]
    for t in range(spikes.shape[0]):
        below = spikes[t]
        for k, layer in enumerate(net.layers):
            m = layer.spatial(below)
            if prev_m[k] is not None:
                m = m + decay * prev_m[k] * (1.0 - prev_s[k].detach())
            s = fire(m - th)
            prev_m[k], prev_s[k] = m, s
            membranes[k].append(m)
            out_spikes[k].append(s)
            below = s
    return SimTrace([torch.stack(x) for x in membranes], [torch.stack(x) for x in out_spikes])


def backprop(net: Network, spike_input: torch.Tensor, target, loss_kind: str = "ce",
             surrogate: Surrogate = None, mode: str = "spike",
             detach_reset: bool = False) -> GradientTape:
    """Gradients of the rate loss w.r.t. all parameters and the spike input.

    The unroll covers both the layer and time axes; the reset factor is
    differentiated through the surrogate unless detach_reset is set.
    """
    surrogate = surrogate or Surrogate()
    spike_input = spike_input.to(DTYPE)
    batched = spike_input if spike_input.dim() > 1 + len(net.input_shape) \
        else spike_input.unsqueeze(1)
    trace, params, inp = _run_with_grads(net, batched, surrogate, mode,
                                         detach_reset, need_input_grad=True)
    loss = loss_value(trace.output_rates(), target, loss_kind)
    grads = torch.autograd.grad(loss, params + [inp], allow_unused=True)
    grads = [torch.zeros_like(v) if g is None else g
             for g, v in zip(grads, params + [inp])]
    input_grad = grads[-1]
    if spike_input.dim() == 1 + len(net.input_shape):
        input_grad = input_grad.squeeze(1)
    return GradientTape(weight_grads=grads[0:-1:2], bias_grads=grads[1:-1:2],
                        input_grad=input_grad, loss=float(loss.detach()),
                        trace=SimTrace([m.detach() for m in trace.membranes],
                                       [s.detach() for s in trace.spikes]))


def sgd_step(net: Network, tape: GradientTape, lr: float) -> Network:
    """In-place plain SGD update from a tape; returns the same network."""
    with torch.no_grad():
        for layer, dw, db in zip(net.layers, tape.weight_grads, tape.bias_grads):
            if dw.shape != layer.weight.shape or db.shape != layer.bias.shape:
                raise ValueError("gradient tape does not match network shapes")
            layer.weight -= lr * dw
            layer.bias -= lr * db
    return net


class AdamState:
    """Optional Adam optimizer; state is keyed by parameter position."""

    def __init__(self, net: Network, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in net.parameters()]
        self.v = [torch.zeros_like(p) for p in net.parameters()]

    def step(self, net: Network, tape: GradientTape, lr: float) -> Network:
        self.t += 1
        grads = [g for pair in zip(tape.weight_grads, tape.bias_grads) for g in pair]
        with torch.no_grad():
            for i, (p, g) in enumerate(zip(net.parameters(), grads)):
                self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
                self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
                mhat = self.m[i] / (1 - self.beta1 ** self.t)
                vhat = self.v[i] / (1 - self.beta2 ** self.t)
                p -= lr * mhat / (vhat.sqrt() + self.eps)
        return net

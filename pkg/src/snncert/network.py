"""Leaky integrate-and-fire network: architecture description and exact simulation.

A network is a stack of FC/conv layers of spiking neurons sharing one threshold
and decay factor. Per time step t and layer k the membrane potential is

    m_t[k] = w[k-1] (x) s_t[k-1] + b[k-1] + decay * m_{t-1}[k] * (1 - s_{t-1}[k])
    s_t[k] = 1 if m_t[k] >= threshold else 0

with m_0 = s_0 = 0; firing at exactly the threshold counts as a spike, and a
spike resets the carried membrane potential to zero. Classification is rate
coded: the output neuron with the most spikes over the simulation wins,
lowest index first on ties.
"""

import io
import math
from dataclasses import dataclass

import torch

from .kernels import DTYPE, conv2d, conv2d_output_shape, matmul

CHECKPOINT_MAGIC = "snncert-checkpoint v1"


@dataclass
class LifParams:
    threshold: float = 0.25
    decay: float = 0.25

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")


@dataclass
class Layer:
    kind: str                    # "fc" | "conv"
    weight: torch.Tensor         # fc: (out, in); conv: (O, C, kh, kw)
    bias: torch.Tensor           # (out,) / (O,)
    stride: int = 1
    padding: int = 0
    in_shape: tuple = ()         # structured shape of the presynaptic spikes
    out_shape: tuple = ()

    def spatial(self, s: torch.Tensor) -> torch.Tensor:
        """Weighted projection of presynaptic spikes, bias included.

        s has shape (B, *in_shape); returns (B, *out_shape).
        """
        if self.kind == "fc":
            flat = s.reshape(s.shape[0], -1)
            return matmul(flat, self.weight.t()) + self.bias
        return conv2d(s, self.weight, self.bias, self.stride, self.padding)

    @property
    def size(self) -> int:
        return int(torch.prod(torch.tensor(self.out_shape)).item())


@dataclass
class Network:
    layers: list
    lif: LifParams
    time_steps: int
    input_shape: tuple
    arch: str = ""

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ValueError("network needs at least one layer")
        if self.time_steps < 1:
            raise ValueError("time_steps must be >= 1")

    @property
    def num_classes(self) -> int:
        return self.layers[-1].size

    def parameters(self):
        for layer in self.layers:
            yield layer.weight
            yield layer.bias


@dataclass
class SimTrace:
    """Per-layer membrane potentials and spikes, time-major: (T, B, *shape_k)."""
    membranes: list
    spikes: list

    @property
    def output_counts(self) -> torch.Tensor:
        return self.spikes[-1].sum(dim=0)

    def output_rates(self) -> torch.Tensor:
        return self.output_counts / self.spikes[-1].shape[0]


def parse_arch(arch: str, input_shape) -> list:
    """Parse a layer-list string like "X-C64K3S2-C128K3S2-FC256-FC10".

    Returns a list of dicts describing each layer; shapes are not resolved here.
    """
    tokens = arch.strip().split("-")
    if not tokens or tokens[0].upper() != "X":
        raise ValueError(f"architecture must start with input token 'X': {arch!r}")
    if len(tokens) < 2:
        raise ValueError(f"architecture has no layers: {arch!r}")
    specs = []
    for tok in tokens[1:]:
        t = tok.upper()
        if t.startswith("FC"):
            try:
                out = int(t[2:])
            except ValueError:
                raise ValueError(f"bad FC token {tok!r} in {arch!r}") from None
            specs.append({"kind": "fc", "out": out})
        elif t.startswith("C"):
            import re
            m = re.fullmatch(r"C(\d+)K(\d+)S(\d+)", t)
            if not m:
                raise ValueError(f"bad conv token {tok!r} in {arch!r} (want C<out>K<kernel>S<stride>)")
            specs.append({"kind": "conv", "out": int(m.group(1)),
                          "kernel": int(m.group(2)), "stride": int(m.group(3))})
        else:
            raise ValueError(f"unknown layer token {tok!r} in {arch!r}")
    return specs


def init_network(arch: str, input_shape, seed: int, lif: LifParams = None,
                 time_steps: int = 10, conv_padding: int = 1) -> Network:
    """Build a network from an architecture string with seeded uniform init.

    Weights are drawn uniformly in +-sqrt(1/fan_in); identical seeds give
    bitwise-identical parameters.
    """
    input_shape = tuple(input_shape)
    lif = lif or LifParams()
    gen = torch.Generator().manual_seed(int(seed))

    def uniform(shape, bound):
        return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound

    layers = []
    cur = input_shape
    for spec in parse_arch(arch, input_shape):
        if spec["kind"] == "fc":
            fan_in = int(math.prod(cur))
            bound = math.sqrt(1.0 / fan_in)
            layer = Layer("fc", uniform((spec["out"], fan_in), bound),
                          uniform((spec["out"],), bound),
                          in_shape=cur, out_shape=(spec["out"],))
        else:
            if len(cur) != 3:
                raise ValueError(f"conv layer needs (C,H,W) input, have {cur}")
            k, s = spec["kernel"], spec["stride"]
            wshape = (spec["out"], cur[0], k, k)
            fan_in = cur[0] * k * k
            bound = math.sqrt(1.0 / fan_in)
            out_shape = conv2d_output_shape(cur, wshape, s, conv_padding)
            layer = Layer("conv", uniform(wshape, bound), uniform((spec["out"],), bound),
                          stride=s, padding=conv_padding, in_shape=cur, out_shape=out_shape)
        layers.append(layer)
        cur = layer.out_shape
    return Network(layers, lif, time_steps, input_shape, arch=arch)


def heaviside_fire(x: torch.Tensor) -> torch.Tensor:
    return (x >= 0).to(x.dtype)


def run_network(net: Network, spikes: torch.Tensor, fire=heaviside_fire) -> SimTrace:
    """Unrolled forward pass over (T, B, *input_shape) input spikes.

    `fire` maps (m - threshold) to the spike output; the default is the exact
    step function. The reset factor (1 - s) uses the same spike values.
    """
    th, decay = net.lif.threshold, net.lif.decay
    tsteps = spikes.shape[0]
    prev_m = [None] * len(net.layers)
    prev_s = [None] * len(net.layers)
    membranes = [[] for _ in net.layers]
    out_spikes = [[] for _ in net.layers]
    for t in range(tsteps):
        below = spikes[t]
        for k, layer in enumerate(net.layers):
            m = layer.spatial(below)
            if prev_m[k] is not None:
                m = m + decay * prev_m[k] * (1.0 - prev_s[k])
            s = fire(m - th)
            prev_m[k], prev_s[k] = m, s
            membranes[k].append(m)
            out_spikes[k].append(s)
            below = s
    return SimTrace([torch.stack(ms) for ms in membranes],
                    [torch.stack(ss) for ss in out_spikes])


def _ensure_batched(spike_input: torch.Tensor, net: Network):
    if spike_input.dim() == 1 + len(net.input_shape):
        return spike_input.unsqueeze(1), True
    return spike_input, False


def forward(net: Network, spike_input: torch.Tensor) -> SimTrace:
    """Exact simulation of a binary spike input of shape (T, *input_shape)
    or (T, B, *input_shape)."""
    spike_input = spike_input.to(DTYPE)
    if not bool(((spike_input == 0) | (spike_input == 1)).all()):
        raise ValueError("spike input must be binary")
    batched, squeezed = _ensure_batched(spike_input, net)
    with torch.no_grad():
        trace = run_network(net, batched)
    if squeezed:
        trace = SimTrace([m.squeeze(1) for m in trace.membranes],
                         [s.squeeze(1) for s in trace.spikes])
    return trace


def rate_logits(trace: SimTrace) -> torch.Tensor:
    """Mean output firing rate per class, in [0, 1]."""
    return trace.output_rates()


def predict(trace: SimTrace):
    """Rate-coded class decision; ties resolve to the lowest class index."""
    counts = trace.output_counts
    import numpy as np
    arr = counts.detach().numpy()
    if arr.ndim == 1:
        return int(np.argmax(arr))
    return np.argmax(arr, axis=-1)


def save_checkpoint(net: Network, path) -> None:
    """Self-describing container: text header, then per-tensor shape lines each
    followed by raw little-endian float64 data. Round-trips bit-exactly."""
    with open(path, "wb") as f:
        header = io.StringIO()
        header.write(f"{CHECKPOINT_MAGIC}\n")
        header.write(f"arch={net.arch}\n")
        header.write(f"input_shape={','.join(str(d) for d in net.input_shape)}\n")
        header.write(f"threshold={net.lif.threshold!r}\n")
        header.write(f"decay={net.lif.decay!r}\n")
        header.write(f"time_steps={net.time_steps}\n")
        header.write(f"layers={len(net.layers)}\n")
        f.write(header.getvalue().encode())
        for i, layer in enumerate(net.layers):
            meta = f"layer{i} kind={layer.kind} stride={layer.stride} padding={layer.padding}\n"
            f.write(meta.encode())
            for name, tensor in (("weight", layer.weight), ("bias", layer.bias)):
                shape = ",".join(str(d) for d in tensor.shape)
                f.write(f"tensor {name} {shape}\n".encode())
                f.write(tensor.detach().to(DTYPE).numpy().astype("<f8").tobytes())
                f.write(b"\n")


def load_checkpoint(path) -> Network:
    import numpy as np
    with open(path, "rb") as f:
        def line():
            return f.readline().decode().rstrip("\n")

        if line() != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        fields = {}
        for _ in range(6):
            key, _, val = line().partition("=")
            fields[key] = val
        arch = fields["arch"]
        input_shape = tuple(int(d) for d in fields["input_shape"].split(","))
        lif = LifParams(float(fields["threshold"]), float(fields["decay"]))
        tsteps = int(fields["time_steps"])
        n_layers = int(fields["layers"])

        layers = []
        cur = input_shape
        for _ in range(n_layers):
            parts = line().split()
            meta = dict(p.split("=") for p in parts[1:])
            tensors = {}
            for _ in range(2):
                tag, name, shape_s = line().split()
                if tag != "tensor":
                    raise ValueError(f"{path}: malformed tensor record")
                shape = tuple(int(d) for d in shape_s.split(","))
                count = int(math.prod(shape))
                raw = f.read(count * 8)
                if len(raw) != count * 8:
                    raise ValueError(f"{path}: truncated tensor data")
                if f.read(1) != b"\n":
                    raise ValueError(f"{path}: corrupt tensor record framing")
                tensors[name] = torch.from_numpy(
                    np.frombuffer(raw, dtype="<f8").copy().reshape(shape))
            kind = meta["kind"]
            w = tensors["weight"]
            if kind == "fc":
                out_shape = (w.shape[0],)
            else:
                out_shape = conv2d_output_shape(cur, tuple(w.shape),
                                                int(meta["stride"]), int(meta["padding"]))
            layers.append(Layer(kind, w, tensors["bias"], int(meta["stride"]),
                                int(meta["padding"]), in_shape=cur, out_shape=out_shape))
            cur = out_shape
    return Network(layers, lif, tsteps, input_shape, arch=arch)

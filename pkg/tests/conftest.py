import torch

from snncert.input_box import rng_for
from snncert.kernels import DTYPE
from snncert.network import LifParams, init_network


def small_net(arch="X-FC2-FC2-FC2", in_shape=(2,), seed=0, tsteps=2,
              weight_scale=3.0, th=0.25, decay=0.25):
    """Random toy network with weights scaled so thresholds actually trip."""
    net = init_network(arch, in_shape, seed, LifParams(th, decay), tsteps)
    with torch.no_grad():
        for layer in net.layers:
            layer.weight *= weight_scale
    return net


def random_spikes(shape, seed):
    return torch.tensor(rng_for(seed).integers(0, 2, size=shape).astype(float),
                        dtype=DTYPE)

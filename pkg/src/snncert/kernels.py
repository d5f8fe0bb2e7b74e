"""Dense tensor kernels shared by simulation, training and bound propagation.

Everything runs in float64: the bound computations downstream trade speed for
soundness, so a single wide dtype is used across the package.
"""

import torch
import torch.nn.functional as F

DTYPE = torch.float64


def as_tensor(data, dtype=DTYPE) -> torch.Tensor:
    return torch.as_tensor(data, dtype=dtype)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product a @ b with explicit inner-dimension validation."""
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else -1]:
        raise ValueError(f"matmul: inner dimensions disagree ({tuple(a.shape)} @ {tuple(b.shape)})")
    return a @ b


def conv2d(x: torch.Tensor, weight: torch.Tensor, bias=None, stride: int = 1,
           padding: int = 0) -> torch.Tensor:
    """2-D cross-correlation with zero padding.

    x: (..., C, H, W), weight: (O, C, kh, kw), bias: (O,) or None.
    Leading dimensions of x are treated as batch.
    """
    if x.shape[-3] != weight.shape[1]:
        raise ValueError(f"conv2d: channel mismatch ({tuple(x.shape)} vs {tuple(weight.shape)})")
    kh, kw = weight.shape[-2:]
    h, w = x.shape[-2:]
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"conv2d: non-positive output size {out_h}x{out_w}")
    lead = x.shape[:-3]
    x4 = x.reshape(-1, *x.shape[-3:])
    y = F.conv2d(x4, weight, bias, stride=stride, padding=padding)
    return y.reshape(*lead, *y.shape[-3:])


def conv2d_output_shape(in_shape, weight_shape, stride: int, padding: int):
    c, h, w = in_shape
    o, ci, kh, kw = weight_shape
    if ci != c:
        raise ValueError(f"conv2d: channel mismatch ({in_shape} vs {weight_shape})")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"conv2d: non-positive output size {out_h}x{out_w}")
    return (o, out_h, out_w)


def conv2d_transpose(y: torch.Tensor, weight: torch.Tensor, in_shape, stride: int,
                     padding: int) -> torch.Tensor:
    """Adjoint of conv2d: maps coefficients on the output grid back to the input grid.

    in_shape is the (C, H, W) shape conv2d was applied to; needed to fix the
    output_padding ambiguity of strided convolutions.
    """
    c, h, w = in_shape
    kh, kw = weight.shape[-2:]
    out_h = y.shape[-2]
    opad_h = h - ((out_h - 1) * stride - 2 * padding + kh)
    opad_w = w - ((y.shape[-1] - 1) * stride - 2 * padding + kw)
    lead = y.shape[:-3]
    y4 = y.reshape(-1, *y.shape[-3:])
    x = F.conv_transpose2d(y4, weight, stride=stride, padding=padding,
                           output_padding=(opad_h, opad_w))
    return x.reshape(*lead, *x.shape[-3:])


def split_sign(a: torch.Tensor):
    """Split into non-negative and non-positive parts: a == a_plus + a_minus."""
    return a.clamp(min=0), a.clamp(max=0)

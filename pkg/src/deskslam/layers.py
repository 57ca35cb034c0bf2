"""Network building blocks: fully-connected layers, MLP stacks, LSTM cell.

Weight init is uniform +-sqrt(6/(fan_in+fan_out)); LSTM forget-gate bias
starts at 1. Parameters are float32 unless a float64 check mode is asked
for explicitly.
"""

from __future__ import annotations

from typing import Dict, List

import numpy as np

from deskslam import autodiff as ad
from deskslam.autodiff import Tensor
from deskslam.core import Rng


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int, shape, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear:
    """y = x @ W + b with W of shape (in_dim, out_dim)."""

    def __init__(self, rng: Rng, in_dim: int, out_dim: int, dtype=np.float32,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim), dtype=dtype)
        else:
            w = glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim), dtype)
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.W), self.b)

    def parameters(self) -> List[Tensor]:
        return [self.W, self.b]


class MLP:
    """Stack of Linear layers with ReLU after every layer except optionally the last."""

    def __init__(self, rng: Rng, widths: List[int], dtype=np.float32,
                 relu_last: bool = True, zero_init_last: bool = False):
        self.layers = []
        for i in range(len(widths) - 1):
            zero = zero_init_last and i == len(widths) - 2
            self.layers.append(Linear(rng.child(i), widths[i], widths[i + 1], dtype, zero_init=zero))
        self.relu_last = relu_last

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if self.relu_last or i < len(self.layers) - 1:
                x = ad.relu(x)
        return x

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]


class LSTMCell:
    """Standard LSTM cell; gate order (input, forget, candidate, output)."""

    def __init__(self, rng: Rng, in_dim: int, hidden: int, dtype=np.float32):
        self.hidden = hidden
        self.Wx = Tensor(glorot_uniform(rng.child(0), in_dim, 4 * hidden, (in_dim, 4 * hidden), dtype),
                         requires_grad=True)
        self.Wh = Tensor(glorot_uniform(rng.child(1), hidden, 4 * hidden, (hidden, 4 * hidden), dtype),
                         requires_grad=True)
        bias = np.zeros(4 * hidden, dtype=dtype)
        bias[hidden : 2 * hidden] = 1.0  # forget gate open at init
        self.b = Tensor(bias, requires_grad=True)

    def __call__(self, x: Tensor, h: Tensor, c: Tensor):
        return lstm_step(x, h, c, self.Wx, self.Wh, self.b)

    def parameters(self) -> List[Tensor]:
        return [self.Wx, self.Wh, self.b]


def lstm_step(x: Tensor, h: Tensor, c: Tensor, Wx: Tensor, Wh: Tensor, b: Tensor):
    """One LSTM recurrence step for a (B, D) batch; returns (h', c')."""
    hidden = Wh.data.shape[0]
    if x.data.shape[-1] != Wx.data.shape[0] or h.data.shape[-1] != hidden or c.data.shape[-1] != hidden:
        raise ValueError(
            f"lstm_step shape mismatch: x{x.data.shape} h{h.data.shape} c{c.data.shape} "
            f"Wx{Wx.data.shape} Wh{Wh.data.shape}"
        )
    z = ad.add(ad.add(ad.matmul(x, Wx), ad.matmul(h, Wh)), b)
    i = ad.sigmoid(ad.slice_axis(z, -1, 0, hidden))
    f = ad.sigmoid(ad.slice_axis(z, -1, hidden, hidden))
    g = ad.tanh(ad.slice_axis(z, -1, 2 * hidden, hidden))
    o = ad.sigmoid(ad.slice_axis(z, -1, 3 * hidden, hidden))
    c_new = ad.add(ad.mul(f, c), ad.mul(i, g))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new


def named_parameters(prefix: str, module) -> Dict[str, Tensor]:
    """Flat name -> Tensor map in deterministic order for checkpointing."""
    out: Dict[str, Tensor] = {}
    for idx, p in enumerate(module.parameters()):
        out[f"{prefix}.{idx}"] = p
    return out

"""Gated dilated-inception temporal convolution.

Each layer runs four parallel dilated convolutions (kernel sizes 2, 3, 6, 7),
truncates all branches to the longest kernel's output length and concatenates
them along the channel axis. Two independent filter banks are combined as
tanh(a) * sigmoid(b). Dilation grows geometrically with depth at rate q.
"""

from __future__ import annotations

from . import autodiff as ad
from .autodiff import Tensor
from .params import weight, zeros
from .rng import RngState
from .static_graph import ConfigError

KERNEL_SIZES = (2, 3, 6, 7)
MAX_KERNEL = max(KERNEL_SIZES)


def receptive_field(c: int, q: float, k: int) -> int:
    """Receptive field of a k-layer stack with max kernel c and growth q."""
    if q <= 1:
        raise ConfigError(f"dilation growth rate must exceed 1, got {q}")
    if c < 2 or k < 1:
        raise ConfigError(f"need kernel >= 2 and layers >= 1, got c={c}, k={k}")
    return int(round(1 + (c - 1) * (q**k - 1) / (q - 1)))


def layer_dilation(q: float, layer_index: int) -> int:
    """Dilation of layer j (1-based): q^(j-1), floored, at least 1."""
    return max(1, int(q ** (layer_index - 1)))


class DilatedInception:
    """Four parallel dilated convolutions with an even channel split."""

    def __init__(self, c_in: int, c_out: int, dilation: int, rng: RngState):
        if c_out % len(KERNEL_SIZES) != 0:
            raise ConfigError(f"out-channels must be divisible by 4, got {c_out}")
        self.dilation = dilation
        split = c_out // len(KERNEL_SIZES)
        self.filters = [
            weight(rng, c_in * k, (split, c_in, k)) for k in KERNEL_SIZES
        ]
        self.bias = zeros((c_out,))

    def parameters(self) -> dict[str, Tensor]:
        out = {f"f{k}": f for k, f in zip(KERNEL_SIZES, self.filters)}
        out["bias"] = self.bias
        return out

    def min_length(self) -> int:
        return self.dilation * (MAX_KERNEL - 1) + 1

    def __call__(self, x: Tensor) -> Tensor:
        """x: (B, C_in, N, T) -> (B, C_out, N, T - dilation*(7-1))."""
        t_in = x.shape[3]
        if t_in < self.min_length():
            raise ad.ShapeError(
                f"dilated inception needs time length >= {self.min_length()}, got {t_in}"
            )
        t_out = t_in - self.dilation * (MAX_KERNEL - 1)
        branches = []
        for k, f in zip(KERNEL_SIZES, self.filters):
            y = ad.conv1d_dilated(x, f, self.dilation)
            extra = y.shape[3] - t_out
            if extra:
                y = ad.narrow(y, 3, extra, t_out)  # drop leading steps
            branches.append(y)
        out = ad.concat(branches, axis=1)
        return ad.add(out, ad.reshape(self.bias, (1, -1, 1, 1)))


class GatedTemporalLayer:
    """tanh/sigmoid-gated pair of dilated inception banks."""

    def __init__(self, c_in: int, c_out: int, dilation: int, rng: RngState):
        self.filter_bank = DilatedInception(c_in, c_out, dilation, rng)
        self.gate_bank = DilatedInception(c_in, c_out, dilation, rng)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, t in self.filter_bank.parameters().items():
            out[f"filter.{name}"] = t
        for name, t in self.gate_bank.parameters().items():
            out[f"gate.{name}"] = t
        return out

    def __call__(self, x: Tensor) -> Tensor:
        return ad.mul(ad.tanh(self.filter_bank(x)), ad.sigmoid(self.gate_bank(x)))

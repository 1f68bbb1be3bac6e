"""Small parameterized building blocks shared by the networks.

Every layer registers its tensors under a path prefix at construction and
looks them up again on every call, so a layer object reused at several
unfolding stages always reads the same registry entries.
"""

from __future__ import annotations

import numpy as np

from unfoldldm.tensor import ParamRegistry, Tensor
from unfoldldm.tensor import ops


class Conv:
    """``k x k`` convolution with reflect padding; ``groups`` is 1 or ``cin``."""

    def __init__(self, reg: ParamRegistry, path: str, cin: int, cout: int, k: int = 3,
                 stride: int = 1, depthwise: bool = False, zero: bool = False, pad: bool = True):
        self.reg, self.path = reg, path
        self.k, self.stride, self.pad = k, stride, pad
        self.groups = cin if depthwise else 1
        if depthwise and cin != cout:
            raise ValueError("depthwise conv keeps the channel count")
        fan_in = (1 if depthwise else cin) * k * k
        wshape = (cout, 1 if depthwise else cin, k, k)
        if zero:
            reg.add(path + ".weight", np.zeros(wshape))
        else:
            reg.add(path + ".weight", reg.rng.standard_normal(wshape) / np.sqrt(fan_in))
        reg.add(path + ".bias", np.zeros(cout))

    @property
    def weight(self) -> Tensor:
        return self.reg[self.path + ".weight"]

    @property
    def bias(self) -> Tensor:
        return self.reg[self.path + ".bias"]

    def __call__(self, x: Tensor) -> Tensor:
        if self.pad and self.k > 1:
            x = ops.pad(x, self.k // 2)
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, groups=self.groups)


class Projection:
    """Pointwise then 3x3 depthwise convolution (the Q/K/V style projection)."""

    def __init__(self, reg: ParamRegistry, path: str, cin: int, cout: int, zero: bool = False):
        self.pw = Conv(reg, path + ".pw", cin, cout, k=1)
        self.dw = Conv(reg, path + ".dw", cout, cout, k=3, depthwise=True, zero=zero)

    def __call__(self, x: Tensor) -> Tensor:
        return self.dw(self.pw(x))


class Linear:
    def __init__(self, reg: ParamRegistry, path: str, din: int, dout: int,
                 bias_init: float = 0.0, zero: bool = False, scale: float = 1.0):
        self.reg, self.path = reg, path
        w = np.zeros((dout, din)) if zero else scale * reg.rng.standard_normal((dout, din)) / np.sqrt(din)
        reg.add(path + ".weight", w)
        reg.add(path + ".bias", np.full(dout, bias_init))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.reg[self.path + ".weight"], self.reg[self.path + ".bias"])


class LayerNorm:
    """Normalizes over the channel axis at every pixel."""

    def __init__(self, reg: ParamRegistry, path: str, channels: int):
        self.reg, self.path = reg, path
        reg.add(path + ".gamma", np.ones(channels))
        reg.add(path + ".beta", np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.reg[self.path + ".gamma"], self.reg[self.path + ".beta"], axis=1)


class Upsample:
    """Transposed 2x2 convolution with stride 2."""

    def __init__(self, reg: ParamRegistry, path: str, cin: int, cout: int):
        self.reg, self.path = reg, path
        reg.add(path + ".weight", reg.rng.standard_normal((cin, cout, 2, 2)) / np.sqrt(cin))
        reg.add(path + ".bias", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.reg[self.path + ".weight"], self.reg[self.path + ".bias"])


def softplus_inverse(y: float) -> float:
    if y <= 0:
        return -np.inf
    return float(np.log(np.expm1(y)))

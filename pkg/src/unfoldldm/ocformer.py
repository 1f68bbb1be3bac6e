"""Prior-guided proximal network: channel attention (DRA) and prior modulation (PDR)
inside a four-level U-shaped encoder-decoder."""

from __future__ import annotations

import numpy as np

from unfoldldm.errors import ShapeError
from unfoldldm.layers import Conv, LayerNorm, Linear, Projection, Upsample
from unfoldldm.tensor import ParamRegistry, Tensor
from unfoldldm.tensor import ops


class DRABlock:
    """``F' = softmax(Q K^T / I) V + F`` with attention across channels.

    Q, K and V are read from a layer-normalized copy of ``F`` so the residual
    stream can grow without inflating the logits. Q and K are also
    unit-normalized along the flattened spatial axis; ``I`` is a learnable
    scalar temperature.
    """

    def __init__(self, reg: ParamRegistry, path: str, channels: int, zero_v: bool = False):
        self.reg, self.path = reg, path
        self.norm = LayerNorm(reg, path + ".ln", channels)
        self.q = Projection(reg, path + ".q", channels, channels)
        self.k = Projection(reg, path + ".k", channels, channels)
        self.v = Projection(reg, path + ".v", channels, channels, zero=zero_v)
        reg.add(path + ".temperature", np.array(1.0))

    @property
    def temperature(self) -> Tensor:
        return self.reg[self.path + ".temperature"]

    def attention(self, f: Tensor) -> Tensor:
        """Channel-by-channel attention weights for already normalized ``f``."""
        n, c, h, w = f.shape
        q = ops.normalize(ops.reshape(self.q(f), (n, c, h * w)), axes=(-1,))
        k = ops.normalize(ops.reshape(self.k(f), (n, c, h * w)), axes=(-1,))
        return ops.softmax(ops.batched_matmul(q, k.T) / self.temperature)

    def __call__(self, f: Tensor) -> Tensor:
        n, c, h, w = f.shape
        fn = self.norm(f)
        attn = self.attention(fn)
        v = ops.reshape(self.v(fn), (n, c, h * w))
        return ops.reshape(ops.batched_matmul(attn, v), (n, c, h, w)) + f


class PDRBlock:
    """Prior modulation: ``F'' = L1(P) * LN(F') + L2(P)``, ``F_x = F' + GELU(W_G F'') * W_H F''``."""

    def __init__(self, reg: ParamRegistry, path: str, channels: int, cp: int, zero_h: bool = False):
        self.norm = LayerNorm(reg, path + ".ln", channels)
        self.lin1 = Linear(reg, path + ".lin1", cp, channels, bias_init=1.0, scale=0.1)
        self.lin2 = Linear(reg, path + ".lin2", cp, channels, scale=0.1)
        self.wg = Projection(reg, path + ".wg", channels, channels)
        self.wh = Projection(reg, path + ".wh", channels, channels, zero=zero_h)

    def modulated(self, f: Tensor, prior: Tensor) -> Tensor:
        if prior.ndim != 2 or prior.shape[0] != f.shape[0]:
            raise ShapeError("pdr", f"prior {prior.shape} does not match batch of features {f.shape}")
        return ops.modulate(self.norm(f), self.lin1(prior), self.lin2(prior))

    def __call__(self, f: Tensor, prior: Tensor) -> Tensor:
        ff = self.modulated(f, prior)
        return f + ops.gelu(self.wg(ff)) * self.wh(ff)


def dra_forward(f: Tensor, block: DRABlock) -> Tensor:
    return block(f)


def pdr_forward(f: Tensor, prior: Tensor, block: PDRBlock) -> Tensor:
    return block(f, prior)


class OCFormer:
    """Four-level U-net of (DRA, PDR) blocks used as the learned proximal step.

    ``blocks[i]`` blocks run at level ``i`` on the way down (the last entry is
    the bottleneck) and again on the way up for levels 0-2. Output is the
    global residual ``x_tilde + conv(features)``. With ``zero_out`` the output
    conv and every block's residual branch start at zero, so the network is
    the identity on ``x_tilde`` at initialization.
    """

    def __init__(self, reg: ParamRegistry, channels: int, cp: int, base: int = 16,
                 blocks=(2, 2, 2, 2), prefix: str = "ocformer", zero_out: bool = True):
        if len(blocks) != 4:
            raise ValueError(f"expected four level block counts, got {blocks}")
        self.blocks = tuple(int(b) for b in blocks)
        self.use_dra = True
        self.use_pdr = True
        self.embed = Conv(reg, prefix + ".embed", 2 * channels, base, k=3)
        widths = [base * 2 ** i for i in range(4)]
        self.widths = widths
        self.enc = []
        self.down = []
        for lvl in range(4):
            self.enc.append([
                (DRABlock(reg, f"{prefix}.enc{lvl}.{b}.dra", widths[lvl], zero_v=zero_out),
                 PDRBlock(reg, f"{prefix}.enc{lvl}.{b}.pdr", widths[lvl], cp, zero_h=zero_out))
                for b in range(self.blocks[lvl])
            ])
            if lvl < 3:
                self.down.append(Conv(reg, f"{prefix}.down{lvl}", widths[lvl], widths[lvl + 1],
                                      k=2, stride=2, pad=False))
        self.up = []
        self.fuse = []
        self.dec = []
        for lvl in (2, 1, 0):
            self.up.append(Upsample(reg, f"{prefix}.up{lvl}", widths[lvl + 1], widths[lvl]))
            self.fuse.append(Conv(reg, f"{prefix}.fuse{lvl}", 2 * widths[lvl], widths[lvl], k=1))
            self.dec.append([
                (DRABlock(reg, f"{prefix}.dec{lvl}.{b}.dra", widths[lvl], zero_v=zero_out),
                 PDRBlock(reg, f"{prefix}.dec{lvl}.{b}.pdr", widths[lvl], cp, zero_h=zero_out))
                for b in range(self.blocks[lvl])
            ])
        self.out = Conv(reg, prefix + ".out", base, channels, k=3, zero=zero_out)

    def _run(self, level_blocks, f: Tensor, prior: Tensor) -> Tensor:
        for dra, pdr in level_blocks:
            if self.use_dra:
                f = dra(f)
            if self.use_pdr:
                f = pdr(f, prior)
        return f

    def __call__(self, x_hat: Tensor, x_tilde: Tensor, prior: Tensor) -> Tensor:
        h, w = x_hat.shape[-2:]
        if h % 8 or w % 8:
            raise ShapeError("ocformer", f"spatial extents must be multiples of 8, got {h}x{w}")
        if x_hat.shape != x_tilde.shape:
            raise ShapeError("ocformer", f"x_hat {x_hat.shape} and x_tilde {x_tilde.shape} differ")
        f = self.embed(ops.concat([x_hat, x_tilde], axis=1))
        skips = []
        for lvl in range(4):
            f = self._run(self.enc[lvl], f, prior)
            if lvl < 3:
                skips.append(f)
                f = self.down[lvl](f)
        for i, lvl in enumerate((2, 1, 0)):
            f = self.up[i](f)
            f = self.fuse[i](ops.concat([f, skips[lvl]], axis=1))
            f = self._run(self.dec[i], f, prior)
        return x_tilde + self.out(f)

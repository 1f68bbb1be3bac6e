"""Multi-granularity gradient stage: holistic and Kronecker-factored updates.

At stage ``k`` the holistic branch takes a gradient step on
``1/2 ||y - D x||^2`` with learned stand-ins for ``D`` and ``D^T``; the
decomposed branch re-estimates ``M_k`` then ``W_k`` and takes an exact
gradient step on ``1/2 ||y - W x M||^2``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from unfoldldm.errors import ShapeError
from unfoldldm.layers import Conv, LayerNorm, softplus_inverse
from unfoldldm.tensor import ParamRegistry, Tensor
from unfoldldm.tensor import ops


@dataclass
class StageState:
    """Everything threaded from one unfolding stage to the next."""

    x_prev: Tensor
    x_hat: Tensor | None
    x_tilde: Tensor | None
    W: Tensor
    M: Tensor
    k: int


class SeqMixBlock:
    """Shape-preserving mixer: depthwise 3x3, expand, LN, GELU, project, plus skip.

    ``x + pw2(GELU(LN(pw1(dw(x)))))``. The layer norm sits on the expanded
    features so single-channel inputs are not flattened to a constant.
    ``init_scale`` multiplies the initial ``pw2`` weights; 0 (or
    ``enabled=False``) makes the block the identity.
    """

    def __init__(self, reg: ParamRegistry, path: str, channels: int, hidden: int = 16,
                 init_scale: float = 1.0):
        self.enabled = True
        self.dw = Conv(reg, path + ".dw", channels, channels, k=3, depthwise=True)
        self.pw1 = Conv(reg, path + ".pw1", channels, hidden, k=1)
        self.norm = LayerNorm(reg, path + ".ln", hidden)
        self.pw2 = Conv(reg, path + ".pw2", hidden, channels, k=1, zero=init_scale == 0)
        self.pw2.weight.data *= init_scale

    def __call__(self, x: Tensor) -> Tensor:
        if not self.enabled:
            return x
        return x + self.pw2(ops.gelu(self.norm(self.pw1(self.dw(x)))))


def step_size(raw: Tensor) -> Tensor:
    """Nonnegative step size from its unconstrained parameter."""
    return ops.softplus(raw)


def holistic_step(x_prev: Tensor, y: Tensor, beta: Tensor, sim_d, sim_dt) -> Tensor:
    """``x - beta * simDT(simD(x) - y)``; ``beta`` is a scalar tensor."""
    if x_prev.shape != y.shape:
        raise ShapeError("holistic_step", f"x {x_prev.shape} and y {y.shape} differ")
    return x_prev - beta * sim_dt(sim_d(x_prev) - y)


def decomposed_step(x_prev: Tensor, y: Tensor, gamma: Tensor, W: Tensor, M: Tensor) -> Tensor:
    """``x - gamma * W^T (W x M - y) M^T`` channel by channel."""
    if x_prev.shape != y.shape:
        raise ShapeError("decomposed_step", f"x {x_prev.shape} and y {y.shape} differ")
    h, w = x_prev.shape[-2:]
    if W.shape[-2:] != (h, h) or M.shape[-2:] != (w, w) or W.shape[:-2] != x_prev.shape[:-2] \
            or M.shape[:-2] != x_prev.shape[:-2]:
        raise ShapeError("decomposed_step", f"factors {W.shape}, {M.shape} do not fit image {x_prev.shape}")
    resid = ops.matmul(ops.matmul(W, x_prev), M) - y
    return x_prev - gamma * ops.matmul(ops.matmul(W.T, resid), M.T)


class FactorEstimator:
    """Learned update for one factor from the observation and a partial product.

    For ``M`` the mixed ``2c x h x w`` field is collapsed along its height by
    a dense ``w x h`` projector into two ``c x w x w`` halves and combined as
    ``N(M1^T M2)``. The ``W`` estimator runs the same recipe on the spatially
    transposed field and transposes the result, so for square images it is
    the ``M`` estimator seen through a transpose.
    """

    def __init__(self, reg: ParamRegistry, path: str, channels: int, collapse: int, keep: int,
                 hidden: int = 16, transpose: bool = False, mixer_scale: float = 1.0):
        self.reg, self.path = reg, path
        self.c = channels
        self.transpose = transpose
        self.mixer = SeqMixBlock(reg, path + ".mix", 2 * channels, hidden, init_scale=mixer_scale)
        proj = np.eye(keep, collapse) + 0.01 * reg.rng.standard_normal((keep, collapse))
        reg.add(path + ".proj", proj)

    @property
    def projector(self) -> Tensor:
        return self.reg[self.path + ".proj"]

    def __call__(self, y: Tensor, partial: Tensor) -> Tensor:
        if y.shape != partial.shape:
            raise ShapeError("estimate_factor", f"y {y.shape} and partial product {partial.shape} differ")
        field = self.mixer(ops.concat([y, partial], axis=1))
        if self.transpose:
            field = field.T
        g = ops.matmul(self.projector, field)
        a, b = ops.split(g, [self.c, self.c], axis=1)
        gram = ops.matmul(a.T, b)
        if self.transpose:
            gram = gram.T
        return ops.normalize(gram)


class MGDA:
    """Parameters and forward pass of the gradient stage, shared by all stages."""

    def __init__(self, reg: ParamRegistry, channels: int, height: int, width: int,
                 hidden: int = 16, beta0: float = 0.5, gamma0: float = 0.5,
                 mixer_scale: float = 1.0, prefix: str = "mgda"):
        self.reg, self.prefix = reg, prefix
        reg.add(prefix + ".beta_raw", np.array(softplus_inverse(beta0)))
        reg.add(prefix + ".gamma_raw", np.array(softplus_inverse(gamma0)))
        self.sim_d = SeqMixBlock(reg, prefix + ".simD", channels, hidden, init_scale=mixer_scale)
        self.sim_dt = SeqMixBlock(reg, prefix + ".simDT", channels, hidden, init_scale=mixer_scale)
        self.est_m = FactorEstimator(reg, prefix + ".estM", channels, collapse=height, keep=width,
                                     hidden=hidden, mixer_scale=mixer_scale)
        self.est_w = FactorEstimator(reg, prefix + ".estW", channels, collapse=width, keep=height,
                                     hidden=hidden, transpose=True, mixer_scale=mixer_scale)
        self.use_x_hat = True
        self.use_x_tilde = True

    def set_mixers(self, enabled: bool):
        for block in (self.sim_d, self.sim_dt, self.est_m.mixer, self.est_w.mixer):
            block.enabled = enabled

    @property
    def beta(self) -> Tensor:
        return step_size(self.reg[self.prefix + ".beta_raw"])

    @property
    def gamma(self) -> Tensor:
        return step_size(self.reg[self.prefix + ".gamma_raw"])

    def estimate_M(self, y: Tensor, wx: Tensor) -> Tensor:
        return self.est_m(y, wx)

    def estimate_W(self, y: Tensor, xm: Tensor) -> Tensor:
        return self.est_w(y, xm)

    def run_stage_gradients(self, state: StageState, y: Tensor):
        """Both granularity updates for one stage.

        ``M_k`` comes from ``(y, W_{k-1} x_{k-1})``, then ``W_k`` from
        ``(y, x_{k-1} M_k)``, then the decomposed step uses the fresh pair.
        Returns ``(x_hat, x_tilde, W_k, M_k)``.
        """
        x = state.x_prev
        M = self.estimate_M(y, ops.matmul(state.W, x))
        W = self.estimate_W(y, ops.matmul(x, M))
        x_hat = holistic_step(x, y, self.beta, self.sim_d, self.sim_dt) if self.use_x_hat else None
        x_tilde = decomposed_step(x, y, self.gamma, W, M) if self.use_x_tilde else None
        if x_hat is None and x_tilde is None:
            raise ValueError("at least one of the two gradient branches must stay enabled")
        if x_hat is None:
            x_hat = x_tilde
        if x_tilde is None:
            x_tilde = x_hat
        return x_hat, x_tilde, W, M

"""The assembled unfolding network: K stages of MGDA, prior, and OCFormer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from unfoldldm.config import RunConfig
from unfoldldm.degradation import init_factors
from unfoldldm.mgda import MGDA, StageState
from unfoldldm.ocformer import OCFormer
from unfoldldm.prior import (
    Denoiser,
    NoiseSchedule,
    PriorEncoder,
    generate_prior,
    pi_encode,
    pi_prime_encode,
)
from unfoldldm.tensor import ParamRegistry, Tensor, no_grad

PI_PREFIX = "pi."


@dataclass
class StageRecord:
    x_hat: Tensor
    x_tilde: Tensor
    x_k: Tensor
    W: Tensor
    M: Tensor
    prior: Tensor
    cond: Tensor | None = None


class UnfoldLDM:
    """Owns the parameter registry and every sub-network.

    ``mode`` selects where each stage's prior comes from: ``"gt"`` encodes the
    ground truth with PI (first training phase); ``"diffusion"`` samples it
    from the latent diffusion chain conditioned on PI' (second phase and
    inference). With the ``no_drldm`` ablation the PI' cue is used directly.
    """

    def __init__(self, config: RunConfig, registry: ParamRegistry | None = None):
        self.config = config
        dtype = np.float64 if config.precision == "float64" else np.float32
        self.registry = registry if registry is not None else ParamRegistry(dtype, seed=config.seed)
        reg = self.registry
        c, s = config.channels, config.image_size
        self.schedule = NoiseSchedule(tuple(config.betas))
        self.schedule.check()
        zero = config.zero_init_outputs
        self.mgda = MGDA(reg, c, s, s, hidden=config.mix_hidden, beta0=config.beta0,
                         gamma0=config.gamma0, mixer_scale=config.mixer_init_scale)
        self.pi = PriorEncoder(reg, "pi", 3 * c, config.cp, config.pi_width, config.pi_hidden)
        self.pi_prime = PriorEncoder(reg, "pi_prime", 2 * c, config.cp, config.pi_width, config.pi_hidden)
        self.denoiser = Denoiser(reg, "denoiser", config.cp, config.denoiser_hidden)
        self.ocformer = OCFormer(reg, c, config.cp, base=config.base_width, blocks=config.blocks,
                                 zero_out=zero)
        self.apply_ablations()

    def apply_ablations(self):
        cfg = self.config
        self.mgda.use_x_hat = not cfg.no_x_hat
        self.mgda.use_x_tilde = not cfg.no_x_tilde
        self.mgda.set_mixers(not cfg.no_seqmix)
        self.ocformer.use_dra = not cfg.no_dra
        self.ocformer.use_pdr = not cfg.no_pdr

    @property
    def dtype(self):
        return self.registry.dtype

    def tensor(self, a: np.ndarray) -> Tensor:
        return Tensor(np.asarray(a, dtype=self.dtype))

    def initial_state(self, y: Tensor) -> StageState:
        f = init_factors(y.data.astype(np.float64))
        return StageState(x_prev=y, x_hat=None, x_tilde=None,
                          W=self.tensor(f.W), M=self.tensor(f.M), k=0)

    def stage_prior(self, x_hat: Tensor, x_tilde: Tensor, x_gt: Tensor | None, mode: str, rng):
        """Prior vector for one stage, plus the conditional cue when one is used."""
        if mode == "gt":
            if x_gt is None:
                raise ValueError("ground-truth prior requested without a ground-truth image")
            return pi_encode(self.pi, x_hat, x_tilde, x_gt), None
        cond = pi_prime_encode(self.pi_prime, x_hat, x_tilde)
        if self.config.no_drldm:
            return cond, cond
        with no_grad():
            prior = generate_prior(cond.detach(), self.denoiser, self.schedule, rng=rng)
        return prior.detach(), cond

    def unfold(self, y: Tensor, x_gt: Tensor | None = None, mode: str = "gt", rng=None):
        """Run all K stages on a batch ``y``; returns ``(x_K, records)``."""
        if mode not in ("gt", "diffusion"):
            raise ValueError(f"unknown prior mode {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(self.config.seed)
        state = self.initial_state(y)
        records = []
        for k in range(1, self.config.K + 1):
            state.k = k
            x_hat, x_tilde, W, M = self.mgda.run_stage_gradients(state, y)
            prior, cond = self.stage_prior(x_hat, x_tilde, x_gt, mode, rng)
            x_k = self.ocformer(x_hat, x_tilde, prior)
            records.append(StageRecord(x_hat, x_tilde, x_k, W, M, prior, cond))
            state = StageState(x_prev=x_k, x_hat=x_hat, x_tilde=x_tilde, W=W, M=M, k=k)
        return state.x_prev, records

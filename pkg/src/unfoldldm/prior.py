"""Compact prior vectors: the PI / PI' encoders and the few-step diffusion prior."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from unfoldldm.errors import ShapeError
from unfoldldm.layers import Conv, Linear
from unfoldldm.tensor import ParamRegistry, Tensor
from unfoldldm.tensor import ops

DEFAULT_BETAS = (0.30, 0.60, 0.90)
TIME_EMBED_DIM = 16


@dataclass
class NoiseSchedule:
    """Variance schedule ``beta^1..beta^T`` and the quantities derived from it.

    Index ``t`` runs from 1 to ``T``; ``alpha_bar(0) == 1``.
    """

    betas: tuple[float, ...] = DEFAULT_BETAS
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)
    sigmas_sq: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or b.size == 0:
            raise ValueError("schedule needs at least one beta")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError(f"betas must lie in (0, 1), got {self.betas}")
        if np.any(np.diff(b) <= 0):
            raise ValueError(f"betas must be strictly increasing, got {self.betas}")
        self.betas = tuple(float(v) for v in b)
        self.alphas = 1.0 - b
        self.alpha_bars = np.cumprod(self.alphas)
        prev = np.concatenate([[1.0], self.alpha_bars[:-1]])
        self.sigmas_sq = (1.0 - prev) / (1.0 - self.alpha_bars) * b

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def check(self, tol: float = 1e-12):
        """Recompute every derived quantity from the betas and compare."""
        b = np.asarray(self.betas)
        ok = np.allclose(self.alphas, 1.0 - b, rtol=0, atol=tol)
        ok &= np.allclose(self.alpha_bars, [np.prod(1.0 - b[:t + 1]) for t in range(b.size)], rtol=0, atol=tol)
        for t in range(1, self.T + 1):
            want = (1.0 - self.alpha_bar(t - 1)) * b[t - 1] / (1.0 - self.alpha_bar(t))
            ok &= abs(self.sigmas_sq[t - 1] - want) <= tol
        if not ok:
            raise ValueError("noise schedule identities violated")
        return True

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


class PriorEncoder:
    """Image stack to a compact vector: two stride-2 3x3 convs, mean pool, 2-layer MLP."""

    def __init__(self, reg: ParamRegistry, path: str, cin: int, cp: int, width: int = 32, hidden: int = 128):
        self.cin, self.cp = cin, cp
        self.conv1 = Conv(reg, path + ".conv1", cin, width, k=3, stride=2)
        self.conv2 = Conv(reg, path + ".conv2", width, 2 * width, k=3, stride=2)
        self.fc1 = Linear(reg, path + ".fc1", 2 * width, hidden)
        self.fc2 = Linear(reg, path + ".fc2", hidden, cp)
        self.path = path

    def __call__(self, images: list[Tensor]) -> Tensor:
        ref = images[0].shape
        for im in images[1:]:
            if im.shape != ref:
                raise ShapeError(self.path, f"input images differ in shape: {ref} vs {im.shape}")
        x = ops.concat(images, axis=1)
        if x.shape[1] != self.cin:
            raise ShapeError(self.path, f"expected {self.cin} stacked channels, got {x.shape[1]}")
        x = ops.gelu(self.conv1(x))
        x = ops.gelu(self.conv2(x))
        return self.fc2(ops.gelu(self.fc1(ops.mean_pool(x))))


def pi_encode(encoder: PriorEncoder, x_hat: Tensor, x_tilde: Tensor, x_gt: Tensor) -> Tensor:
    """Clean-informed prior from both gradient outputs and the ground truth."""
    return encoder([x_hat, x_tilde, x_gt])


def pi_prime_encode(encoder: PriorEncoder, x_hat: Tensor, x_tilde: Tensor) -> Tensor:
    """Conditional cue from the two gradient outputs alone."""
    return encoder([x_hat, x_tilde])


def time_embedding(t: np.ndarray | int, n: int, dim: int = TIME_EMBED_DIM, dtype=np.float64) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    freqs = np.exp(-np.log(100.0) * np.arange(dim // 2) / (dim // 2))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)


class Denoiser:
    """Noise predictor ``eps(P_t, P_c, t)``: MLP on the concatenated inputs."""

    def __init__(self, reg: ParamRegistry, path: str, cp: int, hidden: int = 256):
        self.cp = cp
        self.dtype = reg.dtype
        self.fc1 = Linear(reg, path + ".fc1", 2 * cp + TIME_EMBED_DIM, hidden)
        self.fc2 = Linear(reg, path + ".fc2", hidden, hidden)
        self.fc3 = Linear(reg, path + ".fc3", hidden, cp, scale=0.1)

    def __call__(self, pt: Tensor, pc: Tensor, t) -> Tensor:
        if pt.shape != pc.shape or pt.shape[-1] != self.cp:
            raise ShapeError("denoiser", f"noisy prior {pt.shape} and condition {pc.shape} must both be N x {self.cp}")
        emb = Tensor(time_embedding(t, pt.shape[0], dtype=pt.dtype))
        h = ops.gelu(self.fc1(ops.concat([pt, pc, emb], axis=1)))
        h = ops.gelu(self.fc2(h))
        return self.fc3(h)


def forward_diffuse(p0, t: int, schedule: NoiseSchedule, noise=None, rng=None):
    """Sample the closed-form marginal ``sqrt(ab) p0 + sqrt(1 - ab) eps``.

    Works on tensors or arrays. Draws ``eps`` from ``rng`` unless injected.
    """
    schedule._check_t(t)
    ab = schedule.alpha_bar(t)
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal(np.shape(p0.data if isinstance(p0, Tensor) else p0))
    if isinstance(p0, Tensor):
        return p0 * float(np.sqrt(ab)) + Tensor(np.asarray(noise, dtype=p0.dtype)) * float(np.sqrt(1.0 - ab))
    return np.sqrt(ab) * np.asarray(p0) + np.sqrt(1.0 - ab) * np.asarray(noise)


def forward_step(p_prev, t: int, schedule: NoiseSchedule, rng) -> np.ndarray:
    """One transition ``q(P_t | P_{t-1})`` of the forward chain (arrays only)."""
    schedule._check_t(t)
    b = schedule.betas[t - 1]
    return np.sqrt(1.0 - b) * np.asarray(p_prev) + np.sqrt(b) * rng.standard_normal(np.shape(p_prev))


def reverse_step(pt, pc, t: int, denoiser, schedule: NoiseSchedule, noise=None, rng=None):
    """One ancestral step from ``t`` to ``t - 1``.

    ``(P_t - (1 - a)/sqrt(1 - ab) * eps(P_t, P_c, t)) / sqrt(a) + sqrt(1 - a) z``
    with ``z`` injected or drawn from ``rng``; the step into ``t = 0`` adds no
    noise. ``denoiser`` may return a tensor or an array.
    """
    schedule._check_t(t)
    a = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    coef = (1.0 - a) / np.sqrt(1.0 - ab) if ab < 1.0 else 0.0
    eps = denoiser(pt, pc, t)
    is_tensor = isinstance(pt, Tensor) or isinstance(eps, Tensor)
    if is_tensor:
        pt_t = pt if isinstance(pt, Tensor) else Tensor(pt)
        eps_t = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=pt_t.dtype))
        out = (pt_t - eps_t * float(coef)) * float(1.0 / np.sqrt(a))
    else:
        out = (np.asarray(pt) - coef * np.asarray(eps)) / np.sqrt(a)
    if t > 1:
        if noise is None:
            rng = rng if rng is not None else np.random.default_rng()
            noise = rng.standard_normal(out.shape)
        if np.any(noise):
            scale = float(np.sqrt(1.0 - a))
            if is_tensor:
                out = out + Tensor(np.asarray(noise, dtype=out.dtype)) * scale
            else:
                out = out + scale * np.asarray(noise)
    return out


def generate_prior(pc, denoiser, schedule: NoiseSchedule, seed=None, rng=None, noises=None):
    """Run the full reverse chain from ``P_T ~ N(0, I)`` down to ``t = 0``.

    ``noises`` optionally fixes ``[P_T, z_T, ..., z_2]``; otherwise they are
    drawn in that order from ``rng`` (or a generator seeded with ``seed``).
    """
    shape = pc.shape
    if rng is None:
        rng = np.random.default_rng(seed)
    if noises is None:
        noises = [rng.standard_normal(shape) for _ in range(schedule.T)]
    dtype = pc.dtype
    p = Tensor(np.asarray(noises[0], dtype=dtype)) if isinstance(pc, Tensor) else np.asarray(noises[0])
    for i, t in enumerate(range(schedule.T, 0, -1)):
        z = noises[i + 1] if t > 1 else np.zeros(shape)
        p = reverse_step(p, pc, t, denoiser, schedule, noise=z)
    return p

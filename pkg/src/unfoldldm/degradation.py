"""Kronecker-factored degradation operators and synthetic degradations.

A degradation acting on a ``c x h x w`` image is modelled per channel as
``x -> W x M`` with ``W`` of size ``h x h`` and ``M`` of size ``w x w``. Its
dense form on column-stacked images is ``D = kron(M.T, W)``, because
``vec(W X M) = (M^T kron W) vec(X)`` for column-major ``vec``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from unfoldldm.errors import ShapeError

log = logging.getLogger(__name__)

NORM_EPS = 1e-12
DENSE_BUDGET = 1 << 22  # values; about 32 MB at 64-bit


@dataclass
class DegradationPair:
    """Per-channel factors: ``W`` is ``c x h x h``, ``M`` is ``c x w x w``."""

    W: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        if self.W.shape[-1] != self.W.shape[-2] or self.M.shape[-1] != self.M.shape[-2]:
            raise ShapeError("DegradationPair", f"factors must be square, got {self.W.shape} and {self.M.shape}")
        if self.W.shape[:-2] != self.M.shape[:-2]:
            raise ShapeError("DegradationPair", f"channel extents differ: {self.W.shape} vs {self.M.shape}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        return apply_decomposed(self.W, x, self.M)

    def holistic(self, budget: int = DENSE_BUDGET) -> np.ndarray:
        return materialize_holistic(self.W, self.M, budget)


def _check_conform(W, x, M, op="apply_decomposed"):
    if x.ndim < 2:
        raise ShapeError(op, f"image must have at least 2 axes, got {x.shape}")
    h, w = x.shape[-2:]
    if W.shape[-2:] != (h, h):
        raise ShapeError(op, f"W has extents {W.shape[-2:]}, image height is {h}")
    if M.shape[-2:] != (w, w):
        raise ShapeError(op, f"M has extents {M.shape[-2:]}, image width is {w}")
    if W.shape[:-2] != x.shape[:-2] or M.shape[:-2] != x.shape[:-2]:
        raise ShapeError(op, f"channel extents of W {W.shape}, x {x.shape}, M {M.shape} disagree")


def apply_decomposed(W: np.ndarray, x: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Per-channel ``W_ch @ x_ch @ M_ch``."""
    _check_conform(W, x, M)
    return W @ x @ M


def apply_adjoint(W: np.ndarray, z: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Per-channel ``W_ch^T @ z_ch @ M_ch^T``, the adjoint of :func:`apply_decomposed`."""
    _check_conform(W, z, M, "apply_adjoint")
    return np.swapaxes(W, -1, -2) @ z @ np.swapaxes(M, -1, -2)


def vec(x: np.ndarray) -> np.ndarray:
    """Column-stack each channel: ``c x h x w -> c x hw``."""
    c, h, w = x.shape
    return np.swapaxes(x, -1, -2).reshape(c, h * w)


def unvec(v: np.ndarray, h: int, w: int) -> np.ndarray:
    c = v.shape[0]
    return np.swapaxes(v.reshape(c, w, h), -1, -2)


def materialize_holistic(W: np.ndarray, M: np.ndarray, budget: int = DENSE_BUDGET) -> np.ndarray:
    """Dense ``c x hw x hw`` stack with ``D_ch = kron(M_ch^T, W_ch)``.

    Oracle use only; refuses sizes whose dense form exceeds ``budget`` values.
    """
    if W.ndim != 3 or M.ndim != 3 or W.shape[0] != M.shape[0]:
        raise ShapeError("materialize_holistic", f"expected c x h x h and c x w x w, got {W.shape}, {M.shape}")
    c, h, _ = W.shape
    w = M.shape[1]
    n = c * (h * w) ** 2
    if n > budget:
        raise MemoryError(
            f"dense operator would hold {n} values (budget {budget}); "
            "use oracle-scale inputs (small h and w) for materialization"
        )
    return np.stack([np.kron(M[i].T, W[i]) for i in range(c)])


def l2_normalize(stack: np.ndarray) -> np.ndarray:
    """Divide each trailing matrix by its Frobenius norm."""
    stack = np.asarray(stack)
    norms = np.sqrt((stack * stack).sum(axis=(-2, -1), keepdims=True))
    if np.any(norms <= NORM_EPS):
        log.warning("l2_normalize: %d zero-norm matrices guarded by eps", int((norms <= NORM_EPS).sum()))
    return stack / np.maximum(norms, NORM_EPS)


def init_factors(y: np.ndarray) -> DegradationPair:
    """Initial factors from the observation itself.

    Each channel slice ``y_ch`` (``h x w``) gives ``W0 = N(y_ch y_ch^T)``
    (``h x h``) and ``M0 = N(y_ch^T y_ch)`` (``w x w``). Works on batched input.
    """
    if y.ndim < 3:
        raise ShapeError("init_factors", f"expected c x h x w, got {y.shape}")
    yt = np.swapaxes(y, -1, -2)
    return DegradationPair(W=l2_normalize(y @ yt), M=l2_normalize(yt @ y))


def gaussian_blur_matrix(n: int, sigma: float) -> np.ndarray:
    """``n x n`` matrix of a 1-D Gaussian blur with reflect boundary."""
    if sigma < 1e-8:
        return np.eye(n)
    return gaussian_filter1d(np.eye(n), sigma, axis=0, mode="reflect", truncate=4.0)


# ---------------------------------------------------------------- synthetic corpora

KINDS = ("gaussian_blur", "illumination", "row_streaks")


@dataclass
class SyntheticDegradation:
    """One degradation recipe.

    ``sigma`` is the blur width in pixels, ``gain`` the mean illumination
    factor, ``density``/``intensity`` the streak parameters; ``noise_sigma``
    is additive Gaussian noise in [0, 1] units.
    """

    kind: str = "gaussian_blur"
    sigma: float = 1.5
    gain: float = 0.35
    density: float = 0.15
    intensity: float = 0.4
    noise_sigma: float = 0.05
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticDegradation":
        return cls(**d)


def _gain_profiles(rng, h, w, mean_gain):
    # rank-one smooth field u v^T, so the operator is exactly diag(u) x diag(v)
    def profile(n):
        t = np.linspace(0.0, 1.0, n)
        phase = rng.uniform(0, 2 * np.pi)
        return 1.0 + 0.3 * np.cos(2 * np.pi * rng.uniform(0.3, 1.0) * t + phase)

    u, v = profile(h), profile(w)
    scale = mean_gain / (u.mean() * v.mean())
    return np.sqrt(scale) * u, np.sqrt(scale) * v


def degradation_factors(spec: SyntheticDegradation, c: int, h: int, w: int) -> DegradationPair | None:
    """Ground-truth ``(W, M)`` for the linear kinds; ``None`` for additive streaks."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "gaussian_blur":
        bh = gaussian_blur_matrix(h, spec.sigma)
        bw = gaussian_blur_matrix(w, spec.sigma)
        return DegradationPair(np.repeat(bh[None], c, 0), np.repeat(bw.T[None], c, 0))
    if spec.kind == "illumination":
        u, v = _gain_profiles(rng, h, w, spec.gain)
        return DegradationPair(np.repeat(np.diag(u)[None], c, 0), np.repeat(np.diag(v)[None], c, 0))
    if spec.kind == "row_streaks":
        return None
    raise ValueError(f"unknown degradation kind {spec.kind!r}; expected one of {KINDS}")


def synthesize(clean: np.ndarray, spec: SyntheticDegradation, clip: bool = True) -> np.ndarray:
    """Degrade a ``c x h x w`` image in [0, 1]; deterministic under ``spec.seed``."""
    if clean.ndim != 3:
        raise ShapeError("synthesize", f"expected c x h x w, got {clean.shape}")
    if spec.kind not in KINDS:
        raise ValueError(f"unknown degradation kind {spec.kind!r}; expected one of {KINDS}")
    c, h, w = clean.shape
    rng = np.random.default_rng(spec.seed)
    factors = degradation_factors(spec, c, h, w)
    if factors is not None:
        out = factors.apply(clean.astype(np.float64))
    else:
        rows = rng.random(h) < spec.density
        along = 0.5 + 0.5 * rng.random(w)
        streaks = np.zeros((h, w))
        streaks[rows] = spec.intensity * along
        out = clean.astype(np.float64) + streaks[None]
    # the noise draw comes from its own stream so it is independent of the kind
    noise_rng = np.random.default_rng([spec.seed, 1])
    if spec.noise_sigma > 0:
        out = out + spec.noise_sigma * noise_rng.standard_normal(out.shape)
    return np.clip(out, 0.0, 1.0) if clip else out

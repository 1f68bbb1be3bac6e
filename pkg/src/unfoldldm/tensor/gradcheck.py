"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from unfoldldm.tensor.tensor import Tensor, backward

FD_STEP = 1e-5


def rel_error(a, b, floor: float = 1e-10) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Entrywise central differences of ``f`` with respect to ``x`` (mutated in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return g


def check_gradients(
    build: Callable[[Sequence[Tensor]], Tensor],
    arrays: Sequence[np.ndarray],
    step: float = FD_STEP,
    max_entries: int = 48,
    n_directions: int = 4,
    seed: int = 0,
) -> list[float]:
    """Compare analytic and finite-difference gradients of a scalar builder.

    ``build`` receives one tracked tensor per array and returns a scalar.
    Small inputs are checked entry by entry; larger ones on a random subset of
    entries plus a few random directional derivatives. Returns one relative
    error per input (the worst of its individual checks).
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    backward(loss)
    analytic = [l.grad if l.grad is not None else np.zeros_like(l.data) for l in leaves]

    def value() -> float:
        return float(build([Tensor(a) for a in arrays]).data)

    errors = []
    for a, ga in zip(arrays, analytic):
        if a.size <= max_entries:
            errors.append(rel_error(ga, numeric_grad(value, a, step)))
            continue
        worst = 0.0
        flat = a.reshape(-1)
        idx = rng.choice(flat.size, size=max_entries, replace=False)
        num = np.empty(len(idx))
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            num[n] = (fp - fm) / (2.0 * step)
        worst = max(worst, rel_error(ga.reshape(-1)[idx], num))
        for _ in range(n_directions):
            v = rng.standard_normal(a.shape)
            v /= np.linalg.norm(v)
            orig = a.copy()
            a += step * v
            fp = value()
            a[...] = orig - step * v
            fm = value()
            a[...] = orig
            num_d = (fp - fm) / (2.0 * step)
            worst = max(worst, rel_error(np.sum(ga * v), num_d))
        errors.append(worst)
    return errors

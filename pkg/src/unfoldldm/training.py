"""Losses, the two training phases, and inference."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from unfoldldm.errors import NonFiniteError, ShapeError
from unfoldldm.model import PI_PREFIX, UnfoldLDM
from unfoldldm.prior import forward_diffuse, pi_encode
from unfoldldm.tensor import AdamState, Tensor, backward, cosine_lr, no_grad, optimizer_step, save_checkpoint
from unfoldldm.tensor import ops

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "l_rec", "l_isda", "l_diff", "total", "lr")
ROLLOUT_COLUMNS = ("step", "rollout_l_diff")


# ---------------------------------------------------------------- losses

def mean_l1(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mean_l1", f"{a.shape} vs {b.shape}")
    return ops.scalar_mul(ops.l1_sum(a - b), 1.0 / a.size)


def loss_rec(x_k: Tensor, x_gt: Tensor) -> Tensor:
    """Mean absolute error between the final estimate and the ground truth."""
    return mean_l1(x_k, x_gt)


def isda_weights(K: int) -> list[float]:
    """Per-stage weights, stage 1 first: 0 for stage 1, then ``1 / 2^(K-k)``."""
    return [0.0] + [1.0 / 2 ** (K - k) for k in range(2, K + 1)]


def loss_isda(pairs) -> Tensor:
    """Stage-weighted consistency between the two gradient branches.

    ``pairs`` lists ``(x_hat_k, x_tilde_k)`` for k = 1..K. The first stage is
    left out and the last stage has weight 1.
    """
    K = len(pairs)
    if K < 2:
        log.info("ISDA loss needs at least two stages; K = %d gives 0", K)
        ref = pairs[0][0] if pairs else None
        return Tensor(np.zeros((), dtype=ref.dtype if ref is not None else np.float64))
    total = None
    for w, (xh, xt) in zip(isda_weights(K)[1:], pairs[1:]):
        term = ops.scalar_mul(mean_l1(xh, xt), w)
        total = term if total is None else total + term
    return total


def loss_diff(p_pred: Tensor, p_target: Tensor) -> Tensor:
    """Mean per-entry l1 distance between two prior vectors (or batches)."""
    return mean_l1(p_pred, p_target)


# ---------------------------------------------------------------- reports

@dataclass
class LossReport:
    step: int
    l_rec: float
    l_isda: float
    l_diff: float
    total: float
    lr: float
    stage_gaps: list[float] = field(default_factory=list)
    phase: int = 1

    def row(self) -> list:
        return [self.step, self.l_rec, self.l_isda, self.l_diff, self.total, self.lr]


@dataclass
class PhaseConfig:
    phase: int
    steps: int
    batch_size: int
    lr: float = 2e-4
    lr_min: float = 1e-6
    frozen: tuple[str, ...] = ()
    seed: int = 0
    rollout_every: int = 50

    @classmethod
    def from_run(cls, config, phase: int) -> "PhaseConfig":
        if phase not in (1, 2):
            raise ValueError(f"phase must be 1 or 2, got {phase}")
        return cls(
            phase=phase,
            steps=config.steps1 if phase == 1 else config.steps2,
            batch_size=config.batch_size,
            lr=config.lr,
            lr_min=config.lr_min,
            frozen=() if phase == 1 else (PI_PREFIX,),
            seed=config.seed + 1000 * phase,
            rollout_every=config.rollout_every,
        )


class CsvLog:
    """Append-only CSV with a fixed header, flushed per row."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(self.path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(columns)

    def write(self, row):
        self.writer.writerow([f"{v:.9g}" if isinstance(v, float) else v for v in row])
        self.fh.flush()

    def close(self):
        self.fh.close()


def stage_gaps(records) -> list[float]:
    return [float(np.mean(np.abs(r.x_hat.data - r.x_tilde.data))) for r in records]


def _diagnose(step: int, parts: dict, records) -> str:
    bad = []
    for k, r in enumerate(records, 1):
        for name in ("x_hat", "x_tilde", "x_k", "W", "M", "prior"):
            if not np.all(np.isfinite(getattr(r, name).data)):
                bad.append(f"stage {k} {name}")
    where = ", ".join(bad) if bad else "no stage output (loss arithmetic)"
    vals = ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
    return f"step {step}: {vals}; non-finite at {where}"


# ---------------------------------------------------------------- training

def _loss_terms(model: UnfoldLDM, records, x_k, gt, phase: int, rng):
    cfg = model.config
    zeta = 0.0 if cfg.no_isda else (cfg.zeta1 if phase == 1 else cfg.zeta2)
    l_rec = loss_rec(x_k, gt)
    l_isda = loss_isda([(r.x_hat, r.x_tilde) for r in records])
    total = l_rec + ops.scalar_mul(l_isda, zeta) if zeta else l_rec
    l_diff = None
    if phase == 2 and not cfg.no_drldm:
        # noise-prediction surrogate against the frozen-PI target
        terms = []
        for r in records:
            with no_grad():
                target = pi_encode(model.pi, r.x_hat.detach(), r.x_tilde.detach(), gt).detach()
            t = int(rng.integers(1, model.schedule.T + 1))
            eps = rng.standard_normal(target.shape).astype(model.dtype)
            p_t = forward_diffuse(target, t, model.schedule, noise=eps)
            terms.append(loss_diff(model.denoiser(p_t, r.cond, t), Tensor(eps)))
        l_diff = terms[0]
        for term in terms[1:]:
            l_diff = l_diff + term
        l_diff = ops.scalar_mul(l_diff, 1.0 / len(terms))
        total = total + ops.scalar_mul(l_diff, cfg.zeta3)
    return l_rec, l_isda, l_diff, total


def rollout_l_diff(model: UnfoldLDM, y: np.ndarray, gt: np.ndarray, seed: int = 0) -> float:
    """Diffusion consistency measured through a full reverse rollout.

    Mean over stages of ``|P_hat - P_h|`` where ``P_hat`` is the generated
    prior and ``P_h`` the PI encoding of the same stage with the ground truth.
    """
    with no_grad():
        _, records = model.unfold(model.tensor(y), mode="diffusion", rng=np.random.default_rng(seed))
        gt_t = model.tensor(gt)
        vals = [loss_diff(r.prior, pi_encode(model.pi, r.x_hat, r.x_tilde, gt_t)).item() for r in records]
    return float(np.mean(vals))


def train_phase(model: UnfoldLDM, source, phase: PhaseConfig, out_dir=None, log_every: int = 0,
                probe=None, callback=None) -> list[LossReport]:
    """Run one phase in place on ``model.registry``.

    ``source.batch(rng, n)`` must return ``(y, x_gt)`` arrays. With ``out_dir``
    the loss stream goes to ``phase{n}_loss.csv`` (and ``rollout.csv`` in the
    second phase) and the final weights to ``phase{n}.ckpt``. ``probe`` is a
    fixed ``(y, x_gt)`` batch for the rollout metric.
    """
    reg = model.registry
    reg.unfreeze_all()
    reg.freeze(phase.frozen)
    mode = "gt" if phase.phase == 1 else "diffusion"
    rng = np.random.default_rng(phase.seed)
    state = AdamState()
    reports: list[LossReport] = []
    loss_log = roll_log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        loss_log = CsvLog(out_dir / f"phase{phase.phase}_loss.csv", LOSS_COLUMNS)
        if phase.phase == 2:
            roll_log = CsvLog(out_dir / "rollout.csv", ROLLOUT_COLUMNS)
    if probe is None and phase.phase == 2:
        probe = source.batch(np.random.default_rng(phase.seed + 1), phase.batch_size)
    params = {p: reg[p] for p in reg.paths() if p not in reg.frozen}
    t0 = time.perf_counter()
    try:
        for step in range(phase.steps):
            lr = cosine_lr(step, phase.steps, phase.lr, phase.lr_min)
            y_np, gt_np = source.batch(rng, phase.batch_size)
            y, gt = model.tensor(y_np), model.tensor(gt_np)
            x_k, records = model.unfold(y, gt, mode=mode, rng=rng)
            l_rec, l_isda, l_diff, total = _loss_terms(model, records, x_k, gt, phase.phase, rng)
            parts = {"l_rec": l_rec.item(), "l_isda": l_isda.item(),
                     "l_diff": l_diff.item() if l_diff is not None else 0.0, "total": total.item()}
            if not math.isfinite(parts["total"]):
                raise NonFiniteError("loss", _diagnose(step, parts, records))
            reg.zero_grad()
            grads = backward(total, params)
            try:
                optimizer_step(reg, grads, state, lr)
            except NonFiniteError as exc:
                raise NonFiniteError("gradient", f"step {step}: {exc}") from None
            rep = LossReport(step, parts["l_rec"], parts["l_isda"], parts["l_diff"], parts["total"],
                             lr, stage_gaps(records), phase.phase)
            reports.append(rep)
            if loss_log:
                loss_log.write(rep.row())
            if roll_log and not model.config.no_drldm and (
                    step % phase.rollout_every == 0 or step == phase.steps - 1):
                roll_log.write([step, rollout_l_diff(model, *probe, seed=phase.seed)])
            if log_every and (step % log_every == 0 or step == phase.steps - 1):
                log.info("phase %d step %d/%d total %.5f rec %.5f isda %.5f diff %.5f (%.1fs)",
                         phase.phase, step + 1, phase.steps, rep.total, rep.l_rec, rep.l_isda,
                         rep.l_diff, time.perf_counter() - t0)
            if callback:
                callback(rep)
    finally:
        for f in (loss_log, roll_log):
            if f:
                f.close()
    if out_dir is not None:
        save_checkpoint(out_dir / f"phase{phase.phase}.ckpt", reg,
                        meta={"phase": phase.phase, "steps": phase.steps, "config": model.config.to_dict()})
    return reports


def train_phase1(model: UnfoldLDM, source, out_dir=None, **kw) -> list[LossReport]:
    return train_phase(model, source, PhaseConfig.from_run(model.config, 1), out_dir, **kw)


def train_phase2(model: UnfoldLDM, source, out_dir=None, **kw) -> list[LossReport]:
    return train_phase(model, source, PhaseConfig.from_run(model.config, 2), out_dir, **kw)


# ---------------------------------------------------------------- inference

def _reflect_pad(y: np.ndarray, target: int):
    h, w = y.shape[-2:]
    ph, pw = (-h) % 8, (-w) % 8
    if h + ph != target or w + pw != target:
        raise ShapeError("infer", f"{h}x{w} pads to {h + ph}x{w + pw}, model expects {target}x{target}")
    if not (ph or pw):
        return y, None
    widths = [(0, 0)] * (y.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(y, widths, mode="reflect"), (h, w)


def infer(model: UnfoldLDM, y: np.ndarray, seed: int = 0, mode: str = "diffusion"):
    """Restore ``y`` (``c x h x w`` or a batch) and return ``(x_K, trace)``.

    Sizes that are not multiples of 8 are reflect-padded up to the model size
    and cropped back; the trace records this. Same seed, same output.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 3
    batch = y[None] if single else y
    padded, crop = _reflect_pad(batch, model.config.image_size)
    with no_grad():
        x_k, records = model.unfold(model.tensor(padded), mode=mode, rng=np.random.default_rng(seed))

    def cut(a: np.ndarray) -> np.ndarray:
        a = a.astype(np.float64)
        if crop:
            a = a[..., :crop[0], :crop[1]]
        return a[0] if single else a

    trace = {
        "padded_from": list(crop) if crop else None,
        "stages": [{
            "k": k,
            "x_hat": cut(r.x_hat.data),
            "x_tilde": cut(r.x_tilde.data),
            "x_k": cut(r.x_k.data),
            "W_norm": float(np.linalg.norm(r.W.data)),
            "M_norm": float(np.linalg.norm(r.M.data)),
        } for k, r in enumerate(records, 1)],
    }
    return cut(x_k.data), trace

"""Registered finite-difference suites for every op-kind and network block.

Every suite builds a small random 64-bit instance, reduces the output to a
scalar with a fixed random weighting, and compares reverse-mode gradients
with central differences for all inputs and parameters. ``sign_flip``
patches one backward rule in the op registry so the suites can be shown to
catch it.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable

import numpy as np

from unfoldldm.mgda import FactorEstimator, SeqMixBlock, decomposed_step, holistic_step
from unfoldldm.ocformer import DRABlock, OCFormer, PDRBlock
from unfoldldm.prior import Denoiser, PriorEncoder, pi_encode, pi_prime_encode
from unfoldldm.tensor import ParamRegistry, Tensor, ops
from unfoldldm.tensor.gradcheck import check_gradients
from unfoldldm.tensor.ops import OPS, OpDef

DEFAULT_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    group: str
    max_rel_error: float
    n_inputs: int
    seconds: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol)


@dataclass
class Suite:
    name: str
    group: str
    make: Callable  # rng -> (build, arrays)
    tol: float = DEFAULT_TOL
    max_entries: int = 48  # larger inputs are sampled, plus random directions
    n_directions: int = 4


SUITES: dict[str, Suite] = {}


def suite(name: str, group: str = "op", tol: float = DEFAULT_TOL, max_entries: int = 48,
          n_directions: int = 4):
    def deco(make):
        SUITES[name] = Suite(name, group, make, tol, max_entries, n_directions)
        return make
    return deco


def _reduce(fn, arrays, rng):
    """Wrap ``fn(*tensors) -> tensor`` into a scalar builder with fixed weights."""
    probe = fn(*[Tensor(a) for a in arrays])
    r = rng.standard_normal(probe.shape)

    def build(ts):
        out = fn(*ts)
        return ops.sum_all(ops.mul(out, Tensor(r))) if out.size > 1 else out
    return build, arrays


def _block(reg: ParamRegistry, fn, inputs, rng):
    """Scalar builder over ``inputs`` followed by every parameter in ``reg``."""
    paths = reg.paths()
    arrays = list(inputs) + [reg[p].data.copy() for p in paths]
    n_in = len(inputs)

    def call(*ts):
        with reg.bound(dict(zip(paths, ts[n_in:]))):
            return fn(*ts[:n_in])
    return _reduce(call, arrays, rng)


def _reg(seed: int = 0) -> ParamRegistry:
    return ParamRegistry(np.float64, seed=seed)


# ---------------------------------------------------------------- op-kinds

@suite("add")
def _(rng):
    return _reduce(ops.add, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], rng)


@suite("add_scalar")
def _(rng):
    return _reduce(ops.add, [rng.standard_normal((3, 4)), rng.standard_normal(())], rng)


@suite("sub")
def _(rng):
    return _reduce(ops.sub, [rng.standard_normal((2, 5)), rng.standard_normal((1,))], rng)


@suite("mul")
def _(rng):
    return _reduce(ops.mul, [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], rng)


@suite("div")
def _(rng):
    return _reduce(ops.div, [rng.standard_normal((3, 4)), rng.uniform(0.5, 2.0, (3, 4))], rng)


@suite("scalar_mul")
def _(rng):
    return _reduce(lambda x: ops.scalar_mul(x, -1.7), [rng.standard_normal((4, 3))], rng)


@suite("gelu")
def _(rng):
    return _reduce(ops.gelu, [rng.standard_normal((5, 4)) * 2], rng)


@suite("softplus")
def _(rng):
    return _reduce(ops.softplus, [rng.standard_normal((5, 4)) * 3], rng)


@suite("softmax")
def _(rng):
    return _reduce(ops.softmax, [rng.standard_normal((2, 3, 5))], rng)


@suite("sum")
def _(rng):
    return _reduce(ops.sum_all, [rng.standard_normal((3, 4))], rng)


@suite("mean")
def _(rng):
    return _reduce(ops.mean_all, [rng.standard_normal((3, 4))], rng)


@suite("l1_sum")
def _(rng):
    # keep entries away from the kink at zero
    x = rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1.0, 1.0], (3, 4))
    return _reduce(ops.l1_sum, [x], rng)


@suite("mean_pool")
def _(rng):
    return _reduce(ops.mean_pool, [rng.standard_normal((2, 3, 4, 5))], rng)


@suite("l2_norm")
def _(rng):
    return _reduce(lambda x: ops.l2_norm(x, axes=(-2, -1)), [rng.standard_normal((2, 3, 4))], rng)


@suite("normalize")
def _(rng):
    return _reduce(lambda x: ops.normalize(x, axes=(-1,)), [rng.standard_normal((2, 3, 5))], rng)


@suite("layer_norm")
def _(rng):
    arrays = [rng.standard_normal((2, 4, 3, 3)), 1 + 0.3 * rng.standard_normal(4), rng.standard_normal(4)]
    return _reduce(lambda x, g, b: ops.layer_norm(x, g, b, axis=1), arrays, rng)


@suite("reshape")
def _(rng):
    return _reduce(lambda x: ops.reshape(x, (4, 6)), [rng.standard_normal((2, 3, 4))], rng)


@suite("transpose")
def _(rng):
    return _reduce(lambda x: ops.transpose(x, (2, 0, 1)), [rng.standard_normal((2, 3, 4))], rng)


@suite("concat")
def _(rng):
    arrays = [rng.standard_normal((2, 1, 3)), rng.standard_normal((2, 3, 3))]
    return _reduce(lambda a, b: ops.concat([a, b], axis=1), arrays, rng)


@suite("split")
def _(rng):
    def fn(x):
        a, b = ops.split(x, [2, 3], axis=1)
        return ops.concat([ops.scalar_mul(a, 2.0), ops.gelu(b)], axis=1)
    return _reduce(fn, [rng.standard_normal((2, 5, 3))], rng)


@suite("pad")
def _(rng):
    return _reduce(lambda x: ops.pad(x, 2), [rng.standard_normal((1, 2, 4, 5))], rng)


@suite("matmul")
def _(rng):
    return _reduce(ops.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))], rng)


@suite("matmul_shared")
def _(rng):
    return _reduce(ops.matmul, [rng.standard_normal((4, 3)), rng.standard_normal((2, 2, 3, 5))], rng)


@suite("batched_matmul")
def _(rng):
    return _reduce(ops.batched_matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))], rng)


@suite("linear")
def _(rng):
    arrays = [rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)]
    return _reduce(ops.linear, arrays, rng)


@suite("modulate")
def _(rng):
    arrays = [rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3)), rng.standard_normal((2, 3))]
    return _reduce(ops.modulate, arrays, rng)


@suite("conv2d_pointwise")
def _(rng):
    arrays = [rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((4, 3, 1, 1)), rng.standard_normal(4)]
    return _reduce(ops.conv2d, arrays, rng)


@suite("conv2d_dense")
def _(rng):
    arrays = [rng.standard_normal((2, 2, 5, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)]
    return _reduce(ops.conv2d, arrays, rng)


@suite("conv2d_strided")
def _(rng):
    arrays = [rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(3)]
    return _reduce(lambda x, w, b: ops.conv2d(x, w, b, stride=2), arrays, rng)


@suite("conv2d_depthwise")
def _(rng):
    arrays = [rng.standard_normal((2, 3, 5, 6)), rng.standard_normal((3, 1, 3, 3)), rng.standard_normal(3)]
    return _reduce(lambda x, w, b: ops.conv2d(x, w, b, groups=3), arrays, rng)


@suite("conv_transpose2d")
def _(rng):
    arrays = [rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((3, 2, 2, 2)), rng.standard_normal(2)]
    return _reduce(ops.conv_transpose2d, arrays, rng)


# which suites exercise each registered op-kind directly
OP_COVERAGE = {
    "add": ("add", "add_scalar"), "sub": ("sub",), "mul": ("mul",), "div": ("div",),
    "scalar_mul": ("scalar_mul",), "gelu": ("gelu",), "softplus": ("softplus",),
    "softmax": ("softmax",), "sum": ("sum",), "mean": ("mean",), "l1_sum": ("l1_sum",),
    "mean_pool": ("mean_pool",), "l2_norm": ("l2_norm",), "normalize": ("normalize",),
    "layer_norm": ("layer_norm",), "reshape": ("reshape",), "transpose": ("transpose",),
    "concat": ("concat",), "split": ("split",), "pad": ("pad",),
    "matmul": ("matmul", "matmul_shared"), "batched_matmul": ("batched_matmul",),
    "linear": ("linear",), "modulate": ("modulate",),
    "conv2d": ("conv2d_pointwise", "conv2d_dense", "conv2d_strided", "conv2d_depthwise"),
    "conv_transpose2d": ("conv_transpose2d",),
}


# ---------------------------------------------------------------- blocks

@suite("seqmix", "block")
def _(rng):
    reg = _reg(1)
    blk = SeqMixBlock(reg, "mix", 2, hidden=4)
    return _block(reg, blk, [rng.standard_normal((2, 2, 5, 6))], rng)


@suite("dra", "block")
def _(rng):
    reg = _reg(2)
    blk = DRABlock(reg, "dra", 4)
    return _block(reg, blk, [rng.standard_normal((2, 4, 4, 4))], rng)


@suite("pdr", "block")
def _(rng):
    reg = _reg(3)
    blk = PDRBlock(reg, "pdr", 4, 3)
    return _block(reg, blk, [rng.standard_normal((2, 4, 4, 4)), rng.standard_normal((2, 3))], rng)


@suite("pi", "block")
def _(rng):
    reg = _reg(4)
    enc = PriorEncoder(reg, "pi", 3, 4, width=3, hidden=6)
    ims = [rng.uniform(0, 1, (2, 1, 8, 8)) for _ in range(3)]
    return _block(reg, lambda a, b, c: pi_encode(enc, a, b, c), ims, rng)


@suite("pi_prime", "block")
def _(rng):
    reg = _reg(5)
    enc = PriorEncoder(reg, "pi_prime", 2, 4, width=3, hidden=6)
    ims = [rng.uniform(0, 1, (2, 1, 8, 8)) for _ in range(2)]
    return _block(reg, lambda a, b: pi_prime_encode(enc, a, b), ims, rng)


@suite("denoiser", "block")
def _(rng):
    reg = _reg(6)
    den = Denoiser(reg, "den", 4, hidden=8)
    return _block(reg, lambda pt, pc: den(pt, pc, 2), [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], rng)


@suite("mgda_decomposed", "block")
def _(rng):
    # the decomposed update, differentiated in x, W, M and the step size
    arrays = [rng.standard_normal((2, 4, 5)), rng.standard_normal((2, 4, 5)), rng.standard_normal(()),
              rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 5, 5))]
    return _reduce(lambda x, y, g, W, M: decomposed_step(x, y, g, W, M), arrays, rng)


@suite("mgda_holistic", "block")
def _(rng):
    reg = _reg(7)
    sd = SeqMixBlock(reg, "sd", 1, hidden=3)
    sdt = SeqMixBlock(reg, "sdt", 1, hidden=3)
    arrays = [rng.standard_normal((2, 1, 5, 4)), rng.standard_normal((2, 1, 5, 4)), rng.standard_normal(())]
    return _block(reg, lambda x, y, b: holistic_step(x, y, b, sd, sdt), arrays, rng)


@suite("factor_estimator", "block")
def _(rng):
    reg = _reg(8)
    est = FactorEstimator(reg, "est", 1, collapse=5, keep=4, hidden=3, transpose=False)
    arrays = [rng.standard_normal((2, 1, 5, 4)), rng.standard_normal((2, 1, 5, 4))]
    return _block(reg, est, arrays, rng)


@suite("ocformer", "block", max_entries=8, n_directions=2)
def _(rng):
    # base width 3: with two channels the layer norm output is rank one and
    # the Q/K weights of the top level get exactly zero gradient
    reg = _reg(9)
    net = OCFormer(reg, 1, 3, base=3, blocks=(1, 1, 1, 1), zero_out=False)
    arrays = [rng.uniform(0, 1, (1, 1, 8, 8)), rng.uniform(0, 1, (1, 1, 8, 8)), rng.standard_normal((1, 3))]
    return _block(reg, net, arrays, rng)


# ---------------------------------------------------------------- running

def run_suite(s: Suite, seed: int = 0) -> SuiteResult:
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    build, arrays = s.make(rng)
    try:
        errs = check_gradients(build, arrays, max_entries=s.max_entries,
                               n_directions=s.n_directions, seed=seed)
        worst = max(errs) if errs else 0.0
        if not np.isfinite(worst):
            worst = float("inf")
    except (FloatingPointError, ValueError, RuntimeError):
        worst = float("inf")
    return SuiteResult(s.name, s.group, float(worst), len(arrays), time.perf_counter() - t0, s.tol)


def run_suites(names=None, seed: int = 0) -> list[SuiteResult]:
    chosen = SUITES.values() if names is None else [SUITES[n] for n in names]
    with np.errstate(all="ignore"):
        return [run_suite(s, seed) for s in chosen]


def suites_for(kind: str) -> tuple[str, ...]:
    return OP_COVERAGE[kind]


@contextmanager
def sign_flip(kind: str):
    """Negate every gradient the backward rule of ``kind`` returns."""
    original = OPS[kind]

    def flipped(g, ctx):
        return tuple(None if x is None else -x for x in original.backward(g, ctx))

    OPS[kind] = OpDef(original.name, original.forward, flipped)
    try:
        yield
    finally:
        OPS[kind] = original

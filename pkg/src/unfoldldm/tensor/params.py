"""Parameter registry, Adam updates, cosine learning-rate schedule, checkpoints."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from unfoldldm.errors import CheckpointError, NonFiniteError
from unfoldldm.tensor.tensor import Tensor

CHECKPOINT_MAGIC = b"UFLDMCK\x01"
CHECKPOINT_VERSION = 1


class ParamRegistry:
    """Named trainable leaves, one entry per logical parameter.

    A module that runs at several unfolding stages looks up the same path at
    every stage, so all stages share one tensor and its gradient is the sum of
    the per-stage contributions.
    """

    def __init__(self, dtype=np.float32, seed: int = 0):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def items(self):
        return self._params.items()

    def paths(self, prefix: str = "") -> list[str]:
        return [p for p in self._params if p.startswith(prefix)]

    def add(self, path: str, value: np.ndarray) -> Tensor:
        if path in self._params:
            raise KeyError(f"parameter {path!r} registered twice")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[path] = t
        return t

    @contextmanager
    def bound(self, values: dict[str, Tensor]):
        """Serve the given tensors under existing paths for the duration of the block."""
        missing = [p for p in values if p not in self._params]
        if missing:
            raise KeyError(f"unknown parameter paths {missing}")
        saved = {p: self._params[p] for p in values}
        self._params.update(values)
        try:
            yield self
        finally:
            self._params.update(saved)

    def get_or_add(self, path: str, init) -> Tensor:
        """Return the tensor at ``path``, creating it from ``init(rng)`` if absent."""
        if path not in self._params:
            return self.add(path, init(self.rng))
        return self._params[path]

    def freeze(self, prefixes: Iterable[str]):
        for pre in prefixes:
            self.frozen.update(self.paths(pre))

    def unfreeze_all(self):
        self.frozen.clear()

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {
            p: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for p, t in self._params.items()
        }

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over the raw bytes of every parameter under ``prefix``."""
        h = hashlib.sha256()
        for p in sorted(self.paths(prefix)):
            h.update(p.encode())
            h.update(np.ascontiguousarray(self._params[p].data).tobytes())
        return h.hexdigest()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self._params.items()}

    def restore(self, values: dict[str, np.ndarray]):
        for p, v in values.items():
            self._params[p].data = np.array(v, dtype=self.dtype)

    def num_values(self) -> int:
        return sum(t.size for t in self._params.values())


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(registry: ParamRegistry, grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update in place; frozen paths are skipped.

    Every gradient is screened first so a NaN/Inf aborts the whole step
    without touching any parameter.
    """
    for path, g in grads.items():
        if path in registry.frozen:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("gradient", path)

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for path, g in grads.items():
        if path in registry.frozen:
            continue
        p = registry[path]
        m = state.m.get(path)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.v[path]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[path], state.v[path] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(registry.dtype, copy=False)
    return registry


def cosine_lr(step: int, total_steps: int, lr_max: float = 2e-4, lr_min: float = 1e-6) -> float:
    """Cosine annealing from ``lr_max`` at step 0 to ``lr_min`` at the last step."""
    if total_steps <= 1:
        return lr_min
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * frac))


def save_checkpoint(path, registry: ParamRegistry, meta: dict | None = None):
    manifest = [[p, list(t.shape)] for p, t in registry.items()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "precision": "float64" if registry.dtype == np.float64 else "float32",
        "manifest": manifest,
        "frozen": sorted(registry.frozen),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    code = "<f8" if registry.dtype == np.float64 else "<f4"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p, _ in manifest:
            fh.write(np.ascontiguousarray(registry[p].data, dtype=code).tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    code = {"float64": "<f8", "float32": "<f4"}.get(header["precision"])
    if code is None:
        raise CheckpointError(f"{path}: unknown precision {header['precision']!r}")
    itemsize = np.dtype(code).itemsize
    offset = 12 + hlen
    values = {}
    for p, shape in header["manifest"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = raw[offset:offset + n * itemsize]
        if len(chunk) != n * itemsize:
            raise CheckpointError(f"{path}: truncated data for {p!r}")
        values[p] = np.frombuffer(chunk, dtype=code).reshape(shape)
        offset += n * itemsize
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, values


def load_checkpoint(path, registry: ParamRegistry) -> dict:
    """Copy checkpoint values into an already-built registry.

    The manifest must name exactly the registry's paths with the same shapes.
    Returns the header's ``meta`` block.
    """
    header, values = read_checkpoint(path)
    expected = {p: tuple(t.shape) for p, t in registry.items()}
    found = {p: tuple(v.shape) for p, v in values.items()}
    missing = sorted(set(expected) - set(found))
    extra = sorted(set(found) - set(expected))
    if missing or extra:
        raise CheckpointError(f"manifest mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    bad = [p for p in expected if expected[p] != found[p]]
    if bad:
        raise CheckpointError(
            "shape mismatch for " + ", ".join(f"{p}: {found[p]} != {expected[p]}" for p in bad[:5])
        )
    registry.restore(values)
    registry.frozen = set(header.get("frozen", []))
    return header.get("meta", {})

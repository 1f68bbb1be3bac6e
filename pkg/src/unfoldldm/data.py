"""Bundled clean images and paired synthetic datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from unfoldldm.degradation import SyntheticDegradation, synthesize
from unfoldldm.imageio import read_image, write_image

PHOTOS = ("camera", "coins", "moon", "text", "page", "grass", "brick", "gravel",
          "astronaut", "coffee", "chelsea", "rocket")
TEXTURES = ("checkerboard", "gradient", "value_noise", "stripes", "shapes")


def _photo(name: str) -> np.ndarray:
    import skimage.data

    img = getattr(skimage.data, name)().astype(np.float64) / 255.0
    if img.ndim == 2:
        img = img[None]
    else:
        img = np.moveaxis(img[..., :3], -1, 0)
    return img


def _to_channels(img: np.ndarray, channels: int) -> np.ndarray:
    if img.shape[0] == channels:
        return img
    if channels == 1:
        return img.mean(axis=0, keepdims=True)
    return np.repeat(img[:1], channels, axis=0)


def photo_crop(rng, size: int, channels: int) -> np.ndarray:
    img = _photo(PHOTOS[rng.integers(len(PHOTOS))])
    scale = rng.uniform(0.25, 0.6)
    img = zoom(img, (1, scale, scale), order=1)
    h, w = img.shape[1:]
    i = rng.integers(0, h - size + 1)
    j = rng.integers(0, w - size + 1)
    return np.clip(_to_channels(img[:, i:i + size, j:j + size], channels), 0, 1)


def texture(kind: str, rng, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    if kind == "checkerboard":
        cell = rng.integers(3, 9)
        base = ((np.arange(size)[:, None] // cell + np.arange(size)[None, :] // cell) % 2).astype(float)
        lo, hi = sorted(rng.uniform(0.1, 0.9, 2))
        img = lo + (hi - lo) * base
    elif kind == "gradient":
        a = rng.uniform(0, 2 * np.pi)
        img = 0.5 + 0.45 * ((np.cos(a) * xx + np.sin(a) * yy) - 0.5)
    elif kind == "value_noise":
        img = np.zeros((size, size))
        amp = 0.5
        for cells in (4, 8, 16):
            grid = rng.random((cells + 1, cells + 1))
            img += amp * zoom(grid, size / (cells + 1), order=3)[:size, :size]
            amp *= 0.5
        img = (img - img.min()) / max(img.max() - img.min(), 1e-9)
    elif kind == "stripes":
        f = rng.uniform(2, 6)
        a = rng.uniform(0, np.pi)
        img = 0.5 + 0.4 * np.sin(2 * np.pi * f * (np.cos(a) * xx + np.sin(a) * yy))
    elif kind == "shapes":
        img = np.full((size, size), rng.uniform(0.1, 0.4))
        for _ in range(rng.integers(2, 6)):
            cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.1, 0.3)
            if rng.random() < 0.5:
                mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            else:
                mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * 0.7)
            img[mask] = rng.uniform(0.3, 1.0)
    else:
        raise ValueError(f"unknown texture {kind!r}")
    img = np.clip(img, 0, 1)[None]
    return np.repeat(img, channels, axis=0)


def clean_images(n: int, size: int = 32, channels: int = 1, seed: int = 0,
                 photo_fraction: float = 0.6) -> np.ndarray:
    """``n`` clean images, a mix of photo crops and procedural textures."""
    rng = np.random.default_rng(seed)
    out = np.empty((n, channels, size, size))
    for i in range(n):
        if rng.random() < photo_fraction:
            out[i] = photo_crop(rng, size, channels)
        else:
            out[i] = texture(TEXTURES[rng.integers(len(TEXTURES))], rng, size, channels)
    return out


def draw_degradation(menu: list[dict], rng) -> SyntheticDegradation:
    entry = dict(menu[rng.integers(len(menu))])
    entry["seed"] = int(rng.integers(2**31 - 1))
    return SyntheticDegradation(**entry)


@dataclass
class PairSet:
    """Aligned clean/degraded stacks plus the recipe used for every pair."""

    clean: np.ndarray
    degraded: np.ndarray
    specs: list[SyntheticDegradation]

    def __len__(self) -> int:
        return len(self.clean)

    def batch(self, rng, n: int):
        idx = rng.integers(0, len(self), size=n)
        return self.degraded[idx], self.clean[idx]


def make_pairs(n: int, menu: list[dict], size: int = 32, channels: int = 1, seed: int = 0) -> PairSet:
    clean = clean_images(n, size, channels, seed)
    rng = np.random.default_rng([seed, 7])
    specs = [draw_degradation(menu, rng) for _ in range(n)]
    degraded = np.stack([synthesize(c, s) for c, s in zip(clean, specs)])
    return PairSet(clean, degraded, specs)


class SyntheticSource:
    """Fresh degradations drawn per sample from a menu over fixed clean images."""

    def __init__(self, clean: np.ndarray, menu: list[dict], seed: int = 0):
        self.clean = clean
        self.menu = menu
        self.rng = np.random.default_rng(seed)

    def batch(self, rng, n: int):
        idx = rng.integers(0, len(self.clean), size=n)
        gt = self.clean[idx]
        y = np.stack([synthesize(c, draw_degradation(self.menu, rng)) for c in gt])
        return y, gt


def save_pairs(pairs: PairSet, directory, fmt: str = "png") -> Path:
    """Write ``clean/``, ``degraded/`` and ``manifest.json`` under ``directory``."""
    d = Path(directory)
    (d / "clean").mkdir(parents=True, exist_ok=True)
    (d / "degraded").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (c, y, s) in enumerate(zip(pairs.clean, pairs.degraded, pairs.specs)):
        name = f"{i:05d}.{fmt}"
        write_image(d / "clean" / name, c)
        write_image(d / "degraded" / name, y)
        entries.append({"name": name, "spec": s.to_dict()})
    manifest = {"count": len(entries), "pairs": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def load_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def load_pairs(directory) -> PairSet:
    d = Path(directory)
    manifest = load_manifest(d)
    clean = np.stack([read_image(d / "clean" / e["name"]) for e in manifest["pairs"]])
    degraded = np.stack([read_image(d / "degraded" / e["name"]) for e in manifest["pairs"]])
    specs = [SyntheticDegradation.from_dict(e["spec"]) for e in manifest["pairs"]]
    return PairSet(clean, degraded, specs)

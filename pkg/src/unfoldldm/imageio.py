"""Image files <-> ``c x h x w`` float arrays in [0, 1].

PNG goes through Pillow (8-bit). PGM/PPM are handled here in both the ASCII
(P2/P3) and binary (P5/P6) variants, 8- or 16-bit.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

PNM_SUFFIXES = (".pgm", ".ppm", ".pnm")


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _pnm_tokens(raw: bytes):
    """Header tokens of a PNM file and the offset right after the last one."""
    tokens, i = [], 2
    tokens.append(raw[:2].decode("ascii"))
    while len(tokens) < 4:
        while raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while raw[i:i + 1] not in (b"\n", b"\r", b""):
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        tokens.append(raw[i:j].decode("ascii"))
        i = j
    return tokens, i + 1


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic = raw[:2].decode("ascii", "replace")
    if magic not in ("P2", "P3", "P5", "P6"):
        raise ValueError(f"{path}: unsupported PNM magic {magic!r}")
    (magic, w, h, maxval), offset = _pnm_tokens(raw)
    w, h, maxval = int(w), int(h), int(maxval)
    c = 3 if magic in ("P3", "P6") else 1
    n = w * h * c
    if magic in ("P2", "P3"):
        vals = np.array(raw[offset:].split()[:n], dtype=np.float64)
    else:
        dt = ">u2" if maxval > 255 else "u1"
        vals = np.frombuffer(raw[offset:], dtype=dt, count=n).astype(np.float64)
    if vals.size != n:
        raise ValueError(f"{path}: expected {n} samples, found {vals.size}")
    return np.moveaxis(vals.reshape(h, w, c), -1, 0) / maxval


def write_pnm(path, img: np.ndarray, ascii: bool = False):
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {c}")
    data = to_uint8(np.moveaxis(img, 0, -1))
    magic = {(1, True): "P2", (3, True): "P3", (1, False): "P5", (3, False): "P6"}[(c, ascii)]
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    if ascii:
        rows = [" ".join(str(v) for v in row.reshape(-1)) for row in data]
        body = ("\n".join(rows) + "\n").encode("ascii")
    else:
        body = data.tobytes()
    Path(path).write_bytes(header + body)


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() in PNM_SUFFIXES:
        return read_pnm(path)
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)


def write_image(path, img: np.ndarray, ascii: bool = False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() in PNM_SUFFIXES:
        return write_pnm(path, img, ascii=ascii)
    data = to_uint8(img)
    pil = Image.fromarray(data[0] if data.shape[0] == 1 else np.moveaxis(data, 0, -1))
    pil.save(path)

"""Procedural backgrounds, sprite scaling, and alpha compositing.

All images are float64 arrays in [0, 1]; masks are boolean arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CHECKER_CELL = 8
BG_KINDS = ("solid", "gradient", "checker")


def parse_color(text: str) -> np.ndarray:
    """'#rrggbb' -> float RGB in [0, 1]."""
    if not (text.startswith("#") and len(text) == 7):
        raise ValueError(f"bad color literal: {text!r}")
    try:
        vals = [int(text[i : i + 2], 16) for i in (1, 3, 5)]
    except ValueError as exc:
        raise ValueError(f"bad color literal: {text!r}") from exc
    return np.array(vals, dtype=np.float64) / 255.0


def color_hex(rgb: np.ndarray) -> str:
    vals = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(int)
    return "#{:02x}{:02x}{:02x}".format(*vals)


@dataclass(frozen=True)
class Background:
    """solid(c) | gradient(top, bottom) | checker(a, b)."""

    kind: str
    colors: tuple  # tuple of float RGB arrays (as tuples for hashability)

    def __post_init__(self):
        if self.kind not in BG_KINDS:
            raise ValueError(f"unknown background kind: {self.kind!r}")
        need = 1 if self.kind == "solid" else 2
        if len(self.colors) != need:
            raise ValueError(f"{self.kind} background needs {need} colors, got {len(self.colors)}")

    def render(self, size: int) -> np.ndarray:
        c = [np.asarray(col, dtype=np.float64) for col in self.colors]
        if self.kind == "solid":
            return np.broadcast_to(c[0], (size, size, 3)).copy()
        if self.kind == "gradient":
            t = np.arange(size, dtype=np.float64) / max(size - 1, 1)
            rows = c[0][None, :] * (1.0 - t[:, None]) + c[1][None, :] * t[:, None]
            return np.broadcast_to(rows[:, None, :], (size, size, 3)).copy()
        r = np.arange(size) // CHECKER_CELL
        parity = (r[:, None] + r[None, :]) % 2
        out = np.where(parity[..., None] == 0, c[0], c[1])
        return out.astype(np.float64)


def random_background(rng: np.random.Generator) -> Background:
    kind = BG_KINDS[int(rng.integers(len(BG_KINDS)))]
    n = 1 if kind == "solid" else 2
    colors = tuple(tuple(rng.uniform(0.0, 1.0, size=3)) for _ in range(n))
    return Background(kind=kind, colors=colors)


def scale_sprite_nearest(rgba: np.ndarray, th: int, tw: int) -> np.ndarray:
    """Nearest-neighbor resize of an RGBA sprite to (th, tw)."""
    sh, sw = rgba.shape[:2]
    ri = (np.arange(th) * sh // th).clip(0, sh - 1)
    ci = (np.arange(tw) * sw // tw).clip(0, sw - 1)
    return rgba[ri[:, None], ci[None, :]]


def composite(image: np.ndarray, rgba: np.ndarray, top: int, left: int):
    """Alpha-composite a sprite onto a copy of image; returns (image, mask)."""
    out = image.copy()
    size = image.shape[0]
    sh, sw = rgba.shape[:2]
    if top < 0 or left < 0 or top + sh > size or left + sw > size:
        raise ValueError(f"sprite box ({top},{left})+{(sh, sw)} outside {size}x{size} frame")
    alpha = rgba[..., 3] > 0.5
    region = out[top : top + sh, left : left + sw]
    region[alpha] = rgba[..., :3][alpha]
    mask = np.zeros((size, size), dtype=bool)
    mask[top : top + sh, left : left + sw] = alpha
    return out, mask


def trim_to_alpha(rgba: np.ndarray) -> np.ndarray:
    """Crop an RGBA sprite to the bounding box of its opaque pixels."""
    opaque = rgba[..., 3] > 0.5
    rows = np.nonzero(opaque.any(axis=1))[0]
    cols = np.nonzero(opaque.any(axis=0))[0]
    if len(rows) == 0:
        raise ValueError("sprite has no opaque pixels")
    return rgba[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]


def fit_sprite_to_box(rgba: np.ndarray, bh: int, bw: int) -> np.ndarray:
    """Aspect-preserving nearest-neighbor scale into a bh x bw box."""
    sh, sw = rgba.shape[:2]
    k = min(bh / sh, bw / sw)
    th = max(1, int(round(sh * k)))
    tw = max(1, int(round(sw * k)))
    th, tw = min(th, bh), min(tw, bw)
    return scale_sprite_nearest(rgba, th, tw)

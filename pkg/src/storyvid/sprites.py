"""Procedural 16x16 RGBA sprite family (binary alpha).

Eight "family" subjects are used to pretrain the base model; `crab` is held
out for customization experiments.
"""

from __future__ import annotations

import numpy as np

SPRITE_SIZE = 16


def _canvas():
    return np.zeros((SPRITE_SIZE, SPRITE_SIZE, 4), dtype=np.float64)


def _paint(canvas, mask, color):
    canvas[..., :3][mask] = np.asarray(color, dtype=np.float64)
    canvas[..., 3][mask] = 1.0


def _grid():
    r = np.arange(SPRITE_SIZE)
    return np.meshgrid(r, r, indexing="ij")


def _blob():
    c = _canvas()
    y, x = _grid()
    body = (y - 8) ** 2 + (x - 8) ** 2 <= 36
    _paint(c, body, (0.24, 0.78, 0.31))
    eyes = np.zeros_like(body)
    eyes[6, 6] = eyes[6, 10] = True
    _paint(c, eyes & body, (0.05, 0.05, 0.05))
    return c


def _boxy():
    c = _canvas()
    y, x = _grid()
    body = (y >= 2) & (y <= 13) & (x >= 2) & (x <= 13)
    _paint(c, body, (0.95, 0.55, 0.12))
    border = body & ((y == 2) | (y == 13) | (x == 2) | (x == 13))
    _paint(c, border, (0.55, 0.28, 0.04))
    return c


def _ring():
    c = _canvas()
    y, x = _grid()
    d2 = (y - 8) ** 2 + (x - 8) ** 2
    _paint(c, (d2 <= 42) & (d2 >= 12), (0.18, 0.42, 0.93))
    return c


def _cross():
    c = _canvas()
    y, x = _grid()
    body = ((x >= 6) & (x <= 9) & (y >= 1) & (y <= 14)) | (
        (y >= 6) & (y <= 9) & (x >= 1) & (x <= 14)
    )
    _paint(c, body, (0.88, 0.15, 0.18))
    return c


def _heart():
    c = _canvas()
    y, x = _grid()
    left = (y - 5) ** 2 + (x - 5) ** 2 <= 12
    right = (y - 5) ** 2 + (x - 10) ** 2 <= 12
    tip = (y >= 6) & (y <= 14) & (np.abs(x - 7.5) <= (14 - y) * 0.8)
    _paint(c, left | right | tip, (0.96, 0.35, 0.62))
    return c


def _arrow():
    c = _canvas()
    y, x = _grid()
    shaft = (y >= 6) & (y <= 9) & (x >= 1) & (x <= 9)
    head = (x >= 9) & (x <= 14) & (np.abs(y - 7.5) <= (14 - x))
    _paint(c, shaft | head, (0.93, 0.84, 0.12))
    return c


def _tree():
    c = _canvas()
    y, x = _grid()
    trunk = (y >= 10) & (y <= 14) & (x >= 6) & (x <= 9)
    canopy = (y >= 1) & (y <= 10) & (np.abs(x - 7.5) <= 1.0 + (y - 1) * 0.6)
    _paint(c, trunk, (0.47, 0.30, 0.14))
    _paint(c, canopy, (0.12, 0.58, 0.22))
    return c


def _rocket():
    c = _canvas()
    y, x = _grid()
    body = (x >= 5) & (x <= 10) & (y >= 4) & (y <= 12)
    tip = (y >= 1) & (y <= 4) & (np.abs(x - 7.5) <= (y - 0.5))
    fins = (y >= 11) & (y <= 14) & (((x >= 3) & (x <= 5)) | ((x >= 10) & (x <= 12)))
    _paint(c, body, (0.72, 0.74, 0.78))
    _paint(c, tip, (0.85, 0.16, 0.12))
    _paint(c, fins, (0.85, 0.16, 0.12))
    window = (y - 7) ** 2 + (x - 7.5) ** 2 <= 2.5
    _paint(c, window & body, (0.25, 0.60, 0.92))
    return c


def _crab():
    c = _canvas()
    y, x = _grid()
    body = ((y - 9) / 4.0) ** 2 + ((x - 8) / 6.0) ** 2 <= 1.0
    claws = ((y - 4) ** 2 + (x - 2) ** 2 <= 4) | ((y - 4) ** 2 + (x - 13) ** 2 <= 4)
    _paint(c, body | claws, (0.90, 0.22, 0.10))
    eyes = np.zeros_like(body)
    eyes[7, 6] = eyes[7, 10] = True
    _paint(c, eyes & body, (0.98, 0.95, 0.90))
    return c


def _generic():
    # neutral gray disc used as the renderer's placeholder subject
    c = _canvas()
    y, x = _grid()
    _paint(c, (y - 8) ** 2 + (x - 8) ** 2 <= 40, (0.45, 0.45, 0.48))
    return c


_BUILDERS = {
    "blob": _blob,
    "boxy": _boxy,
    "ring": _ring,
    "cross": _cross,
    "heart": _heart,
    "arrow": _arrow,
    "tree": _tree,
    "rocket": _rocket,
    "crab": _crab,
}

FAMILY_SUBJECTS = ("blob", "boxy", "ring", "cross", "heart", "arrow", "tree", "rocket")
HELDOUT_SUBJECT = "crab"


def sprite(name: str) -> np.ndarray:
    """Canonical RGBA sprite for a named subject (or 'generic')."""
    if name == "generic":
        return _generic()
    if name not in _BUILDERS:
        raise KeyError(f"unknown sprite: {name!r}")
    return _BUILDERS[name]()


def all_subjects() -> list[str]:
    return list(_BUILDERS)

"""Reference image/video metrics: PSNR, SSIM, temporal consistency,
subject fidelity.  All computed from scratch on 8-bit-range arrays.

SSIM uses non-overlapping 8x8 windows (reflect-padded when extents do not
divide) with C1=(0.01*255)^2, C2=(0.03*255)^2, for exact arithmetic on
small frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .render import fit_sprite_to_box, trim_to_alpha

SSIM_WINDOW = 8
C1 = (0.01 * 255.0) ** 2
C2 = (0.03 * 255.0) ** 2

SCHEMA_VERSION = 1


def _to_255(a: np.ndarray) -> np.ndarray:
    """Accept uint8 arrays or floats in [0, 1]; return float64 in [0, 255]."""
    a = np.asarray(a)
    if a.dtype == np.uint8:
        return a.astype(np.float64)
    a = a.astype(np.float64)
    if a.size and a.max() <= 1.0:
        return a * 255.0
    return a


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 255.0) -> float:
    """10*log10(peak^2 / MSE); +inf when the images are identical."""
    a, b = _to_255(a), _to_255(b)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def _pad_reflect(img: np.ndarray, window: int) -> np.ndarray:
    h, w = img.shape[:2]
    ph = (-h) % window
    pw = (-w) % window
    if ph == 0 and pw == 0:
        return img
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2)
    return np.pad(img, pad, mode="reflect")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over non-overlapping windows, in [-1, 1]."""
    a, b = _to_255(a), _to_255(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    a = _pad_reflect(a, SSIM_WINDOW)
    b = _pad_reflect(b, SSIM_WINDOW)
    h, w, c = a.shape
    nh, nw = h // SSIM_WINDOW, w // SSIM_WINDOW
    aw = a.reshape(nh, SSIM_WINDOW, nw, SSIM_WINDOW, c).transpose(0, 2, 4, 1, 3)
    bw = b.reshape(nh, SSIM_WINDOW, nw, SSIM_WINDOW, c).transpose(0, 2, 4, 1, 3)
    aw = aw.reshape(-1, SSIM_WINDOW * SSIM_WINDOW)
    bw = bw.reshape(-1, SSIM_WINDOW * SSIM_WINDOW)
    mu_a = aw.mean(axis=1)
    mu_b = bw.mean(axis=1)
    var_a = aw.var(axis=1)
    var_b = bw.var(axis=1)
    cov = ((aw - mu_a[:, None]) * (bw - mu_b[:, None])).mean(axis=1)
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a**2 + mu_b**2 + C1) * (var_a + var_b + C2)
    return float(np.mean(num / den))


def temporal_consistency(video: np.ndarray) -> float:
    """Mean SSIM over adjacent frame pairs; requires at least two frames."""
    video = np.asarray(video)
    if video.shape[0] < 2:
        raise ValueError("temporal_consistency needs at least 2 frames")
    vals = [ssim(video[f], video[f + 1]) for f in range(video.shape[0] - 1)]
    return float(np.mean(vals))


def subject_fidelity(video: np.ndarray, masks: np.ndarray, sprite_rgba: np.ndarray) -> float:
    """How sprite-like the masked region looks, per frame, averaged.

    For each frame: crop the mask's bounding box, build a reference by
    alpha-compositing the (box-fitted) sprite over that crop, and take SSIM
    between crop and reference.  The sprite is first trimmed to its own
    alpha bounding box so transparent canvas margins do not distort the
    fit against tight segmentation masks.  Empty-mask frames are skipped.
    """
    import logging

    log = logging.getLogger(__name__)
    video = np.asarray(video)
    masks = np.asarray(masks, dtype=bool)
    sprite_rgba = trim_to_alpha(sprite_rgba)
    vals = []
    for f in range(video.shape[0]):
        mask = masks[f]
        if not mask.any():
            log.warning("subject_fidelity: frame %d mask empty, skipped", f)
            continue
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        r0, r1 = int(rows[0]), int(rows[-1]) + 1
        c0, c1 = int(cols[0]), int(cols[-1]) + 1
        crop = np.asarray(video[f][r0:r1, c0:c1], dtype=np.float64)
        scaled = fit_sprite_to_box(sprite_rgba, r1 - r0, c1 - c0)
        th, tw = scaled.shape[:2]
        top = (r1 - r0 - th) // 2
        left = (c1 - c0 - tw) // 2
        ref = crop.copy()
        alpha = scaled[..., 3] > 0.5
        region = ref[top : top + th, left : left + tw]
        region[alpha] = scaled[..., :3][alpha]
        vals.append(ssim(crop, ref))
    if not vals:
        raise ValueError("subject_fidelity: all frames had empty masks")
    return float(np.mean(vals))


@dataclass
class MetricReport:
    """Per-shot and aggregate metric values with a config echo."""

    per_shot: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=lambda: {
        "ssim_window": SSIM_WINDOW, "c1": C1, "c2": C2, "psnr_peak": 255.0,
    })

    def aggregate(self) -> dict:
        if not self.per_shot:
            return {}
        keys = self.per_shot[0].keys()
        out = {}
        for key in keys:
            vals = [s[key] for s in self.per_shot]
            out[key] = float(np.mean(vals))
        return out

    def to_json(self) -> str:
        def enc(v):
            if isinstance(v, float) and np.isinf(v):
                return "inf"
            return v

        doc = {
            "schema_version": SCHEMA_VERSION,
            "config": self.config,
            "per_shot": [{k: enc(v) for k, v in s.items()} for s in self.per_shot],
            "aggregate": {k: enc(v) for k, v in self.aggregate().items()},
        }
        return json.dumps(doc, sort_keys=True)

"""Storyboard pipeline: scene DSL, renderer, segmentation, remove, redraw.

The generator is a procedural renderer over a closed DSL; segmentation fits
a background model from the 2-pixel border ring and thresholds residuals.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .render import (
    Background,
    composite,
    fit_sprite_to_box,
    parse_color,
    random_background,
    scale_sprite_nearest,
    trim_to_alpha,
)
from . import sprites

FRAME_SIZE = 32
RING_WIDTH = 2
SEG_TAU = 30.0 / 255.0      # per-channel max residual threshold
MIN_COMPONENT_AREA = 4

ACTIONS = ("move_left", "move_right", "move_up", "move_down", "bounce", "idle")

ACTION_WORDS = {
    "move_left": ("moves", "left"),
    "move_right": ("moves", "right"),
    "move_up": ("moves", "up"),
    "move_down": ("moves", "down"),
    "bounce": ("bounces",),
    "idle": ("idles",),
}


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{message} at {line}:{col}")
        self.line = line
        self.col = col


@dataclass(frozen=True)
class SceneSpec:
    background: Background
    center: tuple[int, int]     # (x, y)
    size: int
    action: str
    speed: int
    text: str

    def positions(self, frames: int) -> list[tuple[int, int]]:
        """Per-frame subject center (x, y) under the action."""
        x0, y0 = self.center
        out = []
        for f in range(frames):
            dx = dy = 0
            if self.action == "move_left":
                dx = -self.speed * f
            elif self.action == "move_right":
                dx = self.speed * f
            elif self.action == "move_up":
                dy = -self.speed * f
            elif self.action == "move_down":
                dy = self.speed * f
            elif self.action == "bounce":
                dy = -self.speed * min(f, frames - 1 - f)
            out.append((x0 + dx, y0 + dy))
        return out

    def prompt_tokens(self, subject_word: str) -> list[str]:
        return ["a", subject_word, *ACTION_WORDS[self.action], "on", "a",
                self.background.kind, "background"]

    def to_dsl(self) -> str:
        from .render import color_hex

        cols = ", ".join(color_hex(c) for c in self.background.colors)
        return (
            f"shot {{ bg: {self.background.kind}({cols}); "
            f"subj: <subject> at ({self.center[0]},{self.center[1]}) size {self.size}; "
            f"act: {self.action} speed {self.speed}; "
            f'text: "{self.text}" }}'
        )


def validate_spec(spec: SceneSpec, frames: int = 8, line: int = 1, col: int = 1):
    if spec.action not in ACTIONS:
        raise ParseError(f"unknown action {spec.action!r}", line, col)
    if spec.size < 4 or spec.size > FRAME_SIZE:
        raise ParseError(f"size {spec.size} out of range [4, {FRAME_SIZE}]", line, col)
    half = spec.size // 2
    for x, y in spec.positions(frames):
        top, left = y - half, x - half
        if top < 0 or left < 0 or top + spec.size > FRAME_SIZE or left + spec.size > FRAME_SIZE:
            raise ParseError(
                f"subject leaves the {FRAME_SIZE}x{FRAME_SIZE} frame during {spec.action!r}",
                line, col,
            )


# ---------------------------------------------------------------------------
# DSL parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<color>\#[0-9a-fA-F]{6})
  | (?P<int>-?\d+)
  | (?P<placeholder><[A-Za-z_][A-Za-z0-9_]*>)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>"[^"\n]*")
  | (?P<punct>[{}();:,])
    """,
    re.VERBOSE,
)


class _Lexer:
    def __init__(self, text: str):
        self.tokens: list[tuple[str, str, int, int]] = []
        line, col = 1, 1
        pos = 0
        while pos < len(text):
            m = _TOKEN_RE.match(text, pos)
            if m is None:
                raise ParseError(f"unexpected character {text[pos]!r}", line, col)
            kind = m.lastgroup
            value = m.group()
            if kind != "ws":
                self.tokens.append((kind, value, line, col))
            nl = value.count("\n")
            if nl:
                line += nl
                col = len(value) - value.rfind("\n")
            else:
                col += len(value)
            pos = m.end()
        self.eof = ("eof", "", line, col)
        self.i = 0

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else self.eof

    def next(self):
        tok = self.peek()
        self.i += 1
        return tok


def _expect(lx: _Lexer, value: str, what: str | None = None):
    kind, val, line, col = lx.next()
    if val != value:
        want = what or f"'{value}'"
        got = repr(val) if val else "end of input"
        raise ParseError(f"expected {want}, got {got}", line, col)
    return kind, val, line, col


def _expect_kind(lx: _Lexer, kind: str, what: str):
    k, val, line, col = lx.next()
    if k != kind:
        got = repr(val) if val else "end of input"
        raise ParseError(f"expected {what}, got {got}", line, col)
    return val, line, col


def _parse_bg(lx: _Lexer) -> Background:
    name, line, col = _expect_kind(lx, "ident", "background kind")
    if name not in ("solid", "gradient", "checker"):
        raise ParseError(f"unknown background {name!r}", line, col)
    _expect(lx, "(")
    colors = [parse_color(_expect_kind(lx, "color", "color literal")[0])]
    while lx.peek()[1] == ",":
        lx.next()
        colors.append(parse_color(_expect_kind(lx, "color", "color literal")[0]))
    _expect(lx, ")")
    need = 1 if name == "solid" else 2
    if len(colors) != need:
        raise ParseError(f"{name} background needs {need} color(s), got {len(colors)}", line, col)
    return Background(kind=name, colors=tuple(tuple(c) for c in colors))


def _parse_shot(lx: _Lexer, frames: int) -> SceneSpec:
    kind, val, line, col = lx.next()
    if val != "shot":
        got = repr(val) if val else "end of input"
        raise ParseError(f"expected 'shot', got {got}" if val else "expected 'shot'", line, col)
    _expect(lx, "{")
    fields: dict[str, object] = {}
    shot_line, shot_col = line, col
    while True:
        name, line, col = _expect_kind(lx, "ident", "field name")
        if name not in ("bg", "subj", "act", "text"):
            raise ParseError(f"unknown field {name!r}", line, col)
        if name in fields:
            raise ParseError(f"duplicate field {name!r}", line, col)
        _expect(lx, ":")
        if name == "bg":
            fields["bg"] = _parse_bg(lx)
        elif name == "subj":
            ph, line, col = _expect_kind(lx, "placeholder", "subject placeholder")
            if ph != "<subject>":
                raise ParseError(f"expected '<subject>', got {ph!r}", line, col)
            _expect(lx, "at")
            _expect(lx, "(")
            x = int(_expect_kind(lx, "int", "x coordinate")[0])
            _expect(lx, ",")
            y = int(_expect_kind(lx, "int", "y coordinate")[0])
            _expect(lx, ")")
            _expect(lx, "size")
            s = int(_expect_kind(lx, "int", "size")[0])
            fields["subj"] = (x, y, s)
        elif name == "act":
            action, aline, acol = _expect_kind(lx, "ident", "action")
            if action not in ACTIONS:
                raise ParseError(f"unknown action {action!r}", aline, acol)
            speed = 1
            if lx.peek()[1] == "speed":
                lx.next()
                speed = int(_expect_kind(lx, "int", "speed")[0])
                if speed < 0:
                    raise ParseError(f"negative speed {speed}", aline, acol)
            fields["act"] = (action, speed)
        else:
            raw, _, _ = _expect_kind(lx, "string", "quoted text")
            fields["text"] = raw[1:-1]
        sep = lx.next()
        if sep[1] == ";":
            if lx.peek()[1] == "}":
                lx.next()
                break
            continue
        if sep[1] == "}":
            break
        raise ParseError(f"expected ';' or '}}', got {sep[1]!r}", sep[2], sep[3])
    for required in ("bg", "subj", "act", "text"):
        if required not in fields:
            raise ParseError(f"missing field {required!r}", shot_line, shot_col)
    x, y, s = fields["subj"]
    action, speed = fields["act"]
    spec = SceneSpec(
        background=fields["bg"],
        center=(x, y),
        size=s,
        action=action,
        speed=speed,
        text=fields["text"],
    )
    validate_spec(spec, frames=frames, line=shot_line, col=shot_col)
    return spec


def parse_scene(text: str, frames: int = 8) -> SceneSpec:
    """Parse exactly one shot block."""
    lx = _Lexer(text)
    spec = _parse_shot(lx, frames)
    tok = lx.peek()
    if tok[0] != "eof":
        raise ParseError(f"trailing input {tok[1]!r}", tok[2], tok[3])
    return spec


def parse_storyboard(text: str, frames: int = 8) -> list[SceneSpec]:
    """Parse one or more shot blocks."""
    lx = _Lexer(text)
    specs = [_parse_shot(lx, frames)]
    while lx.peek()[0] != "eof":
        specs.append(_parse_shot(lx, frames))
    return specs


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def render_scene(spec: SceneSpec, sprite_rgba: np.ndarray | None = None, frame: int = 0,
                 frames: int = 8):
    """Render one frame of a scene; returns (image, ground-truth mask)."""
    img = spec.background.render(FRAME_SIZE)
    if sprite_rgba is None:
        return img, np.zeros((FRAME_SIZE, FRAME_SIZE), dtype=bool)
    scaled = fit_sprite_to_box(sprite_rgba, spec.size, spec.size)
    x, y = spec.positions(frames)[frame]
    th, tw = scaled.shape[:2]
    top, left = y - spec.size // 2, x - spec.size // 2
    top += (spec.size - th) // 2
    left += (spec.size - tw) // 2
    return composite(img, scaled, top, left)


def render_clip(spec: SceneSpec, sprite_rgba: np.ndarray, frames: int = 8):
    """Render all frames; returns (video [F,S,S,3], masks [F,S,S])."""
    imgs, masks = [], []
    for f in range(frames):
        img, mask = render_scene(spec, sprite_rgba, frame=f, frames=frames)
        imgs.append(img)
        masks.append(mask)
    return np.stack(imgs), np.stack(masks)


# ---------------------------------------------------------------------------
# segmentation / removal / redraw
# ---------------------------------------------------------------------------

def _ring_mask(size: int, width: int = RING_WIDTH) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[:width, :] = m[-width:, :] = True
    m[:, :width] = m[:, -width:] = True
    return m


def fit_background(image: np.ndarray) -> np.ndarray:
    """Predict the full background from the border ring.

    Fits solid (median), vertical-gradient (per-channel linear in row), and
    checker (two-color lattice) models and keeps the best ring fit.
    """
    size = image.shape[0]
    ring = _ring_mask(size)
    rows, cols = np.nonzero(ring)
    ring_px = image[rows, cols]                       # [n, 3]

    candidates = []
    # solid
    med = np.median(ring_px, axis=0)
    candidates.append(np.broadcast_to(med, image.shape).copy())
    # vertical gradient: per-channel least squares in row index
    A = np.stack([np.ones_like(rows, dtype=np.float64), rows.astype(np.float64)], axis=1)
    coef, *_ = np.linalg.lstsq(A, ring_px, rcond=None)     # [2, 3]
    rr = np.arange(size, dtype=np.float64)
    grad = coef[0][None, :] + rr[:, None] * coef[1][None, :]
    candidates.append(np.broadcast_to(grad[:, None, :], image.shape).copy())
    # checker lattice
    from .render import CHECKER_CELL

    parity = ((rows // CHECKER_CELL) + (cols // CHECKER_CELL)) % 2
    cells = np.zeros((2, 3))
    for p in (0, 1):
        sel = ring_px[parity == p]
        cells[p] = np.median(sel, axis=0) if len(sel) else med
    pr = np.arange(size) // CHECKER_CELL
    full_parity = (pr[:, None] + pr[None, :]) % 2
    candidates.append(cells[full_parity])

    best, best_err = None, np.inf
    for pred in candidates:
        err = np.abs(pred[rows, cols] - ring_px).mean()
        if err < best_err:
            best, best_err = pred, err
    return best


def segment_subject(image: np.ndarray) -> np.ndarray:
    """Largest 8-connected residual component; all-False mask when none found.

    8-connectivity keeps diagonally attached appendages (thin legs,
    antennae) in the same component as the subject body.
    """
    pred = fit_background(image)
    resid = np.abs(image - pred).max(axis=-1)
    cand = resid > SEG_TAU
    labeled, n = ndimage.label(cand, structure=np.ones((3, 3), dtype=int))
    if n == 0:
        return np.zeros_like(cand)
    areas = ndimage.sum_labels(np.ones_like(labeled), labeled, index=np.arange(1, n + 1))
    best = int(np.argmax(areas)) + 1
    if areas[best - 1] < MIN_COMPONENT_AREA:
        return np.zeros_like(cand)
    return labeled == best


def remove_subject(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace masked pixels with the fitted background prediction."""
    if not mask.any():
        return image.copy()
    pred = fit_background(image)
    out = image.copy()
    out[mask] = pred[mask]
    return out


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def redraw(background: np.ndarray, mask: np.ndarray, sprite_rgba: np.ndarray) -> np.ndarray:
    """Composite the canonical sprite into the mask's bounding box."""
    if not mask.any():
        raise ValueError("redraw requires a nonempty mask")
    r0, c0, r1, c1 = mask_bbox(mask)
    # trim transparent canvas margin so the visible subject fills the bbox
    scaled = fit_sprite_to_box(trim_to_alpha(sprite_rgba), r1 - r0, c1 - c0)
    th, tw = scaled.shape[:2]
    top = r0 + (r1 - r0 - th) // 2
    left = c0 + (c1 - c0 - tw) // 2
    out, _ = composite(background, scaled, top, left)
    return out


# ---------------------------------------------------------------------------
# subject profiles and the full pipeline
# ---------------------------------------------------------------------------

@dataclass
class SubjectProfile:
    subject_id: str
    sprite: np.ndarray                       # RGBA [16,16,4], binary alpha
    reference_clips: list = field(default_factory=list)

    def __post_init__(self):
        alpha = self.sprite[..., 3]
        if not np.isin(alpha, (0.0, 1.0)).all():
            raise ValueError("sprite alpha channel must be binary")


@dataclass
class Shot:
    initial: np.ndarray      # s_n, the pre-redraw storyboard image
    mask: np.ndarray         # m_n
    final: np.ndarray        # I_n
    spec: SceneSpec | None


@dataclass
class Storyboard:
    shots: list[Shot]
    failures: list[tuple[int, str]] = field(default_factory=list)


def generate_storyboard(
    specs: list[SceneSpec],
    profile: SubjectProfile,
    protocol: str = "fresh",
    given: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> Storyboard:
    """generate -> segment -> remove -> redraw, shot by shot.

    protocol 'fresh' renders each spec with the generic placeholder sprite;
    'given-backgrounds' redraws directly into provided (background, mask)
    pairs.  Failed shots are reported, the rest complete.
    """
    if len(specs) < 1:
        raise ValueError("need at least one scene spec")
    shots: list[Shot] = []
    failures: list[tuple[int, str]] = []
    if protocol == "fresh":
        placeholder = sprites.sprite("generic")
        for i, spec in enumerate(specs):
            img, _ = render_scene(spec, placeholder)
            mask = segment_subject(img)
            if not mask.any():
                failures.append((i, "segmentation found no subject"))
                continue
            bg = remove_subject(img, mask)
            final = redraw(bg, mask, profile.sprite)
            shots.append(Shot(initial=img, mask=mask, final=final, spec=spec))
    elif protocol == "given-backgrounds":
        if given is None or len(given) != len(specs):
            raise ValueError("given-backgrounds protocol needs one (background, mask) per spec")
        for i, (spec, (bg, mask)) in enumerate(zip(specs, given)):
            if not mask.any():
                failures.append((i, "empty mask"))
                continue
            final = redraw(bg, mask, profile.sprite)
            shots.append(Shot(initial=bg, mask=mask, final=final, spec=spec))
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    return Storyboard(shots=shots, failures=failures)


# ---------------------------------------------------------------------------
# random scene/clip factories (pretraining data, template story designer)
# ---------------------------------------------------------------------------

def random_scene_spec(rng: np.random.Generator, frames: int = 8, text: str = "") -> SceneSpec:
    """A random valid SceneSpec over the closed procedural world."""
    for _ in range(100):
        size = int(rng.choice([10, 12, 14]))
        action = ACTIONS[int(rng.integers(len(ACTIONS)))]
        speed = 1
        half = size // 2
        margin_lo = half
        margin_hi = FRAME_SIZE - (size - half)
        travel = speed * (frames - 1)
        x = int(rng.integers(margin_lo, margin_hi))
        y = int(rng.integers(margin_lo, margin_hi))
        spec = SceneSpec(
            background=random_background(rng),
            center=(x, y),
            size=size,
            action=action,
            speed=speed,
            text=text,
        )
        try:
            validate_spec(spec, frames=frames)
            return spec
        except ParseError:
            continue
    raise RuntimeError("failed to draw a valid random scene spec")


def make_reference_clips(subject: str, n_clips: int, seed: int, frames: int = 8):
    """Seeded reference clips of a named sprite, prompts use the placeholder."""
    from .lora import ReferenceClip

    rng = np.random.default_rng(seed)
    rgba = sprites.sprite(subject)
    clips = []
    for _ in range(n_clips):
        spec = random_scene_spec(rng, frames=frames)
        video, masks = render_clip(spec, rgba, frames=frames)
        clips.append(
            ReferenceClip(
                frames=video,
                masks=masks,
                prompt_tokens=spec.prompt_tokens("<subject>"),
            )
        )
    return clips

"""Toy latent video denoiser: codec, text/image encoders, attention blocks.

The pixel-to-latent codec is an exact invertible 4x4 space-to-depth
rearrangement (no learned VAE).  The denoiser itself is an attention-only
token model with the self / cross / temporal attention taxonomy, one
cross-attention module per block, and per-block cross-attention maps
exposed for the localization loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    ParamSet,
    ShapeError,
    Tensor,
    attention,
    concat,
    gelu,
    layer_norm,
    linear,
)

PLACEHOLDER = "<subject>"

# Default word list: enough to phrase template shot descriptions.
DEFAULT_WORDS = [
    "<pad>", PLACEHOLDER,
    "a", "the", "on", "at", "in", "and", "then",
    "subject", "character", "sprite", "hero",
    "moves", "walks", "jumps", "bounces", "rests", "idles",
    "left", "right", "up", "down", "around", "still",
    "slowly", "quickly",
    "solid", "gradient", "checker", "background", "scene",
    "blob", "boxy", "ring", "cross", "heart", "arrow", "tree", "rocket", "crab",
]


class Vocab:
    """Fixed word vocabulary with a single subject-placeholder token."""

    def __init__(self, words=None):
        self.words = list(words) if words is not None else list(DEFAULT_WORDS)
        if PLACEHOLDER not in self.words:
            self.words.insert(1, PLACEHOLDER)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("vocabulary contains duplicate words")
        self.placeholder_id = self.index[PLACEHOLDER]

    def __len__(self):
        return len(self.words)

    def encode(self, tokens: list[str]) -> list[int]:
        ids = []
        for tok in tokens:
            if tok not in self.index:
                raise ValueError(f"unknown token: {tok!r}")
            ids.append(self.index[tok])
        return ids

    def tokenize(self, text: str) -> list[str]:
        return [t for t in text.lower().replace(",", " ").replace(".", " ").split() ]


@dataclass(frozen=True)
class DenoiserConfig:
    frames: int = 8
    image_size: int = 32
    channels: int = 3
    patch: int = 4
    d_model: int = 64
    n_blocks: int = 4
    n_heads: int = 4
    vocab_size: int = len(DEFAULT_WORDS)
    timesteps: int = 200
    max_text_len: int = 12
    mlp_mult: int = 2

    def __post_init__(self):
        if self.image_size % self.patch != 0:
            raise ValueError("image_size must be divisible by patch")
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.n_blocks < 1:
            raise ValueError("need at least one block")

    @property
    def h(self) -> int:
        return self.image_size // self.patch

    @property
    def w(self) -> int:
        return self.image_size // self.patch

    @property
    def c_lat(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def n_tokens(self) -> int:
        return self.h * self.w

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


ATTN_KINDS = ("self", "cross", "temporal")
ATTN_ROLES = ("q", "k", "v", "out")


def init_weights(config: DenoiserConfig, seed: int = 0) -> ParamSet:
    """Deterministically initialize all base parameters from a seed."""
    rng = np.random.default_rng(seed)
    d = config.d_model
    params = ParamSet()

    def gauss(shape, std=0.02):
        return rng.normal(0.0, std, size=shape)

    params.add("token_emb", gauss((config.vocab_size, d)))
    params.add("text_pos", gauss((config.max_text_len, d)))
    params.add("spatial_pos", gauss((config.n_tokens, d)))
    params.add("frame_pos", gauss((config.frames, d)))
    params.add("time_proj.W", gauss((d, d)))
    params.add("time_proj.b", np.zeros(d))
    params.add("in_proj.W", gauss((d, 2 * config.c_lat)))
    params.add("in_proj.b", np.zeros(d))
    params.add("img_proj.W", gauss((d, config.c_lat)))
    params.add("img_proj.b", np.zeros(d))
    for k in range(config.n_blocks):
        for kind in ATTN_KINDS:
            for role in ATTN_ROLES:
                params.add(f"block{k}.{kind}.{role}.W", gauss((d, d)))
            params.add(f"block{k}.norm_{kind}.g", np.ones(d))
            params.add(f"block{k}.norm_{kind}.b", np.zeros(d))
        params.add(f"block{k}.text_pool.W", gauss((d, d)))
        params.add(f"block{k}.text_pool.b", np.zeros(d))
        params.add(f"block{k}.norm_mlp.g", np.ones(d))
        params.add(f"block{k}.norm_mlp.b", np.zeros(d))
        params.add(f"block{k}.mlp1.W", gauss((config.mlp_mult * d, d)))
        params.add(f"block{k}.mlp1.b", np.zeros(config.mlp_mult * d))
        params.add(f"block{k}.mlp2.W", gauss((d, config.mlp_mult * d)))
        params.add(f"block{k}.mlp2.b", np.zeros(d))
    params.add("out_norm.g", np.ones(config.d_model))
    params.add("out_norm.b", np.zeros(config.d_model))
    params.add("out_proj.W", gauss((config.c_lat, d)))
    params.add("out_proj.b", np.zeros(config.c_lat))
    return params


# ---------------------------------------------------------------------------
# latent codec (exact, invertible)
# ---------------------------------------------------------------------------

def latent_encode(frames: np.ndarray, config: DenoiserConfig) -> np.ndarray:
    """Pixel video [F, S, S, 3] in [0,1] -> latent [F, c_lat, h, w].

    Space-to-depth of each patch: channel index = (py*patch + px)*3 + color,
    then the affine map x -> 2x - 1.
    """
    frames = np.asarray(frames, dtype=np.float64)
    s, p = config.image_size, config.patch
    if frames.ndim != 4 or frames.shape[1:] != (s, s, config.channels):
        raise ShapeError(
            f"latent_encode: expected [F, {s}, {s}, {config.channels}], got {frames.shape}"
        )
    f = frames.shape[0]
    x = frames.reshape(f, config.h, p, config.w, p, config.channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)          # [F, h, w, py, px, c]
    x = x.reshape(f, config.h, config.w, config.c_lat)
    x = x.transpose(0, 3, 1, 2)                # [F, c_lat, h, w]
    return 2.0 * x - 1.0


def latent_decode(z: np.ndarray, config: DenoiserConfig) -> np.ndarray:
    """Exact inverse of latent_encode, final pixels clamped to [0, 1]."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 4 or z.shape[1:] != (config.c_lat, config.h, config.w):
        raise ShapeError(
            f"latent_decode: expected [F, {config.c_lat}, {config.h}, {config.w}], got {z.shape}"
        )
    f = z.shape[0]
    p = config.patch
    x = (z + 1.0) / 2.0
    x = x.transpose(0, 2, 3, 1)                # [F, h, w, c_lat]
    x = x.reshape(f, config.h, config.w, p, p, config.channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(f, config.image_size, config.image_size, config.channels)
    return np.clip(x, 0.0, 1.0)


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def encode_text(
    token_ids: list[int],
    block: int,
    weights: ParamSet,
    config: DenoiserConfig,
    injector=None,
) -> tuple[Tensor, int | None]:
    """Embed a prompt for one cross-attention block.

    Returns (embedding [L, d_model], placeholder sequence index or None).
    If a placeholder token is present and an injector (BlockEmbeddings) is
    given, its row is replaced by the injector's embedding for this block.
    """
    if len(token_ids) > config.max_text_len:
        raise ValueError(
            f"prompt length {len(token_ids)} exceeds max_text_len {config.max_text_len}"
        )
    for tid in token_ids:
        if not (0 <= tid < config.vocab_size):
            raise ValueError(f"unknown token id: {tid}")
    placeholder_id = injector.placeholder_id if injector is not None else None
    subject_idx = None
    for pos, tid in enumerate(token_ids):
        if injector is not None and tid == placeholder_id:
            if subject_idx is not None:
                raise ValueError("multiple subject placeholder tokens in prompt")
            subject_idx = pos

    ids = np.asarray(token_ids, dtype=np.intp)
    emb = weights["token_emb"][ids]            # differentiable gather
    if subject_idx is not None:
        mask = np.zeros((len(token_ids), 1))
        mask[subject_idx, 0] = 1.0
        row = injector.e[block]                # [d]
        emb = emb * (1.0 - mask) + Tensor(mask) * row
    emb = emb + weights["text_pos"][: len(token_ids)]
    return emb, subject_idx


def encode_image(cond_latent, weights: ParamSet, config: DenoiserConfig) -> Tensor:
    """Condition-frame latent [c_lat, h, w] -> image tokens [h*w, d_model]."""
    x = cond_latent if isinstance(cond_latent, Tensor) else Tensor(cond_latent)
    if x.shape != (config.c_lat, config.h, config.w):
        raise ShapeError(
            f"encode_image: expected {(config.c_lat, config.h, config.w)}, got {x.shape}"
        )
    tokens = x.reshape(config.c_lat, config.n_tokens).swapaxes(0, 1)
    return linear(tokens, weights["img_proj.W"], weights["img_proj.b"])


def timestep_embedding(t: int, dim: int) -> np.ndarray:
    """Standard sinusoidal embedding of an integer timestep."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)])
    if emb.shape[0] < dim:
        emb = np.concatenate([emb, np.zeros(dim - emb.shape[0])])
    return emb


# ---------------------------------------------------------------------------
# denoiser forward
# ---------------------------------------------------------------------------

@dataclass
class AttnTrace:
    """Per-block cross-attention mass of the subject token at each position."""

    maps: list  # per block: Tensor [F, h, w]
    subject_index: int
    text_len: int
    n_img_tokens: int


def _proj(x: Tensor, weights: ParamSet, name: str, adapters=None) -> Tensor:
    W = weights[f"{name}.W"]
    y = x @ W.swapaxes(-1, -2)
    if adapters is not None and name in adapters.entries:
        ad = adapters.entries[name]
        y = y + (x @ ad.A.swapaxes(-1, -2)) @ ad.B.swapaxes(-1, -2) * ad.scale
    return y


def _split_heads(x: Tensor, n_heads: int, d_head: int) -> Tensor:
    # [..., n, d] -> [..., H, n, dh]
    *lead, n, _ = x.shape
    x = x.reshape(*lead, n, n_heads, d_head)
    return x.swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    # [..., H, n, dh] -> [..., n, H*dh]
    x = x.swapaxes(-2, -3)
    *lead, n, h, dh = x.shape
    return x.reshape(*lead, n, h * dh)


def denoise_eps(
    z_in,
    text_embs: list[tuple[Tensor, int | None]],
    img_tokens: Tensor,
    t: int,
    weights: ParamSet,
    config: DenoiserConfig,
    adapters=None,
    trace: bool = False,
):
    """Predict the noise for a channel-concatenated noisy+condition latent.

    z_in: [F, 2*c_lat, h, w]; text_embs: one (embedding, subject index) per
    block; img_tokens: [h*w, d_model] appended to every cross-attention's
    keys/values.  Returns (eps_hat [F, c_lat, h, w], AttnTrace | None).
    """
    x = z_in if isinstance(z_in, Tensor) else Tensor(z_in)
    F, H, dh = config.frames, config.n_heads, config.d_head
    n = config.n_tokens
    if x.shape != (F, 2 * config.c_lat, config.h, config.w):
        raise ShapeError(
            f"denoise_eps: expected {(F, 2 * config.c_lat, config.h, config.w)}, got {x.shape}"
        )
    if not (1 <= t <= config.timesteps):
        raise ValueError(f"timestep {t} outside [1, {config.timesteps}]")
    if len(text_embs) != config.n_blocks:
        raise ValueError(
            f"need {config.n_blocks} per-block text embeddings, got {len(text_embs)}"
        )

    # tokens: [F, n, d]
    tokens = x.reshape(F, 2 * config.c_lat, n).swapaxes(1, 2)
    tokens = linear(tokens, weights["in_proj.W"], weights["in_proj.b"])
    temb = linear(
        Tensor(timestep_embedding(t, config.d_model)),
        weights["time_proj.W"],
        weights["time_proj.b"],
    )
    tokens = tokens + weights["spatial_pos"] + temb

    subject_index = None
    maps = [] if trace else None
    for k in range(config.n_blocks):
        prefix = f"block{k}"
        # spatial self-attention within each frame
        h_in = layer_norm(tokens, weights[f"{prefix}.norm_self.g"], weights[f"{prefix}.norm_self.b"])
        q = _split_heads(_proj(h_in, weights, f"{prefix}.self.q", adapters), H, dh)
        kk = _split_heads(_proj(h_in, weights, f"{prefix}.self.k", adapters), H, dh)
        v = _split_heads(_proj(h_in, weights, f"{prefix}.self.v", adapters), H, dh)
        out, _ = attention(q, kk, v)
        tokens = tokens + _proj(_merge_heads(out), weights, f"{prefix}.self.out", adapters)

        # pooled-prompt conditioning: a direct additive pathway, so the
        # prompt (and a customized subject embedding) influences every
        # token even when cross-attention prefers the image keys
        text_emb, subj_idx = text_embs[k]
        pooled = linear(text_emb.mean(axis=0),
                        weights[f"{prefix}.text_pool.W"],
                        weights[f"{prefix}.text_pool.b"])
        tokens = tokens + pooled

        # cross-attention against text-for-this-block + image tokens
        kv = concat([text_emb, img_tokens], axis=0)       # [L + n, d]
        h_in = layer_norm(tokens, weights[f"{prefix}.norm_cross.g"], weights[f"{prefix}.norm_cross.b"])
        q = _split_heads(
            _proj(h_in.reshape(F * n, config.d_model), weights, f"{prefix}.cross.q", adapters),
            H, dh,
        )                                                  # [H, F*n, dh]
        kk = _split_heads(_proj(kv, weights, f"{prefix}.cross.k", adapters), H, dh)
        v = _split_heads(_proj(kv, weights, f"{prefix}.cross.v", adapters), H, dh)
        out, probs = attention(q, kk, v)                   # probs [H, F*n, L+n]
        out = _merge_heads(out).reshape(F, n, config.d_model)
        tokens = tokens + _proj(out, weights, f"{prefix}.cross.out", adapters)
        if trace:
            if subj_idx is not None:
                col = probs[:, :, subj_idx]                # [H, F*n]
                d_map = col.mean(axis=0).reshape(F, config.h, config.w)
                maps.append(d_map)
                subject_index = subj_idx
            else:
                maps.append(None)

        # temporal attention across frames at fixed spatial position
        h_in = layer_norm(tokens, weights[f"{prefix}.norm_temporal.g"], weights[f"{prefix}.norm_temporal.b"])
        h_t = h_in.swapaxes(0, 1) + weights["frame_pos"]   # [n, F, d]
        q = _split_heads(_proj(h_t, weights, f"{prefix}.temporal.q", adapters), H, dh)
        kk = _split_heads(_proj(h_t, weights, f"{prefix}.temporal.k", adapters), H, dh)
        v = _split_heads(_proj(h_t, weights, f"{prefix}.temporal.v", adapters), H, dh)
        out, _ = attention(q, kk, v)                       # [n, H, F, dh]
        out = _merge_heads(out).swapaxes(0, 1)             # [F, n, d]
        tokens = tokens + _proj(out, weights, f"{prefix}.temporal.out", adapters)

        # MLP
        h_in = layer_norm(tokens, weights[f"{prefix}.norm_mlp.g"], weights[f"{prefix}.norm_mlp.b"])
        h_mid = gelu(linear(h_in, weights[f"{prefix}.mlp1.W"], weights[f"{prefix}.mlp1.b"]))
        tokens = tokens + linear(h_mid, weights[f"{prefix}.mlp2.W"], weights[f"{prefix}.mlp2.b"])

    tokens = layer_norm(tokens, weights["out_norm.g"], weights["out_norm.b"])
    eps_tok = linear(tokens, weights["out_proj.W"], weights["out_proj.b"])  # [F, n, c_lat]
    eps_hat = eps_tok.swapaxes(1, 2).reshape(F, config.c_lat, config.h, config.w)

    trace_out = None
    if trace and subject_index is not None:
        trace_out = AttnTrace(
            maps=maps,
            subject_index=subject_index,
            text_len=text_embs[0][0].shape[0],
            n_img_tokens=n,
        )
    return eps_hat, trace_out

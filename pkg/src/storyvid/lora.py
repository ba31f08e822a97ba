"""Low-rank adapters, block-wise subject embeddings, and the training loop.

Adapters attach to every q/k/v/out projection of self-, cross-, and
temporal-attention in every block.  A separate subject-token embedding is
learned per cross-attention block; a localization loss concentrates the
subject token's attention mass inside the subject mask.  Base weights are
never written during customization.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import ParamSet, ShapeError, Tensor
from .denoiser import (
    ATTN_KINDS,
    ATTN_ROLES,
    PLACEHOLDER,
    DenoiserConfig,
    Vocab,
    denoise_eps,
    encode_image,
    encode_text,
    init_weights,
    latent_encode,
)
from .diffusion import NoiseSchedule, forward_noise
from .render import random_background

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data types
# ---------------------------------------------------------------------------

@dataclass
class LoraAdapter:
    A: Tensor            # [r, d_in], seeded Gaussian std 0.01
    B: Tensor            # [d_out, r], zero-initialized
    scale: float = 1.0


class AdapterSet:
    """LoRA adapters keyed by projection name (e.g. 'block0.self.q')."""

    def __init__(self, rank: int, scale: float = 1.0):
        self.rank = rank
        self.scale = scale
        self.entries: dict[str, LoraAdapter] = {}

    def __len__(self):
        return len(self.entries)

    def trainable_params(self):
        for name, ad in self.entries.items():
            yield f"{name}.A", ad.A
            yield f"{name}.B", ad.B


@dataclass
class BlockEmbeddings:
    """One subject-token embedding row per cross-attention block."""

    e: Tensor                # [K, d_model]
    placeholder_id: int


@dataclass
class ReferenceClip:
    frames: np.ndarray           # [F, S, S, 3] in [0, 1]
    masks: np.ndarray            # [F, S, S] boolean
    prompt_tokens: list[str]

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.frames.shape[:1] != self.masks.shape[:1]:
            raise ShapeError(f"frames {self.frames.shape} vs masks {self.masks.shape}")
        if not self.masks.any(axis=(1, 2)).all():
            raise ValueError("every frame's subject mask must be nonempty")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 400
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_loc: float = 1.0
    seed: int = 0
    augment_prob: float = 0.5
    cond_drop_prob: float = 0.5
    lora_rank: int = 4
    lora_scale: float = 1.0
    donor_word: str = "character"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs <= 0:
            raise ValueError("learning rate and epochs must be positive")
        if self.lambda_loc < 0:
            raise ValueError("lambda_loc must be >= 0")
        if not 0.0 <= self.cond_drop_prob <= 1.0:
            raise ValueError("cond_drop_prob must be in [0, 1]")


# ---------------------------------------------------------------------------
# adapter construction / application
# ---------------------------------------------------------------------------

def attach_lora(weights: ParamSet, config: DenoiserConfig, rank: int = 4,
                seed: int = 0, scale: float = 1.0) -> AdapterSet:
    """One adapter pair per attention projection; zero-init B keeps the
    adapted model bit-identical to the base until training."""
    d = config.d_model
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank > d:
        raise ValueError(f"rank {rank} exceeds projection dimension {d}")
    rng = np.random.default_rng(seed)
    adapters = AdapterSet(rank=rank, scale=scale)
    for k in range(config.n_blocks):
        for kind in ATTN_KINDS:
            for role in ATTN_ROLES:
                name = f"block{k}.{kind}.{role}"
                if f"{name}.W" not in weights:
                    raise KeyError(f"no base projection named {name}")
                A = Tensor(rng.normal(0.0, 0.01, size=(rank, d)), requires_grad=True)
                B = Tensor(np.zeros((d, rank)), requires_grad=True)
                adapters.entries[name] = LoraAdapter(A=A, B=B, scale=scale)
    return adapters


def lora_apply(x, W, A, B, scale: float = 1.0):
    """y = W x + scale * B (A x), all acting on the trailing axis."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    W = W if isinstance(W, Tensor) else Tensor(W)
    A = A if isinstance(A, Tensor) else Tensor(A)
    B = B if isinstance(B, Tensor) else Tensor(B)
    if x.shape[-1] != W.shape[-1]:
        raise ShapeError(f"lora_apply: x {x.shape} vs W {W.shape}")
    if A.shape[-1] != x.shape[-1] or B.shape[-1] != A.shape[0]:
        raise ShapeError(f"lora_apply: A {A.shape} / B {B.shape} do not compose with x {x.shape}")
    return x @ W.swapaxes(-1, -2) + (x @ A.swapaxes(-1, -2)) @ B.swapaxes(-1, -2) * scale


def init_block_embeddings(weights: ParamSet, config: DenoiserConfig, vocab: Vocab,
                          donor_word: str = "character") -> BlockEmbeddings:
    """All K rows start at the donor word's base embedding (warm start)."""
    if donor_word not in vocab.index:
        raise ValueError(f"donor word {donor_word!r} not in vocabulary")
    donor = weights["token_emb"].data[vocab.index[donor_word]]
    e = Tensor(np.tile(donor, (config.n_blocks, 1)), requires_grad=True)
    return BlockEmbeddings(e=e, placeholder_id=vocab.placeholder_id)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def ldm_loss(eps, eps_hat) -> Tensor:
    """Mean squared error between applied and predicted noise."""
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps.shape != eps_hat.shape:
        raise ShapeError(f"ldm_loss: {eps.shape} vs {eps_hat.shape}")
    diff = eps_hat - eps
    return (diff * diff).mean()


def downsample_mask(mask: np.ndarray, patch: int = 4) -> np.ndarray:
    """Pixel mask -> latent mask; a cell is set iff >= 50% of its patch is."""
    mask = np.asarray(mask, dtype=bool)
    s = mask.shape[0]
    if s % patch != 0:
        raise ShapeError(f"mask extent {s} not divisible by patch {patch}")
    h = s // patch
    sums = mask.reshape(h, patch, h, patch).sum(axis=(1, 3))
    return sums >= (patch * patch) / 2


def localization_loss(trace, latent_masks: np.ndarray) -> Tensor:
    """-(1/K) sum_k (1/F') sum_f mean(D_k[f][mask]), in [-1, 0].

    Frames with an all-zero latent mask are skipped with a warning; if all
    frames are empty the loss is rejected.
    """
    latent_masks = np.asarray(latent_masks, dtype=bool)
    valid = [f for f in range(latent_masks.shape[0]) if latent_masks[f].any()]
    for f in range(latent_masks.shape[0]):
        if f not in valid:
            log.warning("localization_loss: frame %d has an empty latent mask, skipped", f)
    if not valid:
        raise ValueError("localization_loss: all latent mask frames are empty")
    maps = [m for m in trace.maps if m is not None]
    if not maps:
        raise ValueError("localization_loss: trace carries no subject attention maps")
    total = None
    for d_map in maps:
        block_sum = None
        for f in valid:
            term = d_map[f][latent_masks[f]].mean()
            block_sum = term if block_sum is None else block_sum + term
        block_mean = block_sum * (1.0 / len(valid))
        total = block_mean if total is None else total + block_mean
    return total * (-1.0 / len(maps))


# ---------------------------------------------------------------------------
# background-agnostic augmentation
# ---------------------------------------------------------------------------

def augment_background(clip: ReferenceClip, rng: np.random.Generator) -> ReferenceClip:
    """Replace background pixels with one random procedural background,
    consistent across the clip's frames; subject pixels preserved exactly."""
    if clip.masks.all():
        return clip
    size = clip.frames.shape[1]
    bg = random_background(rng).render(size)
    frames = np.where(clip.masks[..., None], clip.frames, bg[None])
    return ReferenceClip(frames=frames, masks=clip.masks.copy(),
                         prompt_tokens=list(clip.prompt_tokens))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Standard Adam over a fixed ordered list of (name, Tensor)."""

    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.params}
        self.v = {name: np.zeros_like(t.data) for name, t in self.params}

    def zero_grad(self):
        for _, t in self.params:
            t.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, t in self.params:
            g = t.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            t.data = t.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _prompt_ids(tokens: list[str], vocab: Vocab) -> list[int]:
    if tokens.count(PLACEHOLDER) > 1:
        raise ValueError("prompts may contain at most one subject placeholder")
    return vocab.encode(tokens)


def customization_loss(
    clip: ReferenceClip,
    t: int,
    eps: np.ndarray,
    weights: ParamSet,
    adapters: AdapterSet,
    embeds: BlockEmbeddings,
    sched: NoiseSchedule,
    config: DenoiserConfig,
    vocab: Vocab,
    lambda_loc: float = 1.0,
    drop_cond: bool = False,
):
    """Full training objective: noise-prediction MSE + localization term.

    With ``drop_cond`` the first-frame conditioning is replaced by the null
    (all-zero) latent, so the prompt is the only source of subject
    appearance for that step.
    """
    z0 = latent_encode(clip.frames, config)
    z_t = forward_noise(z0, t, eps, sched)
    cond = np.zeros_like(z0[0]) if drop_cond else z0[0]
    cond_b = np.broadcast_to(cond, z0.shape)
    z_in = np.concatenate([z_t, cond_b], axis=1)
    ids = _prompt_ids(clip.prompt_tokens, vocab)
    text_embs = [
        encode_text(ids, k, weights, config, injector=embeds)
        for k in range(config.n_blocks)
    ]
    img_tokens = encode_image(cond, weights, config)
    eps_hat, trace = denoise_eps(
        z_in, text_embs, img_tokens, t, weights, config, adapters=adapters, trace=True
    )
    l_ldm = ldm_loss(eps, eps_hat)
    l_loc = None
    if lambda_loc > 0 and trace is not None:
        lmasks = np.stack([downsample_mask(m, config.patch) for m in clip.masks])
        l_loc = localization_loss(trace, lmasks)
        loss = l_ldm + l_loc * lambda_loc
    else:
        loss = l_ldm
    return loss, l_ldm, l_loc


def train_step(
    clip: ReferenceClip,
    weights: ParamSet,
    adapters: AdapterSet,
    embeds: BlockEmbeddings,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
    opt: Adam,
    config: DenoiserConfig,
    vocab: Vocab,
):
    """One customization step; updates only adapter tensors and e."""
    if rng.random() < cfg.augment_prob:
        clip = augment_background(clip, rng)
    t = int(rng.integers(1, sched.timesteps + 1))
    eps = rng.standard_normal(
        (config.frames, config.c_lat, config.h, config.w)
    )
    drop_cond = rng.random() < cfg.cond_drop_prob
    opt.zero_grad()
    loss, l_ldm, l_loc = customization_loss(
        clip, t, eps, weights, adapters, embeds, sched, config, vocab,
        lambda_loc=cfg.lambda_loc, drop_cond=drop_cond,
    )
    loss.backward()
    opt.step()
    return (
        float(loss.data),
        float(l_ldm.data),
        float(l_loc.data) if l_loc is not None else 0.0,
    )


def make_customization(weights: ParamSet, config: DenoiserConfig, vocab: Vocab,
                       cfg: TrainConfig):
    """Fresh adapters + block embeddings + their optimizer."""
    adapters = attach_lora(weights, config, rank=cfg.lora_rank, seed=cfg.seed,
                           scale=cfg.lora_scale)
    embeds = init_block_embeddings(weights, config, vocab, donor_word=cfg.donor_word)
    params = list(adapters.trainable_params()) + [("embeds.e", embeds.e)]
    opt = Adam(params, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    return adapters, embeds, opt


def fine_tune(
    clips: list[ReferenceClip],
    weights: ParamSet,
    config: DenoiserConfig,
    vocab: Vocab,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    progress=None,
):
    """Customize on reference clips; one epoch = one seeded-shuffled pass.

    Returns (adapters, embeds, telemetry) where telemetry is the per-epoch
    mean loss triple.  Deterministic given cfg.seed.
    """
    if not clips:
        raise ValueError("need at least one reference clip")
    adapters, embeds, opt = make_customization(weights, config, vocab, cfg)
    rng = np.random.default_rng(cfg.seed)
    telemetry = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(clips))
        sums = np.zeros(3)
        for idx in order:
            sums += train_step(
                clips[int(idx)], weights, adapters, embeds, sched, cfg, rng, opt,
                config, vocab,
            )
        record = {
            "epoch": epoch,
            "loss": sums[0] / len(clips),
            "ldm": sums[1] / len(clips),
            "loc": sums[2] / len(clips),
        }
        telemetry.append(record)
        if progress is not None:
            progress(record)
    return adapters, embeds, telemetry


def pretrain_base(
    config: DenoiserConfig,
    vocab: Vocab,
    sched: NoiseSchedule,
    steps: int = 3000,
    seed: int = 0,
    lr: float = 1e-3,
    subjects: tuple[str, ...] | None = None,
    cond_drop_prob: float = 0.5,
    text_drop_prob: float = 0.15,
    progress=None,
):
    """Train the base model from scratch on the procedural sprite family.

    Each step draws one random subject/scene clip and minimizes the
    noise-prediction MSE over all base parameters.  With probability
    ``cond_drop_prob`` the first-frame conditioning is nulled out for the
    step, which forces the model to learn subject appearance from the
    prompt as well — without this, customization of the text pathway has
    no effect on sampled videos.  With probability ``text_drop_prob`` the
    prompt is replaced by the null prompt, which trains the unconditional
    branch used for prompt guidance at sampling time.  Returns (weights,
    telemetry).
    """
    from . import sprites as sprite_mod
    from .storyboard import random_scene_spec, render_clip

    if subjects is None:
        subjects = sprite_mod.FAMILY_SUBJECTS
    weights = init_weights(config, seed=seed)
    opt = Adam(list(weights.trainable_items()), lr=lr)
    rng = np.random.default_rng(seed)
    telemetry = []
    for step in range(steps):
        name = subjects[int(rng.integers(len(subjects)))]
        spec = random_scene_spec(rng, frames=config.frames)
        frames, _ = render_clip(spec, sprite_mod.sprite(name), frames=config.frames)
        clip_prompt = spec.prompt_tokens(name)
        z0 = latent_encode(frames, config)
        t = int(rng.integers(1, sched.timesteps + 1))
        eps = rng.standard_normal(z0.shape)
        z_t = forward_noise(z0, t, eps, sched)
        cond = np.zeros_like(z0[0]) if rng.random() < cond_drop_prob else z0[0]
        cond_b = np.broadcast_to(cond, z0.shape)
        z_in = np.concatenate([z_t, cond_b], axis=1)
        if rng.random() < text_drop_prob:
            clip_prompt = ["<pad>"]
        ids = vocab.encode(clip_prompt)
        text_embs = [
            encode_text(ids, k, weights, config) for k in range(config.n_blocks)
        ]
        img_tokens = encode_image(cond, weights, config)
        opt.zero_grad()
        eps_hat, _ = denoise_eps(z_in, text_embs, img_tokens, t, weights, config)
        loss = ldm_loss(eps, eps_hat)
        loss.backward()
        opt.step()
        if step % 50 == 0 or step == steps - 1:
            record = {"step": step, "loss": float(loss.data)}
            telemetry.append(record)
            if progress is not None:
                progress(record)
    return weights, telemetry


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"LRBE"
FORMAT_VERSION = 1


def config_hash(config: DenoiserConfig, extra: dict | None = None) -> str:
    doc = {"config": config.__dict__ | {}, "extra": extra or {}}
    blob = json.dumps(doc, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def save_tensor_container(path, tensors: list[tuple[str, np.ndarray]], meta: dict):
    """Write the LRBE container: magic, version, length-prefixed metadata
    JSON (tensor directory), then raw little-endian float32 payloads."""
    directory = []
    offset = 0
    payloads = []
    for name, arr in tensors:
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr32.tobytes())
        offset += arr32.nbytes
    doc = dict(meta)
    doc["tensors"] = directory
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in payloads:
            fh.write(p)


def load_tensor_container(path):
    """Read an LRBE container; returns (ordered name->array dict, metadata)."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not an LRBE container")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        (mlen,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(mlen).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for entry in meta["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=start)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
    directory_meta = {k: v for k, v in meta.items() if k != "tensors"}
    return tensors, directory_meta


def save_checkpoint(path, adapters: AdapterSet, embeds: BlockEmbeddings,
                    config: DenoiserConfig):
    tensors = [(name, t.data) for name, t in adapters.trainable_params()]
    tensors.append(("embeds.e", embeds.e.data))
    meta = {
        "kind": "customization",
        "config_hash": config_hash(config, {"rank": adapters.rank, "scale": adapters.scale}),
        "rank": adapters.rank,
        "scale": adapters.scale,
        "placeholder_id": embeds.placeholder_id,
    }
    save_tensor_container(path, tensors, meta)


def load_checkpoint(path, config: DenoiserConfig):
    tensors, meta = load_tensor_container(path)
    if meta.get("kind") != "customization":
        raise ValueError(f"{path}: not a customization checkpoint")
    adapters = AdapterSet(rank=int(meta["rank"]), scale=float(meta["scale"]))
    for k in range(config.n_blocks):
        for kind in ATTN_KINDS:
            for role in ATTN_ROLES:
                name = f"block{k}.{kind}.{role}"
                adapters.entries[name] = LoraAdapter(
                    A=Tensor(tensors[f"{name}.A"], requires_grad=True),
                    B=Tensor(tensors[f"{name}.B"], requires_grad=True),
                    scale=float(meta["scale"]),
                )
    embeds = BlockEmbeddings(
        e=Tensor(tensors["embeds.e"], requires_grad=True),
        placeholder_id=int(meta["placeholder_id"]),
    )
    return adapters, embeds


def save_base_weights(path, weights: ParamSet, config: DenoiserConfig):
    tensors = [(name, t.data) for name, t in weights.items()]
    meta = {"kind": "base", "config_hash": config_hash(config)}
    save_tensor_container(path, tensors, meta)


def load_base_weights(path, config: DenoiserConfig) -> ParamSet:
    tensors, meta = load_tensor_container(path)
    if meta.get("kind") != "base":
        raise ValueError(f"{path}: not a base-weights container")
    reference = init_weights(config, seed=0)
    weights = ParamSet()
    for name in reference.names():
        if name not in tensors:
            raise ValueError(f"{path}: missing tensor {name}")
        weights.add(name, tensors[name], trainable=True)
    return weights

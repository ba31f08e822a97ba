"""DDPM noise schedule, forward process, backward steps, shot sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import ShapeError, Tensor, no_grad
from .denoiser import (
    DenoiserConfig,
    denoise_eps,
    encode_image,
    encode_text,
    latent_decode,
    latent_encode,
)


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule tables, all float64. alpha_bar[0] == 1 (t=0)."""

    timesteps: int
    betas: np.ndarray        # [T+1], betas[0] unused
    alphas: np.ndarray       # [T+1]
    alpha_bars: np.ndarray   # [T+1], alpha_bars[0] = 1

    def check_step(self, t: int):
        if not (1 <= t <= self.timesteps):
            raise ValueError(f"step {t} outside [1, {self.timesteps}]")


def make_schedule(timesteps: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    if timesteps == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        betas = np.linspace(beta_min, beta_max, timesteps, dtype=np.float64)
    betas = np.concatenate([[0.0], betas])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(timesteps=timesteps, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_noise(z0, t: int, eps, sched: NoiseSchedule):
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps (closed-form marginal).

    t=0 is accepted as the no-noise convention.  Works on Tensors (graph
    preserved) or plain arrays.
    """
    if not (0 <= t <= sched.timesteps):
        raise ValueError(f"step {t} outside [0, {sched.timesteps}]")
    z0_shape = z0.shape if hasattr(z0, "shape") else np.shape(z0)
    eps_shape = eps.shape if hasattr(eps, "shape") else np.shape(eps)
    if tuple(z0_shape) != tuple(eps_shape):
        raise ShapeError(f"forward_noise: z0 {z0_shape} vs eps {eps_shape}")
    ab = sched.alpha_bars[t]
    return z0 * np.sqrt(ab) + eps * np.sqrt(1.0 - ab)


def ddim_step(eps_hat: np.ndarray, z_t: np.ndarray, t: int, t_prev: int, sched: NoiseSchedule) -> np.ndarray:
    """Deterministic DDIM update from step t to an earlier step t_prev."""
    sched.check_step(t)
    if not (0 <= t_prev < t):
        raise ValueError(f"t_prev {t_prev} must be in [0, {t})")
    ab_t = sched.alpha_bars[t]
    ab_p = sched.alpha_bars[t_prev]
    z0_hat = (z_t - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    return np.sqrt(ab_p) * z0_hat + np.sqrt(1.0 - ab_p) * eps_hat


def backward_step(
    eps_hat: np.ndarray,
    z_t: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    mode: str = "ddim",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One reverse step z_t -> z_{t-1} (ddim deterministic, ddpm ancestral)."""
    sched.check_step(t)
    if mode == "ddim":
        return ddim_step(eps_hat, z_t, t, t - 1, sched)
    if mode == "ddpm":
        beta = sched.betas[t]
        alpha = sched.alphas[t]
        ab_t = sched.alpha_bars[t]
        ab_p = sched.alpha_bars[t - 1]
        mean = (z_t - beta / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(alpha)
        sigma2 = beta * (1.0 - ab_p) / (1.0 - ab_t)
        if sigma2 <= 0.0:
            return mean
        if rng is None:
            raise ValueError("ddpm mode requires a noise source")
        return mean + np.sqrt(sigma2) * rng.standard_normal(z_t.shape)
    raise ValueError(f"unknown mode: {mode!r}")


def ddim_timesteps(timesteps: int, steps: int) -> list[int]:
    """Evenly spaced decreasing timestep subsequence ending above 0."""
    if steps <= 0:
        return []
    if steps >= timesteps:
        return list(range(timesteps, 0, -1))
    ts = np.linspace(1, timesteps, steps).round().astype(int)
    return sorted(set(int(t) for t in ts), reverse=True)


def sample_shot(
    weights,
    config: DenoiserConfig,
    image: np.ndarray,
    prompt_ids: list[int],
    sched: NoiseSchedule,
    steps: int = 50,
    seed: int = 0,
    mode: str = "ddim",
    adapters=None,
    embeds=None,
    guidance: float = 1.0,
) -> np.ndarray:
    """Animate one storyboard image into a pixel video [F, S, S, 3].

    The condition latent is the storyboard image's latent, broadcast across
    frames and channel-concatenated with z_t at every step.  The first
    frame is additionally clamped to the forward-noised condition latent
    at each step (replacement method): the storyboard image is the shot's
    first frame, and the anchor keeps the chain on-distribution — without
    it the model sees only its own drift and contracts toward a gray
    mean.  ``guidance`` > 1 extrapolates away from the null-prompt
    prediction (eps_null + g * (eps_prompt - eps_null)), amplifying what
    the prompt — including a customized subject embedding — contributes.
    Pure function of (seed, inputs).
    """
    image = np.asarray(image, dtype=np.float64)
    s = config.image_size
    if image.shape != (s, s, config.channels):
        raise ShapeError(f"sample_shot: image must be {(s, s, config.channels)}, got {image.shape}")
    rng = np.random.default_rng(seed)
    F, C = config.frames, config.c_lat
    z = rng.standard_normal((F, C, config.h, config.w))
    cond = latent_encode(image[None], config)[0]           # [C, h, w]
    cond_b = np.broadcast_to(cond, (F, C, config.h, config.w))

    with no_grad():
        img_tokens = encode_image(cond, weights, config)
        text_embs = [
            encode_text(prompt_ids, k, weights, config, injector=embeds)
            for k in range(config.n_blocks)
        ]
        null_embs = None
        if guidance != 1.0:
            # null branch: the same prompt with the subject slot padded out
            # (so guidance isolates the subject's contribution), or the
            # <pad>-only prompt trained by text dropout otherwise
            pid = embeds.placeholder_id if embeds is not None else None
            if pid is not None and pid in prompt_ids:
                null_ids = [0 if i == pid else i for i in prompt_ids]
            else:
                null_ids = [0]
            null_embs = [
                encode_text(null_ids, k, weights, config)
                for k in range(config.n_blocks)
            ]
        if mode == "ddim":
            plan = ddim_timesteps(sched.timesteps, steps)
        else:
            # ancestral sampling has no skip rule; walk the full chain
            plan = list(range(sched.timesteps, 0, -1)) if steps > 0 else []
        for i, t in enumerate(plan):
            z[0] = forward_noise(cond, t, rng.standard_normal(cond.shape), sched)
            z_in = np.concatenate([z, cond_b], axis=1)
            eps_hat, _ = denoise_eps(
                z_in, text_embs, img_tokens, t, weights, config, adapters=adapters
            )
            eps_np = eps_hat.data
            if null_embs is not None:
                eps_null, _ = denoise_eps(
                    z_in, null_embs, img_tokens, t, weights, config,
                    adapters=adapters
                )
                eps_np = eps_null.data + guidance * (eps_np - eps_null.data)
            if mode == "ddim":
                t_prev = plan[i + 1] if i + 1 < len(plan) else 0
                z = ddim_step(eps_np, z, t, t_prev, sched)
            else:
                z = backward_step(eps_np, z, t, sched, mode=mode, rng=rng)
        if plan:
            z[0] = cond
    return latent_decode(z, config)

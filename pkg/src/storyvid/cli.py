"""Batch command-line entry points.

Exit-code contract: 0 success, 1 usage error, 2 runtime failure.  Every
command prints one machine-readable JSON summary line on stdout.
"""

from __future__ import annotations

import dataclasses
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import sprites
from .denoiser import DenoiserConfig, Vocab
from .diffusion import make_schedule, sample_shot
from .lora import (
    TrainConfig,
    fine_tune,
    load_base_weights,
    load_checkpoint,
    pretrain_base,
    save_base_weights,
    save_checkpoint,
)
from .orchestrator import (
    ArtifactStore,
    RunConfig,
    pgm_bytes,
    png_bytes,
    png_to_image,
    png_to_rgba,
    replay,
    rgba_png_bytes,
    run_pipeline,
)
from .storyboard import (
    SubjectProfile,
    generate_storyboard,
    make_reference_clips,
    parse_storyboard,
    segment_subject,
)

_SECTIONS = {"denoiser": DenoiserConfig, "train": TrainConfig}


def load_config(path: str | None) -> dict:
    """Read the JSON config file; unknown keys are rejected with their path."""
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise click.ClickException(f"{path}: config must be a JSON object")
    from .service import ServiceConfig

    sections = {**_SECTIONS, "service": ServiceConfig}
    for section, content in doc.items():
        if section not in sections:
            raise click.ClickException(f"unknown config key: {section}")
        allowed = {f.name for f in dataclasses.fields(sections[section])}
        for key in content:
            if key not in allowed:
                raise click.ClickException(f"unknown config key: {section}.{key}")
    return doc


def denoiser_config(cfg: dict) -> DenoiserConfig:
    return DenoiserConfig(**cfg.get("denoiser", {}))


def train_config(cfg: dict, **overrides) -> TrainConfig:
    merged = {**cfg.get("train", {}), **{k: v for k, v in overrides.items()
                                         if v is not None}}
    return TrainConfig(**merged)


def summary(**fields):
    click.echo(json.dumps(fields, sort_keys=True))


def _load_subjects(store_dir: str) -> dict:
    path = Path(store_dir) / "subjects.json"
    return json.loads(path.read_text()) if path.exists() else {}


def _profile(subject: str, store_dir: str | None) -> SubjectProfile:
    if store_dir:
        entry = _load_subjects(store_dir).get(subject)
        if entry is not None:
            store = ArtifactStore(Path(store_dir) / "artifacts")
            return SubjectProfile(subject_id=subject,
                                  sprite=png_to_rgba(store.get(entry["sprite"])))
    if subject in sprites.all_subjects():
        return SubjectProfile(subject_id=subject, sprite=sprites.sprite(subject))
    raise click.ClickException(f"unknown subject {subject!r}")


@click.group()
def cli():
    """Customized storytelling-video pipeline tools."""


# ---------------------------------------------------------------------------
# subject management
# ---------------------------------------------------------------------------

@cli.group()
def subject():
    """Subject profile management."""


@subject.command("add")
@click.option("--id", "subject_id", required=True)
@click.option("--sprite", "sprite_path", type=click.Path(exists=True),
              help="RGBA PNG sprite; omit to use a builtin sprite named --id")
@click.option("--store", "store_dir", default="storyvid_store", show_default=True)
def subject_add(subject_id, sprite_path, store_dir):
    if sprite_path:
        rgba = png_to_rgba(Path(sprite_path).read_bytes())
    else:
        if subject_id not in sprites.all_subjects():
            raise click.ClickException(f"no builtin sprite named {subject_id!r}")
        rgba = sprites.sprite(subject_id)
    SubjectProfile(subject_id=subject_id, sprite=rgba)   # validates alpha
    store = ArtifactStore(Path(store_dir) / "artifacts")
    digest = store.put(rgba_png_bytes(rgba), "image/png")
    subjects = _load_subjects(store_dir)
    subjects[subject_id] = {"sprite": digest}
    (Path(store_dir) / "subjects.json").write_text(
        json.dumps(subjects, sort_keys=True))
    summary(command="subject-add", subject_id=subject_id, sprite=digest)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--steps", default=3000, show_default=True)
@click.option("--lr", default=1e-3, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True)
def pretrain(config_path, steps, lr, seed, out_path):
    """Pretrain the toy base model on the 8-sprite family."""
    cfg = load_config(config_path)
    dcfg = denoiser_config(cfg)
    vocab = Vocab()
    sched = make_schedule(dcfg.timesteps)
    t0 = time.time()
    weights, telemetry = pretrain_base(dcfg, vocab, sched, steps=steps,
                                       seed=seed, lr=lr)
    save_base_weights(out_path, weights, dcfg)
    summary(command="pretrain", steps=steps, seed=seed, out=out_path,
            final_loss=telemetry[-1]["loss"], seconds=round(time.time() - t0, 2))


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--base", "base_path", required=True, type=click.Path(exists=True))
@click.option("--subject", default="crab", show_default=True)
@click.option("--clips", default=4, show_default=True)
@click.option("--epochs", type=int, default=None, help="override config epochs")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True)
def finetune(config_path, base_path, subject, clips, epochs, seed, out_path):
    """Fine-tune low-rank adapters + block embeddings on reference clips."""
    cfg = load_config(config_path)
    dcfg = denoiser_config(cfg)
    tcfg = train_config(cfg, epochs=epochs, seed=seed)
    weights = load_base_weights(base_path, dcfg)
    vocab = Vocab()
    sched = make_schedule(dcfg.timesteps)
    ref = make_reference_clips(subject, clips, seed=seed, frames=dcfg.frames)
    t0 = time.time()
    adapters, embeds, telemetry = fine_tune(ref, weights, dcfg, vocab, sched, tcfg)
    save_checkpoint(out_path, adapters, embeds, dcfg)
    summary(command="finetune", subject=subject, clips=clips, seed=seed,
            epochs=tcfg.epochs, out=out_path,
            final_loss=telemetry[-1]["loss"],
            final_loc=telemetry[-1]["loc"],
            seconds=round(time.time() - t0, 2))


# ---------------------------------------------------------------------------
# storyboard / animate
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--dsl", "dsl_path", required=True, type=click.Path(exists=True))
@click.option("--subject", required=True)
@click.option("--store", "store_dir", default=None)
@click.option("--out", "out_dir", required=True)
def storyboard(dsl_path, subject, store_dir, out_dir):
    """Parse shot DSL and produce storyboard images + masks."""
    specs = parse_storyboard(Path(dsl_path).read_text())
    profile = _profile(subject, store_dir)
    board = generate_storyboard(specs, profile)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, shot in enumerate(board.shots):
        (out / f"shot{i}.png").write_bytes(png_bytes(shot.final))
        (out / f"shot{i}.pgm").write_bytes(pgm_bytes(shot.mask))
        files.append(f"shot{i}.png")
    summary(command="storyboard", shots=len(board.shots),
            failures=board.failures, out=str(out), files=files)


@cli.command()
@click.option("--dsl", "dsl_path", required=True, type=click.Path(exists=True))
@click.option("--subject", required=True)
@click.option("--store", "store_dir", default=None)
@click.option("--mode", type=click.Choice(["procedural", "diffusion"]),
              default="procedural", show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--base", "base_path", type=click.Path(exists=True))
@click.option("--custom", "custom_path", type=click.Path(exists=True))
@click.option("--frames", default=8, show_default=True)
@click.option("--steps", default=10, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_dir", required=True)
def animate(dsl_path, subject, store_dir, mode, config_path, base_path,
            custom_path, frames, steps, seed, out_dir):
    """Animate a storyboard into per-shot frame sequences."""
    from .storyboard import render_clip

    specs = parse_storyboard(Path(dsl_path).read_text())
    profile = _profile(subject, store_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    adapters = embeds = None
    if mode == "diffusion":
        if not base_path:
            raise click.ClickException("--mode diffusion requires --base")
        cfg = load_config(config_path)
        dcfg = denoiser_config(cfg)
        weights = load_base_weights(base_path, dcfg)
        vocab = Vocab()
        sched = make_schedule(dcfg.timesteps)
        if custom_path:
            adapters, embeds = load_checkpoint(custom_path, dcfg)
    n_frames = 0
    board = generate_storyboard(specs, profile)
    for i, (spec, shot) in enumerate(zip(specs, board.shots)):
        if mode == "procedural":
            video, _ = render_clip(spec, profile.sprite, frames=frames)
        else:
            word = "<subject>" if embeds is not None else subject
            ids = vocab.encode(spec.prompt_tokens(word))
            video = sample_shot(weights, dcfg, shot.final, ids, sched,
                                steps=steps, seed=seed + i,
                                adapters=adapters, embeds=embeds)
        shot_dir = out / f"shot{i}"
        shot_dir.mkdir(exist_ok=True)
        for f in range(video.shape[0]):
            (shot_dir / f"frame{f}.png").write_bytes(png_bytes(video[f]))
        n_frames += video.shape[0]
    summary(command="animate", mode=mode, shots=len(specs), frames=n_frames,
            seed=seed, out=str(out))


# ---------------------------------------------------------------------------
# pipeline / eval
# ---------------------------------------------------------------------------

@cli.group()
def pipeline():
    """Full design -> board -> animate runs."""


@pipeline.command("run")
@click.option("--prompt", required=True)
@click.option("--subject", required=True)
@click.option("--shots", default=2, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--observer", default="always-approve", show_default=True)
@click.option("--store", "store_dir", default="storyvid_store", show_default=True)
def pipeline_run(prompt, subject, shots, seed, observer, store_dir):
    from .orchestrator import AlwaysApprove, ThresholdScorer

    profile = _profile(subject, store_dir)
    if observer == "always-approve":
        backend = AlwaysApprove()
    elif observer.startswith("threshold:"):
        backend = ThresholdScorer(float(observer.split(":", 1)[1]))
    else:
        raise click.ClickException(f"unknown observer {observer!r}")
    store = ArtifactStore(Path(store_dir) / "artifacts")
    config = RunConfig(n_shots=shots, seed=seed, observer=backend)
    state = run_pipeline(prompt, profile, config, store=store)
    runs_dir = Path(store_dir) / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    (runs_dir / f"{state.run_id}.json").write_text(json.dumps(state.events))
    summary(command="pipeline-run", run_id=state.run_id, phase=state.phase,
            seed=seed, artifacts=dict(sorted(state.artifacts.items())),
            error=state.error)
    if state.phase != "Done":
        raise SystemExit(2)


@cli.command("eval")
@click.option("--store", "store_dir", required=True)
@click.option("--run", "run_id", required=True)
def eval_run(store_dir, run_id):
    """Score a finished run's videos (temporal consistency, subject fidelity)."""
    from .metrics import MetricReport, subject_fidelity, temporal_consistency

    path = Path(store_dir) / "runs" / f"{run_id}.json"
    if not path.exists():
        raise click.ClickException(f"unknown run {run_id}")
    state = replay(json.loads(path.read_text()))
    store = ArtifactStore(Path(store_dir) / "artifacts")
    profile = _profile(state.subject_id, store_dir)
    report = MetricReport()
    i = 0
    while f"video{i}" in state.artifacts:
        doc = json.loads(store.get(state.artifacts[f"video{i}"]))
        video = np.stack([png_to_image(store.get(d)) for d in doc["frames"]])
        masks = np.stack([segment_subject(frame) for frame in video])
        report.per_shot.append({
            "temporal_consistency": temporal_consistency(video),
            "subject_fidelity": subject_fidelity(video, masks, profile.sprite),
        })
        i += 1
    if i == 0:
        raise click.ClickException(f"run {run_id} has no videos")
    click.echo(report.to_json())


# ---------------------------------------------------------------------------
# verification / service
# ---------------------------------------------------------------------------

@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--subject", default="crab", show_default=True)
@click.option("--eps", default=1e-3, show_default=True)
@click.option("--subsample", type=int, default=None,
              help="check only N coordinates (default: all)")
@click.option("--seed", default=0, show_default=True)
def gradcheck(config_path, subject, eps, subsample, seed):
    """Finite-difference check of the full customization loss gradient."""
    from .autograd import ParamSet, finite_diff_check
    from .denoiser import init_weights
    from .lora import customization_loss, make_customization

    cfg = load_config(config_path)
    dcfg = denoiser_config(cfg)
    tcfg = train_config(cfg, seed=seed)
    weights = init_weights(dcfg, seed=seed + 2)
    vocab = Vocab()
    sched = make_schedule(dcfg.timesteps)
    clip = make_reference_clips(subject, 1, seed=seed + 5, frames=dcfg.frames)[0]
    adapters, embeds, _ = make_customization(weights, dcfg, vocab, tcfg)
    rng = np.random.default_rng(seed + 2)
    noise = rng.standard_normal((dcfg.frames, dcfg.c_lat, dcfg.h, dcfg.w))
    params = ParamSet()
    for name, tns in adapters.trainable_params():
        params.add(name, tns)
    params.add("embeds.e", embeds.e)
    t = max(1, dcfg.timesteps // 7)

    def loss_fn(p):
        return customization_loss(clip, t, noise, weights, adapters, embeds,
                                  sched, dcfg, vocab)[0]

    t0 = time.time()
    err = finite_diff_check(loss_fn, params, eps=eps, subsample=subsample,
                            seed=seed)
    ok = err <= 1e-4
    summary(command="gradcheck", max_rel_err=err, threshold=1e-4, passed=ok,
            coords=int(sum(p.data.size for _, p in params.trainable_items())
                       if subsample is None else subsample),
            seconds=round(time.time() - t0, 2))
    if not ok:
        raise SystemExit(2)


@cli.command()
@click.option("--config", "config_path", type=click.Path(exists=True))
def serve(config_path):
    """Run the HTTP service until interrupted."""
    from .service import ServiceConfig, serve as run_service

    cfg = load_config(config_path)
    run_service(ServiceConfig(**cfg.get("service", {})))


def entry(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.UsageError as exc:
        exc.show()
        sys.exit(1)
    except click.ClickException as exc:
        exc.show()
        sys.exit(2)
    except click.exceptions.Abort:
        sys.exit(1)
    sys.exit(0)


if __name__ == "__main__":
    entry()

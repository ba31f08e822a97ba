"""Agent manager: a deterministic, replayable pipeline state machine.

A run walks Designing -> DesignReview -> Boarding -> BoardReview ->
Animating -> AnimateReview -> Done, with an observer between phases that
either approves or returns feedback (bounded by max_rounds per phase).
The append-only event log is the single source of truth; artifacts are
content-addressed bytes in an ArtifactStore.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sprites
from .storyboard import (
    SceneSpec,
    SubjectProfile,
    generate_storyboard,
    parse_storyboard,
    random_scene_spec,
    render_clip,
    render_scene,
    segment_subject,
)

log = logging.getLogger(__name__)

PHASES = ("Designing", "DesignReview", "Boarding", "BoardReview",
          "Animating", "AnimateReview", "Done", "Failed")

# review phase -> the phase that produces what it reviews
PRODUCER = {"DesignReview": "Designing",
            "BoardReview": "Boarding",
            "AnimateReview": "Animating"}

NEXT_PHASE = {"Designing": "DesignReview",
              "DesignReview": "Boarding",
              "Boarding": "BoardReview",
              "BoardReview": "Animating",
              "Animating": "AnimateReview",
              "AnimateReview": "Done"}

PHASE_AGENT = {"Designing": "story_designer",
               "DesignReview": "observer",
               "Boarding": "storyboard_creator",
               "BoardReview": "observer",
               "Animating": "video_creator",
               "AnimateReview": "observer"}


# ---------------------------------------------------------------------------
# artifact store
# ---------------------------------------------------------------------------

class ArtifactStore:
    """Append-only, content-addressed byte store (sha256 hex keys).

    With a root path artifacts live on disk (plus a .meta sidecar for the
    content type); without one the store is in-memory.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, tuple[bytes, str]] = {}

    def put(self, data: bytes, content_type: str = "application/json") -> str:
        digest = hashlib.sha256(data).hexdigest()
        if self.root is None:
            self._mem[digest] = (data, content_type)
        else:
            path = self.root / digest
            if not path.exists():
                path.write_bytes(data)
                (self.root / f"{digest}.meta").write_text(
                    json.dumps({"content_type": content_type}))
        return digest

    def exists(self, digest: str) -> bool:
        if self.root is None:
            return digest in self._mem
        return (self.root / digest).exists()

    def get(self, digest: str) -> bytes:
        if not self.exists(digest):
            raise KeyError(f"unknown artifact {digest}")
        if self.root is None:
            return self._mem[digest][0]
        return (self.root / digest).read_bytes()

    def content_type(self, digest: str) -> str:
        if not self.exists(digest):
            raise KeyError(f"unknown artifact {digest}")
        if self.root is None:
            return self._mem[digest][1]
        meta = self.root / f"{digest}.meta"
        if meta.exists():
            return json.loads(meta.read_text())["content_type"]
        return "application/octet-stream"


def png_bytes(image: np.ndarray) -> bytes:
    """RGB8 PNG from a float image in [0, 1]."""
    from PIL import Image

    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def png_to_image(data: bytes) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def pgm_bytes(mask: np.ndarray) -> bytes:
    """P5 PGM with 0/255 values from a boolean mask."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    header = f"P5\n{w} {h}\n255\n".encode()
    return header + (mask.astype(np.uint8) * 255).tobytes()


def pgm_to_mask(data: bytes) -> np.ndarray:
    if not data.startswith(b"P5"):
        raise ValueError("not a P5 PGM")
    parts = data.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=h * w)
    return pixels.reshape(h, w) > 127


def rgba_png_bytes(rgba: np.ndarray) -> bytes:
    from PIL import Image

    arr = np.clip(np.round(np.asarray(rgba) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def png_to_rgba(data: bytes) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(io.BytesIO(data)).convert("RGBA"), dtype=np.float64)
    rgba = arr / 255.0
    rgba[..., 3] = (rgba[..., 3] > 0.5).astype(np.float64)  # keep alpha binary
    return rgba


# ---------------------------------------------------------------------------
# run state + event sourcing
# ---------------------------------------------------------------------------

@dataclass
class ReviewDecision:
    verdict: str                    # approve | feedback | timeout
    reviewer: str = "automatic"
    note: str = ""

    def __post_init__(self):
        if self.verdict not in ("approve", "feedback", "timeout"):
            raise ValueError(f"bad verdict {self.verdict!r}")
        if self.verdict == "feedback" and not self.note:
            raise ValueError("feedback requires a nonempty note")


@dataclass
class StoryScript:
    prompt: str
    shots: list[tuple[str, SceneSpec]]    # (free text, scene)

    def __post_init__(self):
        if len(self.shots) < 1:
            raise ValueError("a story needs at least one shot")


@dataclass
class RunState:
    run_id: str = ""
    phase: str = "Designing"
    rounds: dict = field(default_factory=dict)       # review phase -> count
    max_rounds: int = 2
    artifacts: dict = field(default_factory=dict)    # name -> digest
    events: list = field(default_factory=list)
    agent_trace: list = field(default_factory=list)  # producing-agent order
    seed: int = 0
    prompt: str = ""
    subject_id: str = ""
    n_shots: int = 0
    error: str = ""

    def view(self) -> dict:
        return {
            "run_id": self.run_id, "phase": self.phase,
            "rounds": dict(self.rounds), "max_rounds": self.max_rounds,
            "artifacts": dict(self.artifacts), "seed": self.seed,
            "prompt": self.prompt, "subject_id": self.subject_id,
            "n_shots": self.n_shots, "error": self.error,
            "agent_trace": list(self.agent_trace),
            "n_events": len(self.events),
        }


def apply_event(state: RunState, event: dict) -> None:
    """Fold one event into the state; the only way state may change."""
    kind = event["kind"]
    data = event.get("data", {})
    if kind == "run_created":
        state.run_id = data["run_id"]
        state.seed = data["seed"]
        state.max_rounds = data["max_rounds"]
        state.prompt = data["prompt"]
        state.subject_id = data["subject_id"]
        state.n_shots = data["n_shots"]
    elif kind == "phase_entered":
        state.phase = data["phase"]
        agent = PHASE_AGENT.get(data["phase"])
        if agent and agent != "observer":
            state.agent_trace.append(agent)
    elif kind == "round_incremented":
        state.rounds[data["phase"]] = data["round"]
    elif kind == "artifact_added":
        state.artifacts[data["name"]] = data["digest"]
    elif kind == "agent_signal":
        state.agent_trace.append("observer") if data["agent"] == "observer" else None
    elif kind == "decision":
        pass                                  # informational; trace via signals
    elif kind == "warning":
        pass
    elif kind == "failed":
        state.phase = "Failed"
        state.error = data["reason"]
    else:
        raise ValueError(f"unknown event kind {kind!r}")


def replay(events: list[dict]) -> RunState:
    """Reconstruct a RunState purely from its event log."""
    state = RunState()
    for event in events:
        apply_event(state, event)
    state.events = list(events)
    return state


class _Emitter:
    def __init__(self, state: RunState):
        self.state = state
        self.seq = 0

    def __call__(self, kind: str, **data):
        event = {"seq": self.seq, "ts": time.time(), "kind": kind, "data": data}
        self.seq += 1
        self.state.events.append(event)
        apply_event(self.state, event)
        return event


# ---------------------------------------------------------------------------
# agent selection rule table
# ---------------------------------------------------------------------------

class SignalError(ValueError):
    pass


def next_agent(state: RunState, agent: str, status: str = "done",
               verdict: str | None = None, chooser=None) -> str:
    """Deterministic rule table mapping (phase, completed agent) -> next agent.

    Returns the next agent id, or "terminal" when the run is over.  An
    optional chooser callable may propose an agent; its proposal is
    validated against the table and ignored when it disagrees.
    """
    phase = state.phase
    if phase in ("Done", "Failed"):
        raise SignalError(f"run already terminal in phase {phase}")
    expected = PHASE_AGENT[phase]
    if agent != expected:
        raise SignalError(f"signal from {agent!r} inconsistent with phase {phase}")
    if status != "done":
        raise SignalError(f"agent {agent!r} reported {status!r}")

    if expected != "observer":
        ruled = "observer"
    else:
        if verdict is None:
            raise SignalError("observer signal requires a verdict")
        producing = PRODUCER[phase]
        if verdict in ("approve", "timeout"):
            nxt = NEXT_PHASE[phase]
        else:  # feedback
            if state.rounds.get(phase, 0) + 1 >= state.max_rounds:
                nxt = NEXT_PHASE[phase]       # rounds exhausted: advance anyway
            else:
                nxt = producing
        ruled = "terminal" if nxt == "Done" else PHASE_AGENT[nxt]

    if chooser is not None:
        try:
            proposed = chooser(state, agent, verdict)
        except Exception as exc:  # a flaky chooser never breaks the run
            log.warning("agent chooser failed (%s); using rule table", exc)
            proposed = None
        if proposed is not None and proposed != ruled:
            log.warning("chooser proposed %r, rule table requires %r; rejected",
                        proposed, ruled)
    return ruled


# ---------------------------------------------------------------------------
# story designer backends
# ---------------------------------------------------------------------------

class TemplateDesigner:
    """Deterministic prompt expansion with a seeded action/background rotation."""

    def design(self, prompt: str, n_shots: int, seed: int) -> StoryScript:
        if n_shots < 1:
            raise ValueError("n_shots must be >= 1")
        rng = np.random.default_rng(seed)
        shots = []
        for i in range(n_shots):
            text = f"{prompt} - shot {i + 1} of {n_shots}"
            spec = random_scene_spec(rng, text=text)
            shots.append((text, spec))
        return StoryScript(prompt=prompt, shots=shots)


class ExternalChatDesigner:
    """Chat-completion backend that must answer in the scene DSL.

    Any transport/parse failure falls back to the template designer (the
    caller logs the event).  `transport` takes the request body dict and
    returns the reply text, letting tests stub the HTTP layer.
    """

    ROLE_MESSAGE = (
        "You are a story designer. Expand the user prompt into shot blocks "
        "of the scene DSL, one `shot { bg: ...; subj: <subject> at (x,y) "
        "size s; act: ...; text: \"...\" }` per shot. Reply with DSL only."
    )

    def __init__(self, url: str = "", transport=None, token: str = ""):
        self.url = url
        self.token = token
        self.transport = transport or self._http_transport
        self.fallback = TemplateDesigner()

    def _http_transport(self, body: dict) -> str:
        import httpx

        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        resp = httpx.post(self.url, json=body, headers=headers, timeout=30.0)
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    def design(self, prompt: str, n_shots: int, seed: int,
               on_fallback=None) -> StoryScript:
        if n_shots < 1:
            raise ValueError("n_shots must be >= 1")
        body = {
            "messages": [
                {"role": "system", "content": self.ROLE_MESSAGE},
                {"role": "user", "content": f"{prompt} ({n_shots} shots)"},
            ],
        }
        try:
            reply = self.transport(body)
            specs = parse_storyboard(reply)
            if len(specs) != n_shots:
                raise ValueError(f"expected {n_shots} shots, got {len(specs)}")
            return StoryScript(prompt=prompt,
                               shots=[(s.text or prompt, s) for s in specs])
        except Exception as exc:
            if on_fallback is not None:
                on_fallback(str(exc))
            log.warning("external designer failed (%s); using template", exc)
            return self.fallback.design(prompt, n_shots, seed)


# ---------------------------------------------------------------------------
# observer backends
# ---------------------------------------------------------------------------

class AlwaysApprove:
    def review(self, phase: str, payload: dict) -> ReviewDecision:
        return ReviewDecision(verdict="approve", reviewer="always-approve")


class ThresholdScorer:
    """Approve iff the configured metric reaches tau, else feedback."""

    def __init__(self, tau: float, metric: str = "storyboard-iou"):
        if metric not in ("storyboard-iou", "subject-fidelity"):
            raise ValueError(f"unknown scorer metric {metric!r}")
        self.tau = tau
        self.metric = metric

    def score(self, phase: str, payload: dict) -> float | None:
        from .metrics import subject_fidelity

        if self.metric == "storyboard-iou" and "board" in payload:
            board = payload["board"]
            vals = []
            for shot in board.shots:
                truth = segment_subject(shot.final)
                inter = np.logical_and(shot.mask, truth).sum()
                union = np.logical_or(shot.mask, truth).sum()
                vals.append(inter / union if union else 0.0)
            return float(np.mean(vals)) if vals else 0.0
        if self.metric == "subject-fidelity" and "videos" in payload:
            sprite = payload["profile"].sprite
            vals = [subject_fidelity(video, masks, sprite)
                    for video, masks in payload["videos"]]
            return float(np.mean(vals)) if vals else 0.0
        return None   # nothing to score in this phase

    def review(self, phase: str, payload: dict) -> ReviewDecision:
        score = self.score(phase, payload)
        if score is None or score >= self.tau:
            return ReviewDecision(verdict="approve", reviewer="threshold-scorer")
        return ReviewDecision(verdict="feedback", reviewer="threshold-scorer",
                              note=f"score {score:.2f} < {self.tau:.2f}")


class ScriptedObserver:
    """Replays a fixed verdict sequence; for tests and demos."""

    def __init__(self, verdicts: list[str]):
        self.verdicts = list(verdicts)
        self.i = 0

    def review(self, phase: str, payload: dict) -> ReviewDecision:
        verdict = self.verdicts[self.i] if self.i < len(self.verdicts) else "approve"
        self.i += 1
        note = "scripted feedback" if verdict == "feedback" else ""
        return ReviewDecision(verdict=verdict, reviewer="scripted", note=note)


class AlreadyDecided(RuntimeError):
    pass


class ReviewQueue:
    """Pending human reviews with first-writer-wins decisions."""

    def __init__(self):
        self._lock = threading.Condition()
        self._pending: dict[str, dict] = {}
        self._decisions: dict[str, ReviewDecision] = {}

    def enqueue(self, item: dict) -> str:
        review_id = uuid.uuid4().hex[:12]
        with self._lock:
            self._pending[review_id] = {"review_id": review_id, **item}
            self._lock.notify_all()
        return review_id

    def pending(self) -> list[dict]:
        with self._lock:
            return [dict(v) for v in self._pending.values()]

    def decide(self, review_id: str, verdict: str, note: str = "",
               reviewer: str = "human") -> ReviewDecision:
        decision = ReviewDecision(verdict=verdict, reviewer=reviewer, note=note)
        with self._lock:
            if review_id in self._decisions:
                raise AlreadyDecided(review_id)
            if review_id not in self._pending:
                raise KeyError(f"unknown review {review_id}")
            self._decisions[review_id] = decision
            del self._pending[review_id]
            self._lock.notify_all()
        return decision

    def wait(self, review_id: str, timeout: float) -> ReviewDecision:
        deadline = time.monotonic() + timeout
        with self._lock:
            while review_id not in self._decisions:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    self._pending.pop(review_id, None)
                    return ReviewDecision(verdict="timeout", reviewer="timeout")
                self._lock.wait(remaining)
            return self._decisions[review_id]


class HumanQueue:
    """Blocks each review on a shared ReviewQueue until decided or timeout."""

    def __init__(self, queue: ReviewQueue, timeout: float = 60.0):
        self.queue = queue
        self.timeout = timeout

    def review(self, phase: str, payload: dict) -> ReviewDecision:
        item = {
            "run_id": payload.get("run_id", ""),
            "phase": phase,
            "round": payload.get("round", 0),
            "artifacts": payload.get("artifact_refs", {}),
            "shot_texts": payload.get("shot_texts", []),
            "deadline": time.time() + self.timeout,
        }
        review_id = self.queue.enqueue(item)
        return self.queue.wait(review_id, self.timeout)


# ---------------------------------------------------------------------------
# run configuration and the pipeline executor
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    n_shots: int = 2
    seed: int = 0
    max_rounds: int = 2
    designer: object = None          # TemplateDesigner by default
    observer: object = None          # AlwaysApprove by default
    animator: str = "procedural"     # procedural | diffusion
    frames: int = 8
    sample_steps: int = 10
    model: tuple | None = None       # (weights, config, vocab, sched[, adapters, embeds])

    def __post_init__(self):
        if self.n_shots < 1:
            raise ValueError("n_shots must be >= 1")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")
        if self.animator not in ("procedural", "diffusion"):
            raise ValueError(f"unknown animator {self.animator!r}")
        if self.animator == "diffusion" and self.model is None:
            raise ValueError("diffusion animator needs model weights")
        if self.designer is None:
            self.designer = TemplateDesigner()
        if self.observer is None:
            self.observer = AlwaysApprove()


def _design(state, config, emit, store, sub_seed):
    script = config.designer.design(state.prompt, config.n_shots,
                                    config.seed + sub_seed)
    doc = {
        "prompt": script.prompt,
        "shots": [{"text": t, "dsl": s.to_dsl()} for t, s in script.shots],
    }
    digest = store.put(json.dumps(doc, sort_keys=True).encode())
    emit("artifact_added", name="script", digest=digest)
    return script


def _board(state, config, emit, store, profile, script):
    board = generate_storyboard([s for _, s in script.shots], profile)
    if board.failures:
        raise RuntimeError(f"storyboard failures: {board.failures}")
    shot_docs = []
    for i, shot in enumerate(board.shots):
        img_d = store.put(png_bytes(shot.final), "image/png")
        mask_d = store.put(pgm_bytes(shot.mask), "image/x-portable-graymap")
        emit("artifact_added", name=f"board/shot{i}.png", digest=img_d)
        emit("artifact_added", name=f"board/shot{i}.pgm", digest=mask_d)
        shot_docs.append({"image": img_d, "mask": mask_d,
                          "dsl": shot.spec.to_dsl() if shot.spec else ""})
    digest = store.put(json.dumps({"shots": shot_docs}, sort_keys=True).encode())
    emit("artifact_added", name="storyboard", digest=digest)
    return board


def _animate(state, config, emit, store, profile, script, board):
    videos = []
    for i, (shot, (_, spec)) in enumerate(zip(board.shots, script.shots)):
        if config.animator == "procedural":
            video, masks = render_clip(spec, profile.sprite, frames=config.frames)
        else:
            from .diffusion import sample_shot

            weights, dcfg, vocab, sched, *rest = config.model
            adapters = rest[0] if rest else None
            embeds = rest[1] if len(rest) > 1 else None
            ids = vocab.encode(spec.prompt_tokens("<subject>" if embeds else
                                                  profile.subject_id))
            video = sample_shot(weights, dcfg, shot.final, ids, sched,
                                steps=config.sample_steps,
                                seed=config.seed + 1000 + i,
                                adapters=adapters, embeds=embeds)
            masks = np.stack([segment_subject(f) for f in video])
        frame_docs = []
        for f in range(video.shape[0]):
            d = store.put(png_bytes(video[f]), "image/png")
            emit("artifact_added", name=f"video{i}/frame{f}.png", digest=d)
            frame_docs.append(d)
        videos.append((video, masks))
        digest = store.put(json.dumps({"frames": frame_docs}, sort_keys=True).encode())
        emit("artifact_added", name=f"video{i}", digest=digest)
    digest = store.put(json.dumps(
        {"videos": [state.artifacts[f"video{i}"] for i in range(len(videos))]},
        sort_keys=True).encode())
    emit("artifact_added", name="videos", digest=digest)
    return videos


def run_pipeline(prompt: str, profile: SubjectProfile | None, config: RunConfig,
                 store: ArtifactStore | None = None,
                 state: RunState | None = None) -> RunState:
    """Execute design -> board -> animate with reviews; returns terminal state."""
    store = store if store is not None else ArtifactStore()
    state = state if state is not None else RunState()
    emit = _Emitter(state)
    emit("run_created", run_id=state.run_id or uuid.uuid4().hex[:12],
         seed=config.seed, max_rounds=config.max_rounds, prompt=prompt,
         subject_id=profile.subject_id if profile else "", n_shots=config.n_shots)

    if profile is None:
        emit("failed", reason="missing subject profile")
        return state

    script = board = videos = None
    produced: dict[str, object] = {}
    emit("phase_entered", phase="Designing")
    try:
        while state.phase not in ("Done", "Failed"):
            phase = state.phase
            agent = PHASE_AGENT[phase]
            sub_seed = state.rounds.get(NEXT_PHASE[phase], 0)
            if agent != "observer":
                if phase == "Designing":
                    script = _design(state, config, emit, store, sub_seed)
                    produced = {"script": script}
                elif phase == "Boarding":
                    board = _board(state, config, emit, store, profile, script)
                    produced = {"board": board}
                else:
                    videos = _animate(state, config, emit, store, profile,
                                      script, board)
                    produced = {"videos": videos}
                emit("agent_signal", agent=agent, status="done")
                nxt = next_agent(state, agent)
                assert nxt == "observer"
                emit("phase_entered", phase=NEXT_PHASE[phase])
            else:
                payload = {
                    "run_id": state.run_id,
                    "round": state.rounds.get(phase, 0),
                    "profile": profile,
                    "artifact_refs": dict(state.artifacts),
                    "shot_texts": [t for t, _ in script.shots] if script else [],
                    **produced,
                }
                decision = config.observer.review(phase, payload)
                emit("agent_signal", agent="observer", status="done")
                emit("decision", phase=phase, verdict=decision.verdict,
                     reviewer=decision.reviewer, note=decision.note)
                if decision.verdict == "timeout":
                    emit("warning", message=f"{phase} timed out; proceeding")
                nxt_agent = next_agent(state, "observer", verdict=decision.verdict)
                if decision.verdict == "feedback":
                    emit("round_incremented", phase=phase,
                         round=state.rounds.get(phase, 0) + 1)
                if nxt_agent == "terminal":
                    emit("phase_entered", phase="Done")
                elif decision.verdict == "feedback" and \
                        state.rounds[phase] < state.max_rounds:
                    emit("phase_entered", phase=PRODUCER[phase])
                else:
                    emit("phase_entered", phase=NEXT_PHASE[phase])
    except Exception as exc:
        emit("failed", reason=str(exc))
    return state

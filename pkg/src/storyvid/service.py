"""HTTP facade over runs, subjects, artifacts, and the human review queue.

All state lives in the run ledger (event logs) and the artifact store;
request handlers are stateless.  Run execution happens on background
threads bounded by `max_concurrent_runs` (excess POST /runs -> 429).
"""

from __future__ import annotations

import json
import logging
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI, File, Form, UploadFile
from fastapi.responses import JSONResponse, Response

from . import sprites
from .orchestrator import (
    AlreadyDecided,
    AlwaysApprove,
    ArtifactStore,
    HumanQueue,
    ReviewQueue,
    RunConfig,
    RunState,
    ThresholdScorer,
    png_to_rgba,
    replay,
    rgba_png_bytes,
    run_pipeline,
)
from .storyboard import SubjectProfile

log = logging.getLogger(__name__)


@dataclass
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8400
    store_path: str = ""                 # empty -> in-memory
    max_concurrent_runs: int = 2
    review_timeout: float = 60.0

    def __post_init__(self):
        if not (0 < self.port < 65536):
            raise ValueError(f"invalid port {self.port}")
        if self.max_concurrent_runs < 1:
            raise ValueError("max_concurrent_runs must be >= 1")


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status,
                        content={"code": code, "message": message})


class ServiceState:
    def __init__(self, config: ServiceConfig):
        self.config = config
        root = Path(config.store_path) if config.store_path else None
        self.store = ArtifactStore(root / "artifacts" if root else None)
        self.queue = ReviewQueue()
        self.runs: dict[str, RunState] = {}
        self.subjects: dict[str, dict] = {}
        self.lock = threading.Lock()
        self.active = 0
        self.threads: list[threading.Thread] = []
        self._load()

    # -- persistence -------------------------------------------------------
    def _runs_dir(self) -> Path | None:
        if not self.config.store_path:
            return None
        d = Path(self.config.store_path) / "runs"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def _subjects_file(self) -> Path | None:
        if not self.config.store_path:
            return None
        return Path(self.config.store_path) / "subjects.json"

    def _load(self):
        d = self._runs_dir()
        if d:
            for path in sorted(d.glob("*.json")):
                events = json.loads(path.read_text())
                state = replay(events)
                self.runs[state.run_id] = state
        sf = self._subjects_file()
        if sf and sf.exists():
            self.subjects = json.loads(sf.read_text())

    def persist_run(self, state: RunState):
        d = self._runs_dir()
        if d:
            (d / f"{state.run_id}.json").write_text(json.dumps(state.events))

    def persist_subjects(self):
        sf = self._subjects_file()
        if sf:
            sf.write_text(json.dumps(self.subjects, sort_keys=True))

    # -- subjects ----------------------------------------------------------
    def profile_for(self, subject_id: str) -> SubjectProfile | None:
        entry = self.subjects.get(subject_id)
        if entry is None:
            return None
        rgba = png_to_rgba(self.store.get(entry["sprite"]))
        return SubjectProfile(subject_id=subject_id, sprite=rgba)

    # -- runs --------------------------------------------------------------
    def start_run(self, prompt: str, subject_id: str, n_shots: int,
                  observer: str, seed: int) -> RunState | None:
        """Returns the new RunState, or None when at capacity."""
        with self.lock:
            if self.active >= self.config.max_concurrent_runs:
                return None
            self.active += 1
        if observer == "always-approve":
            backend = AlwaysApprove()
        elif observer.startswith("threshold:"):
            backend = ThresholdScorer(float(observer.split(":", 1)[1]))
        elif observer == "human":
            backend = HumanQueue(self.queue, timeout=self.config.review_timeout)
        else:
            with self.lock:
                self.active -= 1
            raise ValueError(f"unknown observer {observer!r}")
        state = RunState(run_id=uuid.uuid4().hex[:12])
        self.runs[state.run_id] = state
        profile = self.profile_for(subject_id)
        config = RunConfig(n_shots=n_shots, seed=seed, observer=backend)

        def work():
            try:
                run_pipeline(prompt, profile, config, store=self.store,
                             state=state)
                self.persist_run(state)
            finally:
                with self.lock:
                    self.active -= 1

        thread = threading.Thread(target=work, daemon=True)
        self.threads.append(thread)
        thread.start()
        return state


def create_app(config: ServiceConfig | None = None) -> FastAPI:
    config = config or ServiceConfig()
    app = FastAPI(title="storyvid service")
    app.state.svc = svc = ServiceState(config)

    @app.post("/subjects")
    async def add_subject(subject_id: str = Form(...),
                          sprite: UploadFile = File(...)):
        try:
            rgba = png_to_rgba(await sprite.read())
            SubjectProfile(subject_id=subject_id, sprite=rgba)  # validates
        except Exception as exc:
            return _error(400, "bad_sprite", str(exc))
        digest = svc.store.put(rgba_png_bytes(rgba), "image/png")
        svc.subjects[subject_id] = {"sprite": digest}
        svc.persist_subjects()
        return {"subject_id": subject_id, "sprite": digest}

    @app.get("/subjects")
    def list_subjects():
        return {"subjects": [{"subject_id": k, **v}
                             for k, v in sorted(svc.subjects.items())]}

    @app.post("/runs")
    def create_run(body: dict):
        for key in ("prompt", "subject_id"):
            if key not in body:
                return _error(400, "bad_request", f"missing field {key!r}")
        try:
            state = svc.start_run(body["prompt"], body["subject_id"],
                                  int(body.get("shots", 2)),
                                  body.get("observer", "always-approve"),
                                  int(body.get("seed", 0)))
        except ValueError as exc:
            return _error(400, "bad_request", str(exc))
        if state is None:
            return _error(429, "over_capacity",
                          f"at most {config.max_concurrent_runs} concurrent runs")
        return {"run_id": state.run_id}

    def _run_or_none(run_id: str):
        return svc.runs.get(run_id)

    @app.get("/runs/{run_id}")
    def get_run(run_id: str):
        state = _run_or_none(run_id)
        if state is None:
            return _error(404, "not_found", f"unknown run {run_id}")
        return state.view()

    @app.get("/runs/{run_id}/events")
    def get_events(run_id: str):
        state = _run_or_none(run_id)
        if state is None:
            return _error(404, "not_found", f"unknown run {run_id}")
        return {"events": state.events}

    @app.get("/runs/{run_id}/artifacts")
    def get_artifacts(run_id: str):
        state = _run_or_none(run_id)
        if state is None:
            return _error(404, "not_found", f"unknown run {run_id}")
        return {"artifacts": [
            {"name": name, "digest": digest,
             "content_type": svc.store.content_type(digest)}
            for name, digest in sorted(state.artifacts.items())
        ]}

    @app.get("/artifacts/{digest}")
    def get_artifact(digest: str):
        if not svc.store.exists(digest):
            return _error(404, "not_found", f"unknown artifact {digest}")
        return Response(content=svc.store.get(digest),
                        media_type=svc.store.content_type(digest))

    @app.get("/reviews/pending")
    def pending_reviews():
        return {"pending": svc.queue.pending()}

    @app.post("/reviews/{review_id}")
    def decide_review(review_id: str, body: dict):
        verdict = body.get("verdict", "")
        note = body.get("note", "")
        try:
            decision = svc.queue.decide(review_id, verdict, note=note,
                                        reviewer=body.get("reviewer", "human"))
        except AlreadyDecided:
            return _error(409, "already_decided",
                          f"review {review_id} was already decided")
        except KeyError:
            return _error(404, "not_found", f"unknown review {review_id}")
        except ValueError as exc:
            return _error(400, "bad_request", str(exc))
        return {"review_id": review_id, "verdict": decision.verdict}

    return app


def serve(config: ServiceConfig):
    """Run until interrupted; raises on bind failure with a diagnostic."""
    import uvicorn

    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")

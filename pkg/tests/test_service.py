import io
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from storyvid import sprites
from storyvid.orchestrator import rgba_png_bytes
from storyvid.service import ServiceConfig, create_app


def client(**kw):
    return TestClient(create_app(ServiceConfig(**kw)))


def add_crab(c, subject_id="crab"):
    data = rgba_png_bytes(sprites.sprite("crab"))
    r = c.post("/subjects", data={"subject_id": subject_id},
               files={"sprite": ("crab.png", io.BytesIO(data), "image/png")})
    assert r.status_code == 200, r.text
    return r.json()


def wait_phase(c, run_id, phases, timeout=30.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        view = c.get(f"/runs/{run_id}").json()
        if view["phase"] in phases:
            return view
        time.sleep(0.02)
    raise TimeoutError(f"run never reached {phases}: {view}")


def wait_pending(c, timeout=10.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        items = c.get("/reviews/pending").json()["pending"]
        if items:
            return items
        time.sleep(0.02)
    raise TimeoutError("no pending review appeared")


class TestSubjects:
    def test_add_and_list(self):
        c = client()
        out = add_crab(c)
        listed = c.get("/subjects").json()["subjects"]
        assert listed == [{"subject_id": "crab", "sprite": out["sprite"]}]
        # sprite bytes served back with the right content type
        r = c.get(f"/artifacts/{out['sprite']}")
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"

    def test_bad_sprite_rejected(self):
        c = client()
        r = c.post("/subjects", data={"subject_id": "x"},
                   files={"sprite": ("x.png", io.BytesIO(b"not a png"), "image/png")})
        assert r.status_code == 400
        assert set(r.json()) == {"code", "message"}


class TestRuns:
    def test_happy_path(self):
        c = client()
        add_crab(c)
        r = c.post("/runs", json={"prompt": "a quest", "subject_id": "crab",
                                  "shots": 1, "seed": 3})
        run_id = r.json()["run_id"]
        view = wait_phase(c, run_id, ("Done", "Failed"))
        assert view["phase"] == "Done"

        events = c.get(f"/runs/{run_id}/events").json()["events"]
        assert events[0]["kind"] == "run_created"
        arts = c.get(f"/runs/{run_id}/artifacts").json()["artifacts"]
        names = {a["name"] for a in arts}
        assert {"script", "storyboard", "videos"} <= names
        board_png = next(a for a in arts if a["name"] == "board/shot0.png")
        r = c.get(f"/artifacts/{board_png['digest']}")
        assert r.headers["content-type"] == "image/png"
        mask = next(a for a in arts if a["name"].endswith(".pgm"))
        assert mask["content_type"] == "image/x-portable-graymap"

    def test_missing_subject_fails(self):
        c = client()
        r = c.post("/runs", json={"prompt": "p", "subject_id": "ghost"})
        run_id = r.json()["run_id"]
        view = wait_phase(c, run_id, ("Done", "Failed"))
        assert view["phase"] == "Failed"
        assert "subject" in view["error"]

    def test_unknown_run_404(self):
        c = client()
        r = c.get("/runs/nope")
        assert r.status_code == 404
        assert r.json()["code"] == "not_found"

    def test_bad_request_shapes(self):
        c = client()
        assert c.post("/runs", json={"prompt": "p"}).status_code == 400
        add_crab(c)
        r = c.post("/runs", json={"prompt": "p", "subject_id": "crab",
                                  "observer": "what"})
        assert r.status_code == 400

    def test_over_capacity_429(self):
        c = client(max_concurrent_runs=1, review_timeout=10.0)
        add_crab(c)
        r1 = c.post("/runs", json={"prompt": "p", "subject_id": "crab",
                                   "shots": 1, "observer": "human"})
        assert r1.status_code == 200
        wait_pending(c)       # first run is now parked on a human review
        r2 = c.post("/runs", json={"prompt": "p", "subject_id": "crab"})
        assert r2.status_code == 429
        assert r2.json()["code"] == "over_capacity"
        # free the slot
        items = c.get("/reviews/pending").json()["pending"]
        for item in items:
            c.post(f"/reviews/{item['review_id']}", json={"verdict": "timeout"})


class TestHumanReviews:
    def test_approve_advances_and_409_on_second_decision(self):
        c = client(review_timeout=20.0)
        add_crab(c)
        run_id = c.post("/runs", json={"prompt": "p", "subject_id": "crab",
                                       "shots": 1, "observer": "human",
                                       "seed": 1}).json()["run_id"]
        item = wait_pending(c)[0]
        assert item["phase"] == "DesignReview"
        assert item["run_id"] == run_id

        ok = c.post(f"/reviews/{item['review_id']}", json={"verdict": "approve"})
        assert ok.status_code == 200
        dup = c.post(f"/reviews/{item['review_id']}", json={"verdict": "approve"})
        assert dup.status_code == 409

        # the run proceeds to the next review
        nxt = wait_pending(c)[0]
        assert nxt["phase"] == "BoardReview"
        c.post(f"/reviews/{nxt['review_id']}", json={"verdict": "approve"})
        last = wait_pending(c)[0]
        assert last["phase"] == "AnimateReview"
        c.post(f"/reviews/{last['review_id']}", json={"verdict": "approve"})
        assert wait_phase(c, run_id, ("Done",))["phase"] == "Done"

    def test_feedback_reenters_with_round_increment(self):
        c = client(review_timeout=20.0)
        add_crab(c)
        run_id = c.post("/runs", json={"prompt": "p", "subject_id": "crab",
                                       "shots": 1, "observer": "human",
                                       "seed": 1}).json()["run_id"]
        first = wait_pending(c)[0]
        c.post(f"/reviews/{first['review_id']}",
               json={"verdict": "feedback", "note": "rework the opening"})
        second = wait_pending(c)[0]
        assert second["phase"] == "DesignReview"
        assert second["round"] == 1
        for _ in range(4):   # approve everything remaining
            items = c.get("/reviews/pending").json()["pending"]
            if not items:
                view = c.get(f"/runs/{run_id}").json()
                if view["phase"] in ("Done", "Failed"):
                    break
                time.sleep(0.05)
                continue
            c.post(f"/reviews/{items[0]['review_id']}", json={"verdict": "approve"})
        view = wait_phase(c, run_id, ("Done", "Failed"))
        assert view["phase"] == "Done"
        assert view["rounds"]["DesignReview"] == 1

    def test_feedback_without_note_rejected(self):
        c = client(review_timeout=20.0)
        add_crab(c)
        c.post("/runs", json={"prompt": "p", "subject_id": "crab",
                              "shots": 1, "observer": "human"})
        item = wait_pending(c)[0]
        r = c.post(f"/reviews/{item['review_id']}", json={"verdict": "feedback"})
        assert r.status_code == 400
        # still pending: a bad request must not consume the decision
        r2 = c.post(f"/reviews/{item['review_id']}", json={"verdict": "approve"})
        assert r2.status_code == 200


class TestPersistence:
    def test_restart_reloads_terminal_runs(self, tmp_path):
        cfg = dict(store_path=str(tmp_path))
        c = client(**cfg)
        add_crab(c)
        run_id = c.post("/runs", json={"prompt": "p", "subject_id": "crab",
                                       "shots": 1, "seed": 9}).json()["run_id"]
        before = wait_phase(c, run_id, ("Done",))

        c2 = client(**cfg)    # fresh service over the same store
        after = c2.get(f"/runs/{run_id}").json()
        assert after == before
        assert c2.get("/subjects").json()["subjects"][0]["subject_id"] == "crab"
        # artifacts survive too
        digest = after["artifacts"]["script"]
        assert c2.get(f"/artifacts/{digest}").status_code == 200

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ServiceConfig(port=0)
        with pytest.raises(ValueError):
            ServiceConfig(max_concurrent_runs=0)

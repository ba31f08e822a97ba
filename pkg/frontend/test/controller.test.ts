import { describe, expect, it, vi } from "vitest";

import { ApiClient, PendingReview } from "../src/api.js";
import {
  DecisionGate,
  applyPoll,
  applyPollFailure,
  canSubmit,
  initialState,
  secondsLeft,
  selectItem,
  toggleMasks,
} from "../src/controller.js";

function item(id: string, phase = "BoardReview"): PendingReview {
  return {
    review_id: id,
    run_id: "run1",
    phase,
    round: 0,
    artifacts: {},
    shot_texts: [],
    deadline: 1000,
  };
}

function fakeFetch(status: number, body: unknown): typeof fetch {
  return vi.fn(async () => ({
    ok: status >= 200 && status < 300,
    status,
    json: async () => body,
  })) as unknown as typeof fetch;
}

describe("canSubmit", () => {
  it("approve never needs a note", () => {
    expect(canSubmit("approve", "")).toBe(true);
  });
  it("feedback requires a nonempty note", () => {
    expect(canSubmit("feedback", "")).toBe(false);
    expect(canSubmit("feedback", "   ")).toBe(false);
    expect(canSubmit("feedback", "redo shot 2")).toBe(true);
  });
});

describe("poll application", () => {
  it("replaces the queue with server truth", () => {
    let state = applyPoll(initialState(), [item("a"), item("b")]);
    expect(state.items.map((i) => i.review_id)).toEqual(["a", "b"]);
    // a decided-elsewhere item disappears on the next poll
    state = applyPoll(state, [item("b")]);
    expect(state.items.map((i) => i.review_id)).toEqual(["b"]);
  });

  it("drops a selection that left the queue", () => {
    let state = applyPoll(initialState(), [item("a"), item("b")]);
    state = selectItem(state, "a");
    state = applyPoll(state, [item("b")]);
    expect(state.selectedId).toBeNull();
  });

  it("keeps a still-pending selection", () => {
    let state = applyPoll(initialState(), [item("a")]);
    state = selectItem(state, "a");
    state = applyPoll(state, [item("a")]);
    expect(state.selectedId).toBe("a");
  });

  it("failure sets a banner, success clears it", () => {
    let state = applyPollFailure(initialState(), "ECONNREFUSED");
    expect(state.banner).toContain("unreachable");
    state = applyPoll(state, []);
    expect(state.banner).toBeNull();
  });
});

describe("mask toggle and countdown", () => {
  it("toggles without touching items", () => {
    let state = applyPoll(initialState(), [item("a")]);
    const before = state.items;
    state = toggleMasks(state);
    expect(state.showMasks).toBe(true);
    expect(state.items).toBe(before);
  });

  it("countdown clamps at zero", () => {
    const i = item("a");
    expect(secondsLeft(i, 990_000)).toBe(10);
    expect(secondsLeft(i, 2_000_000)).toBe(0);
  });
});

describe("DecisionGate", () => {
  it("submits approve and reports ok", async () => {
    const f = fakeFetch(200, { review_id: "a", verdict: "approve" });
    const gate = new DecisionGate(new ApiClient("", f));
    expect(await gate.submit("a", "approve", "")).toEqual({ status: "ok" });
    expect(f).toHaveBeenCalledTimes(1);
  });

  it("maps 409 to conflict", async () => {
    const f = fakeFetch(409, { code: "already_decided", message: "nope" });
    const gate = new DecisionGate(new ApiClient("", f));
    expect(await gate.submit("a", "approve", "")).toEqual({
      status: "conflict",
    });
  });

  it("double submit while in flight sends one request", async () => {
    let release: (v: unknown) => void = () => {};
    const blocked = new Promise((r) => (release = r));
    const f = vi.fn(async () => {
      await blocked;
      return { ok: true, status: 200, json: async () => ({}) };
    }) as unknown as typeof fetch;
    const gate = new DecisionGate(new ApiClient("", f));

    const first = gate.submit("a", "approve", "");
    const second = await gate.submit("a", "approve", "");
    expect(second).toEqual({ status: "dropped" });
    release(null);
    expect(await first).toEqual({ status: "ok" });
    expect(f).toHaveBeenCalledTimes(1);
  });

  it("rejects feedback without a note before any request", async () => {
    const f = fakeFetch(200, {});
    const gate = new DecisionGate(new ApiClient("", f));
    const result = await gate.submit("a", "feedback", " ");
    expect(result.status).toBe("error");
    expect(f).not.toHaveBeenCalled();
  });

  it("network failure surfaces as error, not an exception", async () => {
    const f = vi.fn(async () => {
      throw new Error("connection reset");
    }) as unknown as typeof fetch;
    const gate = new DecisionGate(new ApiClient("", f));
    const result = await gate.submit("a", "approve", "");
    expect(result.status).toBe("error");
  });
});

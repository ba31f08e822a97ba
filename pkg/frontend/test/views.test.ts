import { describe, expect, it } from "vitest";

import { PendingReview } from "../src/api.js";
import { applyPoll, initialState, selectItem, toggleMasks } from "../src/controller.js";
import {
  escapeHtml,
  groupArtifacts,
  renderDetail,
  renderQueue,
} from "../src/views.js";

const url = (d: string) => `/artifacts/${d}`;

function boardItem(): PendingReview {
  return {
    review_id: "r1",
    run_id: "runA",
    phase: "BoardReview",
    round: 1,
    artifacts: {
      "board/shot0.png": "h0",
      "board/shot0.pgm": "m0",
      "board/shot1.png": "h1",
      "board/shot1.pgm": "m1",
      storyboard: "hj",
    },
    shot_texts: ["the <hero> arrives", "a storm"],
    deadline: 0,
  };
}

describe("renderQueue", () => {
  it("explicit empty state", () => {
    expect(renderQueue(initialState(), 0)).toContain("No pending reviews");
  });

  it("renders phase badge and round per item", () => {
    const state = applyPoll(initialState(), [boardItem()]);
    const html = renderQueue(state, 0);
    expect(html).toContain("BoardReview");
    expect(html).toContain("round 1");
    expect(html).toContain('data-review="r1"');
  });
});

describe("renderDetail", () => {
  it("prompts for a selection when nothing selected", () => {
    const state = applyPoll(initialState(), [boardItem()]);
    expect(renderDetail(state, url)).toContain("Select a pending review");
  });

  it("shows one thumbnail per storyboard shot", () => {
    const state = selectItem(applyPoll(initialState(), [boardItem()]), "r1");
    const html = renderDetail(state, url);
    expect(html.match(/class="board"/g)?.length).toBe(2);
    expect(html).toContain("/artifacts/h0");
    expect(html).toContain("/artifacts/h1");
  });

  it("mask toggle flips a class, image srcs unchanged", () => {
    let state = selectItem(applyPoll(initialState(), [boardItem()]), "r1");
    const off = renderDetail(state, url);
    state = toggleMasks(state);
    const on = renderDetail(state, url);
    expect(off).toContain("masks-off");
    expect(on).toContain("masks-on");
    const srcs = (html: string) =>
      [...html.matchAll(/src="([^"]+)"/g)].map((m) => m[1]).sort();
    expect(srcs(on)).toEqual(srcs(off)); // no refetching, same artifacts
  });

  it("renders a filmstrip for video artifacts", () => {
    const item = boardItem();
    item.phase = "AnimateReview";
    item.artifacts = {
      "video0/frame0.png": "f0",
      "video0/frame1.png": "f1",
      "video0/frame2.png": "f2",
      video0: "vj",
    };
    const state = selectItem(applyPoll(initialState(), [item]), "r1");
    const html = renderDetail(state, url);
    expect(html.match(/class="frame"/g)?.length).toBe(3);
    expect(html).toContain('data-video="video0"');
  });

  it("escapes shot text", () => {
    const state = selectItem(applyPoll(initialState(), [boardItem()]), "r1");
    const html = renderDetail(state, url);
    expect(html).toContain("the &lt;hero&gt; arrives");
    expect(html).not.toContain("the <hero>");
  });

  it("feedback button starts disabled", () => {
    const state = selectItem(applyPoll(initialState(), [boardItem()]), "r1");
    expect(renderDetail(state, url)).toContain(
      `<button class="feedback" disabled>`,
    );
  });
});

describe("groupArtifacts", () => {
  it("splits board images, masks, video frames, and the rest", () => {
    const groups = groupArtifacts({
      "board/shot0.png": "a",
      "board/shot0.pgm": "b",
      "video1/frame0.png": "c",
      "video1/frame1.png": "d",
      script: "e",
    });
    expect(groups.boardImages).toEqual([["board/shot0.png", "a"]]);
    expect(groups.boardMasks).toEqual([["board/shot0.pgm", "b"]]);
    expect(groups.videoFrames.get("video1")?.length).toBe(2);
    expect(groups.other).toEqual([["script", "e"]]);
  });
});

describe("escapeHtml", () => {
  it("handles the usual suspects", () => {
    expect(escapeHtml(`<a href="x">&`)).toBe(
      "&lt;a href=&quot;x&quot;&gt;&amp;",
    );
  });
});

// HTML renderers: pure functions from state to markup strings so they can
// be tested without a browser.  main.ts owns the actual DOM updates.

import { PendingReview } from "./api.js";
import { ConsoleState, secondsLeft } from "./controller.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

interface ArtifactGroups {
  boardImages: [string, string][]; // [name, digest] ordered by shot index
  boardMasks: [string, string][];
  videoFrames: Map<string, [string, string][]>; // videoN -> frames
  other: [string, string][];
}

export function groupArtifacts(
  artifacts: Record<string, string>,
): ArtifactGroups {
  const groups: ArtifactGroups = {
    boardImages: [],
    boardMasks: [],
    videoFrames: new Map(),
    other: [],
  };
  const names = Object.keys(artifacts).sort();
  for (const name of names) {
    const digest = artifacts[name];
    const video = name.match(/^(video\d+)\/frame\d+\.png$/);
    if (name.startsWith("board/") && name.endsWith(".png")) {
      groups.boardImages.push([name, digest]);
    } else if (name.startsWith("board/") && name.endsWith(".pgm")) {
      groups.boardMasks.push([name, digest]);
    } else if (video) {
      const frames = groups.videoFrames.get(video[1]) ?? [];
      frames.push([name, digest]);
      groups.videoFrames.set(video[1], frames);
    } else {
      groups.other.push([name, digest]);
    }
  }
  return groups;
}

export function renderBanner(state: ConsoleState): string {
  if (!state.banner) return "";
  return `<div class="banner error">${escapeHtml(state.banner)}</div>`;
}

export function renderQueue(state: ConsoleState, nowMs: number): string {
  if (state.items.length === 0) {
    return `<p class="empty">No pending reviews</p>`;
  }
  const rows = state.items.map((item) => {
    const selected = item.review_id === state.selectedId ? " selected" : "";
    return (
      `<li class="queue-item${selected}" data-review="${item.review_id}">` +
      `<span class="badge">${escapeHtml(item.phase)}</span>` +
      `<span class="run">${escapeHtml(item.run_id)}</span>` +
      `<span class="round">round ${item.round}</span>` +
      `<span class="countdown">${secondsLeft(item, nowMs)}s</span>` +
      `</li>`
    );
  });
  return `<ul class="queue">${rows.join("")}</ul>`;
}

export function renderDetail(
  state: ConsoleState,
  artifactUrl: (digest: string) => string,
): string {
  const item = state.items.find((i) => i.review_id === state.selectedId);
  if (!item) {
    return `<p class="hint">Select a pending review</p>`;
  }
  const groups = groupArtifacts(item.artifacts);
  const parts: string[] = [
    `<h2>${escapeHtml(item.phase)} — run ${escapeHtml(item.run_id)}</h2>`,
  ];

  if (item.shot_texts.length > 0) {
    const texts = item.shot_texts
      .map((t, i) => `<li>shot ${i + 1}: ${escapeHtml(t)}</li>`)
      .join("");
    parts.push(`<ol class="shot-texts">${texts}</ol>`);
  }

  if (groups.boardImages.length > 0) {
    const maskState = state.showMasks ? "masks-on" : "masks-off";
    const cells = groups.boardImages
      .map(([name, digest], i) => {
        const mask = groups.boardMasks[i];
        const overlay = mask
          ? `<img class="mask-overlay" alt="${escapeHtml(mask[0])}"` +
            ` src="${artifactUrl(mask[1])}">`
          : "";
        return (
          `<figure class="board-cell">` +
          `<img class="board" alt="${escapeHtml(name)}"` +
          ` src="${artifactUrl(digest)}">${overlay}</figure>`
        );
      })
      .join("");
    parts.push(
      `<button class="mask-toggle">masks</button>` +
        `<div class="board-grid ${maskState}">${cells}</div>`,
    );
  }

  for (const [video, frames] of groups.videoFrames) {
    const strip = frames
      .map(
        ([name, digest]) =>
          `<img class="frame" alt="${escapeHtml(name)}"` +
          ` src="${artifactUrl(digest)}">`,
      )
      .join("");
    parts.push(`<div class="filmstrip" data-video="${video}">${strip}</div>`);
  }

  parts.push(
    `<div class="decide" data-review="${item.review_id}">` +
      `<button class="approve">Approve</button>` +
      `<textarea class="note" placeholder="feedback note"></textarea>` +
      `<button class="feedback" disabled>Send feedback</button>` +
      `</div>`,
  );
  return parts.join("\n");
}

export function renderItemDigest(item: PendingReview): string {
  // short label used by notifications / conflict refreshes
  return `${item.phase}@${item.run_id} (round ${item.round})`;
}

// Bootstrap: wires the poll loop, queue list, detail pane, and decision
// buttons to the DOM.  All rendering goes through views.ts.

import { ApiClient } from "./api.js";
import {
  ConsoleState,
  DecisionGate,
  POLL_INTERVAL_MS,
  applyPoll,
  applyPollFailure,
  initialState,
  selectItem,
  toggleMasks,
} from "./controller.js";
import { renderBanner, renderDetail, renderQueue } from "./views.js";

const api = new ApiClient("");
const gate = new DecisionGate(api);
let state: ConsoleState = initialState();

function el(id: string): HTMLElement {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node;
}

function render() {
  el("banner").innerHTML = renderBanner(state);
  el("queue").innerHTML = renderQueue(state, Date.now());
  el("detail").innerHTML = renderDetail(state, (d) => api.artifactUrl(d));
  wireDetail();
}

function wireDetail() {
  el("queue")
    .querySelectorAll<HTMLElement>(".queue-item")
    .forEach((node) => {
      node.onclick = () => {
        state = selectItem(state, node.dataset.review ?? null);
        render();
      };
    });
  const toggle = el("detail").querySelector<HTMLButtonElement>(".mask-toggle");
  if (toggle) {
    toggle.onclick = () => {
      // pure class flip: the mask <img> nodes stay in the DOM, no refetch
      state = toggleMasks(state);
      const grid = el("detail").querySelector(".board-grid");
      grid?.classList.toggle("masks-on", state.showMasks);
      grid?.classList.toggle("masks-off", !state.showMasks);
    };
  }
  const decide = el("detail").querySelector<HTMLElement>(".decide");
  if (!decide) return;
  const reviewId = decide.dataset.review ?? "";
  const note = decide.querySelector<HTMLTextAreaElement>(".note")!;
  const feedbackBtn = decide.querySelector<HTMLButtonElement>(".feedback")!;
  note.oninput = () => {
    feedbackBtn.disabled = note.value.trim().length === 0;
  };
  decide.querySelector<HTMLButtonElement>(".approve")!.onclick = () =>
    decideAndRefresh(reviewId, "approve", "");
  feedbackBtn.onclick = () => decideAndRefresh(reviewId, "feedback", note.value);
}

async function decideAndRefresh(
  reviewId: string,
  verdict: "approve" | "feedback",
  note: string,
) {
  const result = await gate.submit(reviewId, verdict, note);
  if (result.status === "conflict") {
    state = { ...state, banner: "already decided by another reviewer" };
  } else if (result.status === "error") {
    state = { ...state, lastError: result.message, banner: result.message };
  }
  await poll();
}

async function poll() {
  try {
    const items = await api.listPending();
    state = applyPoll(state, items);
  } catch (e) {
    state = applyPollFailure(state, String(e));
  }
  render();
}

export function start() {
  void poll();
  setInterval(() => void poll(), POLL_INTERVAL_MS);
}

if (typeof document !== "undefined" && document.getElementById("queue")) {
  start();
}

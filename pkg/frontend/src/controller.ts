// Console state machine, kept free of DOM so it is unit-testable.
// The server is the source of truth: every poll replaces the queue view.

import { ApiClient, PendingReview, SubmitResult, Verdict } from "./api.js";

export const POLL_INTERVAL_MS = 2000;

export interface ConsoleState {
  items: PendingReview[];
  selectedId: string | null;
  showMasks: boolean;
  banner: string | null; // connectivity / conflict messages
  lastError: string | null;
}

export function initialState(): ConsoleState {
  return {
    items: [],
    selectedId: null,
    showMasks: false,
    banner: null,
    lastError: null,
  };
}

/** Feedback requires a note; approve never does. */
export function canSubmit(verdict: Verdict, note: string): boolean {
  return verdict === "approve" || note.trim().length > 0;
}

/** Replace the queue with the server's truth; drop a stale selection. */
export function applyPoll(
  state: ConsoleState,
  items: PendingReview[],
): ConsoleState {
  const ids = new Set(items.map((i) => i.review_id));
  const selectedId =
    state.selectedId && ids.has(state.selectedId) ? state.selectedId : null;
  return { ...state, items, selectedId, banner: null, lastError: null };
}

export function applyPollFailure(
  state: ConsoleState,
  message: string,
): ConsoleState {
  return { ...state, banner: `service unreachable: ${message}` };
}

export function selectItem(
  state: ConsoleState,
  reviewId: string | null,
): ConsoleState {
  return { ...state, selectedId: reviewId, showMasks: false };
}

export function toggleMasks(state: ConsoleState): ConsoleState {
  return { ...state, showMasks: !state.showMasks };
}

export function secondsLeft(item: PendingReview, nowMs: number): number {
  return Math.max(0, Math.round(item.deadline - nowMs / 1000));
}

/**
 * Serializes decision submission: while a submission for a review is in
 * flight, further submits for it are dropped (idempotency guard against
 * double clicks).  A 409 means another reviewer won; the caller should
 * refresh.
 */
export class DecisionGate {
  private inFlight = new Set<string>();

  constructor(private api: ApiClient) {}

  busy(reviewId: string): boolean {
    return this.inFlight.has(reviewId);
  }

  async submit(
    reviewId: string,
    verdict: Verdict,
    note: string,
  ): Promise<SubmitResult | { status: "dropped" }> {
    if (!canSubmit(verdict, note)) {
      return { status: "error", message: "feedback needs a note" };
    }
    if (this.inFlight.has(reviewId)) {
      return { status: "dropped" };
    }
    this.inFlight.add(reviewId);
    try {
      return await this.api.submitDecision(reviewId, verdict, note);
    } finally {
      this.inFlight.delete(reviewId);
    }
  }
}

// Typed client for the pipeline service HTTP API.
// The console only ever mutates state through submitDecision.

export interface PendingReview {
  review_id: string;
  run_id: string;
  phase: string;
  round: number;
  artifacts: Record<string, string>; // name -> content digest
  shot_texts: string[];
  deadline: number; // unix seconds
}

export interface RunView {
  run_id: string;
  phase: string;
  rounds: Record<string, number>;
  artifacts: Record<string, string>;
  error: string;
}

export type Verdict = "approve" | "feedback";

export type SubmitResult =
  | { status: "ok" }
  | { status: "conflict" } // 409: someone else decided first
  | { status: "error"; message: string };

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = fetch.bind(globalThis),
  ) {}

  async listPending(): Promise<PendingReview[]> {
    const resp = await this.fetchFn(`${this.baseUrl}/reviews/pending`);
    if (!resp.ok) throw new Error(`pending: HTTP ${resp.status}`);
    const body = (await resp.json()) as { pending: PendingReview[] };
    return body.pending;
  }

  async getRun(runId: string): Promise<RunView> {
    const resp = await this.fetchFn(`${this.baseUrl}/runs/${runId}`);
    if (!resp.ok) throw new Error(`run ${runId}: HTTP ${resp.status}`);
    return (await resp.json()) as RunView;
  }

  artifactUrl(digest: string): string {
    return `${this.baseUrl}/artifacts/${digest}`;
  }

  async submitDecision(
    reviewId: string,
    verdict: Verdict,
    note: string,
  ): Promise<SubmitResult> {
    let resp: Response;
    try {
      resp = await this.fetchFn(`${this.baseUrl}/reviews/${reviewId}`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ verdict, note, reviewer: "console" }),
      });
    } catch (e) {
      return { status: "error", message: String(e) };
    }
    if (resp.status === 409) return { status: "conflict" };
    if (!resp.ok) {
      let message = `HTTP ${resp.status}`;
      try {
        const body = (await resp.json()) as { message?: string };
        if (body.message) message = body.message;
      } catch {
        /* non-JSON error body; keep the status line */
      }
      return { status: "error", message };
    }
    return { status: "ok" };
  }
}

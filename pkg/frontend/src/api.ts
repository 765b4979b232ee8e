import type { Decision, DecisionResponse, NextResponse, Stats } from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    detail?: string,
  ) {
    super(detail ? `${code}: ${detail}` : code);
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

/** Thin typed client over the review server's JSON API. */
export class ReviewApi {
  constructor(
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
    private readonly base: string = "",
  ) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.base + path, init);
    const body = await response.json().catch(() => ({}));
    if (!response.ok) {
      throw new ApiError(response.status, body.error ?? "HttpError", body.detail);
    }
    return body as T;
  }

  next(reviewer: string): Promise<NextResponse> {
    return this.json<NextResponse>(
      `/api/cases/next?reviewer=${encodeURIComponent(reviewer)}`,
    );
  }

  stats(): Promise<Stats> {
    return this.json<Stats>("/api/cases/stats");
  }

  decide(
    caseId: string,
    decision: Decision,
    reviewer: string,
    reason?: string,
  ): Promise<DecisionResponse> {
    return this.json<DecisionResponse>(
      `/api/cases/${encodeURIComponent(caseId)}/decision`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ decision, reviewer, ...(reason ? { reason } : {}) }),
      },
    );
  }
}

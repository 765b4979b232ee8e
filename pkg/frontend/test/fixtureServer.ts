import type { FetchLike } from "../src/api.js";
import type { CaseDto, Stats } from "../src/types.js";

interface FixtureCase {
  dto: CaseDto;
  state: "pending" | "accepted" | "rejected";
}

export interface FixtureServer {
  fetch: FetchLike;
  stats(): Stats;
  log: Array<{ method: string; path: string }>;
}

export function makeCase(id: string, instruction: string, slots: number): CaseDto {
  return {
    case_id: id,
    n_objects: slots,
    instruction_text: instruction,
    mapping: Array.from({ length: slots }, (_, i) => ({
      phrase: `thing ${i + 1}`,
      index: i + 1,
    })),
    references: Array.from({ length: slots }, (_, i) => ({
      slot: i + 1,
      url: `/api/assets/deadbeef${i}?exp=9999999999&sig=f00d`,
    })),
    lease_expires_in: 600,
  };
}

/**
 * In-memory stand-in for the review server, honoring the same HTTP
 * contract: next leases the first pending case, decisions transition
 * exactly once, stats count states.
 */
export function makeFixtureServer(cases: CaseDto[]): FixtureServer {
  const table: FixtureCase[] = cases.map((dto) => ({ dto, state: "pending" }));
  const log: Array<{ method: string; path: string }> = [];

  const stats = (): Stats => ({
    pending: table.filter((c) => c.state === "pending").length,
    accepted: table.filter((c) => c.state === "accepted").length,
    rejected: table.filter((c) => c.state === "rejected").length,
  });

  const json = (status: number, body: unknown) =>
    new Response(JSON.stringify(body), {
      status,
      headers: { "Content-Type": "application/json" },
    });

  const fetchImpl: FetchLike = async (input, init) => {
    const url = new URL(input, "http://fixture");
    const method = init?.method ?? "GET";
    log.push({ method, path: url.pathname });

    if (method === "GET" && url.pathname === "/api/cases/stats") {
      return json(200, stats());
    }
    if (method === "GET" && url.pathname === "/api/cases/next") {
      const next = table.find((c) => c.state === "pending");
      return json(200, { case: next ? next.dto : null, stats: stats() });
    }
    const decision = url.pathname.match(/^\/api\/cases\/(.+)\/decision$/);
    if (method === "POST" && decision) {
      const target = table.find((c) => c.dto.case_id === decision[1]);
      if (!target) return json(404, { error: "UnknownCase" });
      if (target.state !== "pending") {
        return json(409, { error: "AlreadyDecided" });
      }
      const body = JSON.parse(String(init?.body ?? "{}"));
      if (body.decision !== "accepted" && body.decision !== "rejected") {
        return json(400, { error: "BadRequest", detail: "bad decision" });
      }
      if (body.decision === "rejected" && !body.reason) {
        return json(400, { error: "BadRequest", detail: "rejecting requires a reason" });
      }
      target.state = body.decision;
      return json(200, {
        case_id: target.dto.case_id,
        review_state: target.state,
        stats: stats(),
      });
    }
    return json(404, { error: "NotFound" });
  };

  return { fetch: fetchImpl, stats, log };
}

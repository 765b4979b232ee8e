import { ApiError, ReviewApi } from "./api.js";
import type { CaseDto, RejectReason, Stats } from "./types.js";
import { REJECT_REASONS } from "./types.js";

/**
 * Queue-flow state machine. Pure logic: no DOM, no timers. The view layer
 * subscribes and re-renders on every state change; keyboard events funnel
 * through handleKey so shortcuts and buttons share one path.
 *
 * Decisions only ever flow outward; case content is never modified.
 */

export type Phase =
  | { kind: "loading" }
  | {
      kind: "case";
      view: CaseDto;
      stats: Stats;
      choosingReason: boolean;
      otherText: string;
      toast?: string;
    }
  | { kind: "empty"; stats: Stats; toast?: string }
  | { kind: "error"; message: string };

export class ReviewController {
  private phase: Phase = { kind: "loading" };
  private listeners: Array<(phase: Phase) => void> = [];
  private busy = false;

  constructor(
    private readonly api: ReviewApi,
    readonly reviewer: string,
  ) {}

  get state(): Phase {
    return this.phase;
  }

  subscribe(listener: (phase: Phase) => void): void {
    this.listeners.push(listener);
  }

  private transition(next: Phase): void {
    this.phase = next;
    for (const listener of this.listeners) listener(next);
  }

  async start(): Promise<void> {
    await this.fetchNext();
  }

  async fetchNext(toast?: string): Promise<void> {
    this.transition({ kind: "loading" });
    try {
      const body = await this.api.next(this.reviewer);
      if (body.case === null) {
        this.transition({ kind: "empty", stats: body.stats, toast });
      } else {
        this.transition({
          kind: "case",
          view: body.case,
          stats: body.stats,
          choosingReason: false,
          otherText: "",
          toast,
        });
      }
    } catch (err) {
      this.transition({
        kind: "error",
        message: err instanceof Error ? err.message : String(err),
      });
    }
  }

  /** Keyboard driver: A accepts, R opens the reason picker, 1-4 pick. */
  async handleKey(key: string): Promise<void> {
    const phase = this.phase;
    if (phase.kind === "error" && key.toLowerCase() === "enter") {
      await this.fetchNext();
      return;
    }
    if (phase.kind !== "case" || this.busy) return;
    const k = key.toLowerCase();
    if (phase.choosingReason) {
      if (k === "escape") {
        this.transition({ ...phase, choosingReason: false });
        return;
      }
      const pick = Number(k);
      if (pick >= 1 && pick <= REJECT_REASONS.length) {
        const reason = REJECT_REASONS[pick - 1];
        await this.submitReject(reason, phase.otherText);
      }
      return;
    }
    if (k === "a") {
      await this.submitAccept();
    } else if (k === "r") {
      this.transition({ ...phase, choosingReason: true });
    }
  }

  async submitAccept(): Promise<void> {
    await this.submit("accepted");
  }

  /** Reject is blocked client-side until a reason exists. */
  async submitReject(reason: RejectReason, otherText = ""): Promise<void> {
    const finalReason =
      reason === "other" ? `other: ${otherText.trim() || "unspecified"}` : reason;
    await this.submit("rejected", finalReason);
  }

  setOtherText(text: string): void {
    if (this.phase.kind === "case") {
      this.transition({ ...this.phase, otherText: text });
    }
  }

  private async submit(decision: "accepted" | "rejected", reason?: string): Promise<void> {
    const phase = this.phase;
    if (phase.kind !== "case" || this.busy) return;
    if (decision === "rejected" && !reason) return;
    this.busy = true;
    try {
      await this.api.decide(phase.view.case_id, decision, this.reviewer, reason);
      await this.fetchNext();
    } catch (err) {
      if (err instanceof ApiError && err.code === "AlreadyDecided") {
        // Someone else decided it while we were looking; note it and move on.
        await this.fetchNext("Case was already decided elsewhere");
      } else {
        this.transition({
          kind: "error",
          message: err instanceof Error ? err.message : String(err),
        });
      }
    } finally {
      this.busy = false;
    }
  }
}

/** DTOs mirroring the review server's JSON bodies, field names verbatim. */

export interface MappingEntry {
  phrase: string;
  index: number;
}

export interface ReferenceView {
  slot: number;
  url: string;
}

export interface CaseDto {
  case_id: string;
  n_objects: number;
  instruction_text: string;
  mapping: MappingEntry[];
  references: ReferenceView[];
  lease_expires_in: number;
}

export interface Stats {
  pending: number;
  accepted: number;
  rejected: number;
}

export interface NextResponse {
  case: CaseDto | null;
  stats: Stats;
}

export interface DecisionResponse {
  case_id: string;
  review_state: string;
  stats: Stats;
}

export type Decision = "accepted" | "rejected";

export const REJECT_REASONS = [
  "unnatural",
  "conflicting",
  "low-quality reference",
  "other",
] as const;

export type RejectReason = (typeof REJECT_REASONS)[number];

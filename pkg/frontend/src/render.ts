import { splitInstruction } from "./markers.js";
import type { Phase } from "./controller.js";
import type { CaseDto, Stats } from "./types.js";
import { REJECT_REASONS } from "./types.js";

/** HTML string rendering; kept DOM-free so tests can assert on markup. */

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/**
 * Instruction with inline slot badges at their semantic positions. Badge
 * order is exactly the slot order of the marker grammar.
 */
export function renderInstruction(text: string): string {
  return splitInstruction(text)
    .map((segment) =>
      segment.kind === "text"
        ? `<span class="txt">${escapeHtml(segment.text)}</span>`
        : `<span class="slot-badge" data-slot="${segment.index}">${segment.index}</span>`,
    )
    .join("");
}

export function renderStats(stats: Stats): string {
  return (
    `<header class="stats">` +
    `<span class="stat pending">pending ${stats.pending}</span>` +
    `<span class="stat accepted">accepted ${stats.accepted}</span>` +
    `<span class="stat rejected">rejected ${stats.rejected}</span>` +
    `</header>`
  );
}

function renderReferences(view: CaseDto): string {
  const cells = view.references
    .map(
      (ref) =>
        `<figure class="ref"><img src="${escapeHtml(ref.url)}" alt="reference ${ref.slot}">` +
        `<figcaption><span class="slot-badge" data-slot="${ref.slot}">${ref.slot}</span></figcaption></figure>`,
    )
    .join("");
  return `<div class="references">${cells}</div>`;
}

function renderMapping(view: CaseDto): string {
  const rows = view.mapping
    .map(
      (entry) =>
        `<li><span class="slot-badge" data-slot="${entry.index}">${entry.index}</span> ` +
        `${escapeHtml(entry.phrase)}</li>`,
    )
    .join("");
  return `<ul class="mapping">${rows}</ul>`;
}

function renderReasonPicker(otherText: string): string {
  const options = REJECT_REASONS.map(
    (reason, i) =>
      `<button class="reason" data-reason="${escapeHtml(reason)}">` +
      `<kbd>${i + 1}</kbd> ${escapeHtml(reason)}</button>`,
  ).join("");
  return (
    `<div class="reason-picker">` +
    `<p>Reject reason (1-${REJECT_REASONS.length}, Esc cancels):</p>${options}` +
    `<input class="other-text" placeholder="details for 'other'" value="${escapeHtml(otherText)}">` +
    `</div>`
  );
}

export function renderPhase(phase: Phase): string {
  switch (phase.kind) {
    case "loading":
      return `<main class="loading">Loading next case...</main>`;
    case "error":
      return (
        `<main class="error"><div class="banner">` +
        `Connection problem: ${escapeHtml(phase.message)} ` +
        `<button class="retry">Retry (Enter)</button></div></main>`
      );
    case "empty":
      return (
        renderStats(phase.stats) +
        (phase.toast ? `<div class="toast">${escapeHtml(phase.toast)}</div>` : "") +
        `<main class="empty">Queue drained. Nothing pending.</main>`
      );
    case "case": {
      const view = phase.view;
      return (
        renderStats(phase.stats) +
        (phase.toast ? `<div class="toast">${escapeHtml(phase.toast)}</div>` : "") +
        `<main class="case" data-case-id="${escapeHtml(view.case_id)}">` +
        renderReferences(view) +
        `<p class="instruction">${renderInstruction(view.instruction_text)}</p>` +
        renderMapping(view) +
        `<footer class="actions">` +
        `<span class="lease">lease ${Math.max(0, Math.round(phase.view.lease_expires_in))}s</span>` +
        `<button class="accept"><kbd>A</kbd> Accept</button>` +
        `<button class="reject"><kbd>R</kbd> Reject</button>` +
        `</footer>` +
        (phase.choosingReason ? renderReasonPicker(phase.otherText) : "") +
        `</main>`
      );
    }
  }
}

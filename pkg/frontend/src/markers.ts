/**
 * Client-side reading of the `[ImageK]` marker grammar.
 *
 * Only enough for faithful display: split an instruction into text spans
 * and slots in textual order. The server is the validator; the UI never
 * rewrites case content.
 */

const MARKER = /\[Image([1-9][0-9]*)\]/g;

export type Segment =
  | { kind: "text"; text: string }
  | { kind: "slot"; index: number };

export function splitInstruction(text: string): Segment[] {
  const segments: Segment[] = [];
  let cursor = 0;
  for (const match of text.matchAll(MARKER)) {
    const at = match.index ?? 0;
    if (at > cursor) {
      segments.push({ kind: "text", text: text.slice(cursor, at) });
    }
    segments.push({ kind: "slot", index: Number(match[1]) });
    cursor = at + match[0].length;
  }
  if (cursor < text.length || segments.length === 0) {
    segments.push({ kind: "text", text: text.slice(cursor) });
  }
  return segments;
}

/** Slot indices in the order they appear in the text. */
export function slotOrder(text: string): number[] {
  return splitInstruction(text)
    .filter((s): s is { kind: "slot"; index: number } => s.kind === "slot")
    .map((s) => s.index);
}

"""Native interleaved instruction format.

An interleaved instruction is a sentence in which reference images occupy
in-place slots, written with `[ImageK]` markers ("A [Image1] robot holds a
[Image2] flower vase"). This module owns the marker grammar: parsing,
rendering, mapping validation, token-layout assembly, and the mechanical
rewrite to the baseline image-first format used by index-based models.

Canonical structure: an instruction with K slots is stored as 2K+1
alternating segments, starting and ending with a TextSpan. Leading and
trailing spans may be empty; spans between two slots must contain at least
one character (whitespace counts). Slot indices are 1-based and form the
exact set {1..K}, in any textual order.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence, Union

MARKER_RE = re.compile(r"\[Image([1-9][0-9]*)\]")

ARTICLES = frozenset({"a", "an", "the"})


class TemplateError(ValueError):
    """Base class for instruction-format violations."""


class DuplicateIndex(TemplateError):
    """The same slot index appears more than once."""


class NonContiguousIndices(TemplateError):
    """Slot indices are not exactly {1..K}."""


class AdjacentSlots(TemplateError):
    """Two visual slots with no separating text."""


class TokenizerFailure(TemplateError):
    """The supplied tokenizer returned nothing for non-empty text."""


class UnmappedSlot(TemplateError):
    """A visual slot has no phrase-mapping entry."""


@dataclass(frozen=True)
class TextSpan:
    text: str


@dataclass(frozen=True)
class VisualSlot:
    index: int


Segment = Union[TextSpan, VisualSlot]


@dataclass(frozen=True)
class InterleavedInstruction:
    """An instruction whose segments alternate text and visual slots.

    Construction validates the canonical shape, so every held value renders
    and re-parses to a structurally identical instruction.
    """

    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        segs = self.segments
        if not segs:
            raise TemplateError("instruction must contain at least one text span")
        if len(segs) % 2 == 0:
            raise TemplateError("segments must alternate text/slot/text (odd count)")
        indices: list[int] = []
        for i, seg in enumerate(segs):
            if i % 2 == 0:
                if not isinstance(seg, TextSpan):
                    raise TemplateError(f"segment {i} must be a TextSpan")
                if MARKER_RE.search(seg.text):
                    raise TemplateError(
                        f"text span {i!r} contains a literal [ImageK] marker"
                    )
                if 0 < i < len(segs) - 1 and seg.text == "":
                    raise AdjacentSlots(
                        f"slots around segment {i} have no separating text"
                    )
            else:
                if not isinstance(seg, VisualSlot):
                    raise TemplateError(f"segment {i} must be a VisualSlot")
                indices.append(seg.index)
        if len(set(indices)) != len(indices):
            dupes = sorted({k for k in indices if indices.count(k) > 1})
            raise DuplicateIndex(f"slot indices repeated: {dupes}")
        if indices and set(indices) != set(range(1, len(indices) + 1)):
            raise NonContiguousIndices(
                f"slot indices {sorted(indices)} are not exactly 1..{len(indices)}"
            )

    @property
    def slot_count(self) -> int:
        return len(self.segments) // 2

    @property
    def slots(self) -> tuple[VisualSlot, ...]:
        """Visual slots in textual (instruction) order."""
        return tuple(s for s in self.segments if isinstance(s, VisualSlot))

    @property
    def text_spans(self) -> tuple[TextSpan, ...]:
        return tuple(s for s in self.segments if isinstance(s, TextSpan))

    @classmethod
    def from_parts(
        cls, texts: Sequence[str], indices: Sequence[int]
    ) -> "InterleavedInstruction":
        """Build from K+1 text spans woven with K slot indices."""
        if len(texts) != len(indices) + 1:
            raise TemplateError("need exactly one more text span than slots")
        segs: list[Segment] = [TextSpan(texts[0])]
        for idx, text in zip(indices, texts[1:]):
            segs.append(VisualSlot(idx))
            segs.append(TextSpan(text))
        return cls(tuple(segs))


def parse_template(text: str) -> InterleavedInstruction:
    """Parse marker text into an instruction.

    Markers matching exactly `[Image<K>]` (decimal K >= 1, no leading zeros,
    no inner whitespace) become visual slots; everything else is text.

    Raises DuplicateIndex, NonContiguousIndices, or AdjacentSlots when the
    marker structure violates the instruction invariants.
    """
    texts: list[str] = []
    indices: list[int] = []
    pos = 0
    for m in MARKER_RE.finditer(text):
        texts.append(text[pos : m.start()])
        indices.append(int(m.group(1)))
        pos = m.end()
    texts.append(text[pos:])

    if len(set(indices)) != len(indices):
        dupes = sorted({k for k in indices if indices.count(k) > 1})
        raise DuplicateIndex(f"slot indices repeated: {dupes}")
    if indices and set(indices) != set(range(1, len(indices) + 1)):
        raise NonContiguousIndices(
            f"slot indices {sorted(indices)} are not exactly 1..{len(indices)}"
        )
    return InterleavedInstruction.from_parts(texts, indices)


def render_template(instr: InterleavedInstruction) -> str:
    """Render back to marker text. Exact inverse of parse_template."""
    out: list[str] = []
    for seg in instr.segments:
        if isinstance(seg, TextSpan):
            out.append(seg.text)
        else:
            out.append(f"[Image{seg.index}]")
    return "".join(out)


@dataclass(frozen=True)
class PhraseMapping:
    """Phrase -> slot-index correspondence for one instruction."""

    entries: tuple[tuple[str, int], ...]

    @classmethod
    def of(cls, *pairs: tuple[str, int]) -> "PhraseMapping":
        return cls(tuple(pairs))

    def phrase_for(self, index: int) -> str | None:
        for phrase, idx in self.entries:
            if idx == index:
                return phrase
        return None

    def as_dicts(self) -> list[dict]:
        return [{"phrase": p, "index": i} for p, i in self.entries]

    @classmethod
    def from_dicts(cls, items: Iterable[dict]) -> "PhraseMapping":
        return cls(tuple((str(d["phrase"]), int(d["index"])) for d in items))


@dataclass(frozen=True)
class Violation:
    kind: str  # IndexOutOfRange | MissingIndex | DuplicateIndex | EmptyPhrase | PhraseNotAdjacent
    index: int
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def describe(self) -> str:
        if self.ok:
            return "mapping valid"
        return "; ".join(f"{v.kind}(index={v.index}): {v.detail}" for v in self.violations)


def validate_mapping(
    instr: InterleavedInstruction, mapping: PhraseMapping
) -> ValidationReport:
    """Check a phrase mapping against an instruction.

    Zero violations means: entry indices and slot indices match exactly, no
    phrase is empty, and each phrase occurs verbatim immediately after its
    marker in the rendered text (leading whitespace ignored). Violations are
    data, not exceptions.
    """
    violations: list[Violation] = []
    slot_indices = {s.index for s in instr.slots}
    seen: set[int] = set()
    rendered = render_template(instr)

    for phrase, idx in mapping.entries:
        if idx in seen:
            violations.append(Violation("DuplicateIndex", idx, "index mapped twice"))
            continue
        seen.add(idx)
        if idx not in slot_indices:
            violations.append(
                Violation("IndexOutOfRange", idx, f"no slot [Image{idx}] in instruction")
            )
            continue
        if phrase == "":
            violations.append(Violation("EmptyPhrase", idx, "phrase is empty"))
            continue
        marker = f"[Image{idx}]"
        after = rendered[rendered.index(marker) + len(marker) :]
        if not after.lstrip().startswith(phrase):
            violations.append(
                Violation(
                    "PhraseNotAdjacent",
                    idx,
                    f"phrase {phrase!r} does not immediately follow {marker}",
                )
            )
    for idx in sorted(slot_indices - seen):
        violations.append(Violation("MissingIndex", idx, f"slot [Image{idx}] unmapped"))
    return ValidationReport(tuple(violations))


@dataclass(frozen=True)
class TextTokenRun:
    token_ids: tuple[int, ...]


@dataclass(frozen=True)
class VisualBlock:
    slot_index: int
    length: int
    start_offset: int


@dataclass(frozen=True)
class TokenLayout:
    elements: tuple[Union[TextTokenRun, VisualBlock], ...] = field(default=())

    @property
    def visual_blocks(self) -> tuple[VisualBlock, ...]:
        return tuple(e for e in self.elements if isinstance(e, VisualBlock))

    @property
    def text_token_ids(self) -> tuple[int, ...]:
        out: list[int] = []
        for e in self.elements:
            if isinstance(e, TextTokenRun):
                out.extend(e.token_ids)
        return tuple(out)

    @property
    def total_length(self) -> int:
        return sum(
            len(e.token_ids) if isinstance(e, TextTokenRun) else e.length
            for e in self.elements
        )


def assemble_layout(
    instr: InterleavedInstruction,
    text_tokenizer: Callable[[str], Sequence[int]],
    visual_block_len: int,
) -> TokenLayout:
    """Expand an instruction into a token layout.

    Each slot becomes one contiguous visual block of visual_block_len tokens
    at its in-text position; text spans are tokenized independently with the
    supplied tokenizer. Offsets count tokens from zero.
    """
    if visual_block_len < 1:
        raise ValueError(f"visual_block_len must be >= 1, got {visual_block_len}")
    elements: list[Union[TextTokenRun, VisualBlock]] = []
    offset = 0
    for seg in instr.segments:
        if isinstance(seg, TextSpan):
            if seg.text == "":
                continue
            ids = text_tokenizer(seg.text)
            if ids is None:
                raise TokenizerFailure(f"tokenizer returned nothing for {seg.text!r}")
            ids = tuple(int(t) for t in ids)
            if ids:
                elements.append(TextTokenRun(ids))
                offset += len(ids)
        else:
            elements.append(VisualBlock(seg.index, visual_block_len, offset))
            offset += visual_block_len
    return TokenLayout(tuple(elements))


def rewrite_image_first(
    instr: InterleavedInstruction, mapping: PhraseMapping
) -> str:
    """Rewrite to the baseline indexed format, markers removed.

    Each `[ImageK] <phrase>` pair becomes `the <phrase> in Image K`; the
    leading "the" is suppressed when the marker is already preceded by an
    article. The result never contains a `[Image` marker.
    """
    report = validate_mapping(instr, mapping)
    if not report.ok:
        if any(v.kind == "MissingIndex" for v in report.violations):
            missing = [v.index for v in report.violations if v.kind == "MissingIndex"]
            raise UnmappedSlot(f"slots without mapping entries: {missing}")
        raise ValueError(f"mapping does not validate: {report.describe()}")

    phrases = {idx: phrase for phrase, idx in mapping.entries}
    out: list[str] = []
    segs = list(instr.segments)
    i = 0
    while i < len(segs):
        seg = segs[i]
        if isinstance(seg, TextSpan):
            out.append(seg.text)
            i += 1
            continue
        phrase = phrases[seg.index]
        preceding = "".join(out).rstrip()
        last_word = preceding.split()[-1] if preceding else ""
        head = phrase if last_word.lower() in ARTICLES else f"the {phrase}"
        out.append(f"{head} in Image {seg.index}")
        # Consume the phrase (and the whitespace before it) from the next span.
        following = segs[i + 1]
        assert isinstance(following, TextSpan)
        rest = following.text.lstrip()
        assert rest.startswith(phrase)
        segs[i + 1] = TextSpan(rest[len(phrase) :])
        i += 1
    return "".join(out)

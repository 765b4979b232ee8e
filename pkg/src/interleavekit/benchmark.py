"""Benchmark curation and the dual-perspective evaluation protocol.

Cases pair N reference entities (N in [2, 5]) with an interleaved
instruction and enter a human-review queue; only accepted cases are ever
evaluated. Scoring is two-sided: a judge rates identity preservation 1-5
(normalized to [0, 1] as (rating - 1) / 4), and pre-formulated binary
questions are answered yes/no by a vision model, the text score being the
yes ratio. Reports bucket by object count with a count-weighted overall.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal

from .clients import ClientHub, ClientRole
from .imaging import concat_side_by_side, decode_image, encode_png, sha256_hex, to_b64
from .image_engine import ImageEngineConfig, WeaveFailed, weave_instruction
from .instructions import InterleavedInstruction, PhraseMapping, render_template
from .samples import VisualAsset

MIN_REFERENCES = 2
MAX_REFERENCES = 5
MIN_POOL_SIZE = 5

BUCKET_NAMES = {2: "Two Obj.", 3: "Three Obj.", 4: "Four Obj.", 5: "Five Obj."}

COMPATIBILITY_QUESTION = (
    "Could these side-by-side entities plausibly appear together in one "
    "coherent scene?"
)
JUDGE_FORMAT_REMINDER = " Respond with an integer rating from 1 to 5."
ANSWER_FORMAT_REMINDER = " Answer strictly yes or no."


class IncompatibleSet(RuntimeError):
    """No semantically compatible entity set found within the retry budget."""


class JudgeOutOfRange(RuntimeError):
    """Judge rating stayed outside 1..5 after one re-ask."""


class FormulationFailed(RuntimeError):
    """Question formulation never satisfied the coverage floor."""


class AnswerUnparseable(RuntimeError):
    """Answer was neither yes nor no after one re-ask."""


class CaseNotAccepted(RuntimeError):
    """Evaluation was attempted on a case that is not accepted."""


PENDING = "pending"
ACCEPTED = "accepted"
REJECTED = "rejected"


@dataclass(frozen=True)
class BenchCase:
    case_id: str
    references: tuple[VisualAsset, ...]
    instruction: InterleavedInstruction
    mapping: PhraseMapping
    n_objects: int
    review_state: str = PENDING
    reject_reason: str | None = None

    def __post_init__(self) -> None:
        if not MIN_REFERENCES <= len(self.references) <= MAX_REFERENCES:
            raise ValueError(f"need {MIN_REFERENCES}-{MAX_REFERENCES} references")
        if self.n_objects != len(self.references):
            raise ValueError("n_objects must equal the reference count")
        if self.review_state not in (PENDING, ACCEPTED, REJECTED):
            raise ValueError(f"unknown review state {self.review_state!r}")

    @property
    def instruction_text(self) -> str:
        return render_template(self.instruction)

    def with_state(self, state: str, reason: str | None = None) -> "BenchCase":
        return replace(self, review_state=state, reject_reason=reason)


@dataclass(frozen=True)
class QuestionSet:
    case_id: str
    questions: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.questions:
            raise ValueError("a question set needs at least one question")


@dataclass(frozen=True)
class EvalRecord:
    case_id: str
    n_objects: int
    judge_rating_raw: int
    image_consistency: float
    text_consistency: float
    qa_answers: tuple[bool, ...]

    def __post_init__(self) -> None:
        if abs(self.image_consistency - (self.judge_rating_raw - 1) / 4) > 1e-12:
            raise ValueError("image_consistency must equal (rating - 1) / 4")
        if self.qa_answers:
            expected = sum(self.qa_answers) / len(self.qa_answers)
            if abs(self.text_consistency - expected) > 1e-12:
                raise ValueError("text_consistency must equal the yes ratio")

    def as_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "n_objects": self.n_objects,
            "judge_rating_raw": self.judge_rating_raw,
            "image_consistency": self.image_consistency,
            "text_consistency": self.text_consistency,
            "qa_answers": list(self.qa_answers),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalRecord":
        return cls(
            case_id=data["case_id"],
            n_objects=int(data["n_objects"]),
            judge_rating_raw=int(data["judge_rating_raw"]),
            image_consistency=float(data["image_consistency"]),
            text_consistency=float(data["text_consistency"]),
            qa_answers=tuple(bool(a) for a in data["qa_answers"]),
        )


@dataclass(frozen=True)
class CurateConfig:
    max_resample_attempts: int = 5
    llm_retry_limit: int = 3


def _entity_label(asset: VisualAsset, taken: set[str]) -> str:
    stem = asset.origin_ref.rsplit("/", 1)[-1]
    stem = stem.rsplit(".", 1)[0] or "entity"
    label = stem.replace("_", " ").replace("-", " ").strip() or "entity"
    candidate = label
    suffix = 2
    while candidate in taken:
        candidate = f"{label} {suffix}"
        suffix += 1
    taken.add(candidate)
    return candidate


def curate_case(
    entity_pool: list[VisualAsset],
    rng: random.Random,
    clients: ClientHub,
    config: CurateConfig | None = None,
) -> BenchCase:
    """Draw a compatible entity set and weave its instruction.

    N is uniform over {2..5}; sets failing the compatibility check are
    re-drawn up to max_resample_attempts. Every produced case starts
    pending; acceptance is a human decision, never automatic.
    """
    config = config or CurateConfig()
    if len(entity_pool) < MIN_POOL_SIZE:
        raise ValueError(f"entity pool must hold >= {MIN_POOL_SIZE} entities")
    n = rng.randint(MIN_REFERENCES, MAX_REFERENCES)

    chosen: list[VisualAsset] | None = None
    for _ in range(config.max_resample_attempts):
        candidates = rng.sample(entity_pool, n)
        strip = decode_image(candidates[0].image_bytes)
        for extra in candidates[1:]:
            strip, _, _ = concat_side_by_side(strip, decode_image(extra.image_bytes))
        answer = clients.call(
            ClientRole.qa_answerer,
            {"image_b64": to_b64(encode_png(strip)), "question": COMPATIBILITY_QUESTION},
        )["answer"]
        if answer.strip().lower().rstrip(".") == "yes":
            chosen = candidates
            break
    if chosen is None:
        raise IncompatibleSet(
            f"no compatible {n}-entity set in {config.max_resample_attempts} draws"
        )

    taken: set[str] = set()
    items: list[tuple[str, str]] = []
    for asset in chosen:
        label = _entity_label(asset, taken)
        caption = clients.call(
            ClientRole.captioner, {"image_b64": to_b64(asset.image_bytes)}
        )["caption"]
        items.append((label, caption))

    weave_cfg = ImageEngineConfig(
        min_objects=1, max_objects=MAX_REFERENCES, llm_retry_limit=config.llm_retry_limit
    )
    instr, mapping, _ = weave_instruction(
        "Compose a single coherent scene from these entities.", items, clients, weave_cfg
    )
    case_id = sha256_hex(
        "\x00".join([render_template(instr), *[a.digest for a in chosen]]).encode()
    )[:24]
    return BenchCase(
        case_id=case_id,
        references=tuple(chosen),
        instruction=instr,
        mapping=mapping,
        n_objects=n,
    )


def _require_accepted(case: BenchCase) -> None:
    if case.review_state != ACCEPTED:
        raise CaseNotAccepted(f"case {case.case_id} is {case.review_state}, not accepted")


def score_image_consistency(
    generated: bytes, case: BenchCase, clients: ClientHub
) -> tuple[int, float]:
    """Judge the generated image against the case; returns (raw, normalized)."""
    _require_accepted(case)
    request = {
        "generated_b64": to_b64(generated),
        "references": [to_b64(a.image_bytes) for a in case.references],
        "instruction": case.instruction_text,
    }
    rating = clients.call(ClientRole.judge, request)["rating"]
    if not 1 <= rating <= 5:
        retry = dict(request, instruction=request["instruction"] + JUDGE_FORMAT_REMINDER)
        rating = clients.call(ClientRole.judge, retry)["rating"]
        if not 1 <= rating <= 5:
            raise JudgeOutOfRange(f"rating {rating} outside 1..5 after re-ask")
    return rating, (rating - 1) / 4


def _questions_cover(questions: list[str], phrases: list[str], n_objects: int) -> bool:
    if not questions:
        return False
    for phrase in phrases:
        if not any(phrase in q for q in questions):
            return False
    if n_objects >= 2 and len(questions) < len(phrases) + 1:
        return False
    return True


def formulate_questions(case: BenchCase, clients: ClientHub) -> QuestionSet:
    """Pre-formulate binary questions: one per mapped phrase plus a relation.

    The floor is enforced on the response (each phrase must appear in at
    least one question; N >= 2 additionally needs one extra relation
    question); one retry, then FormulationFailed.
    """
    _require_accepted(case)
    phrases = [phrase for phrase, _ in case.mapping.entries]
    request = {"instruction": case.instruction_text, "phrases": phrases}
    for attempt in range(2):
        if attempt:
            request = {
                "instruction": case.instruction_text
                + " Cover every phrase and add a relation question.",
                "phrases": phrases,
            }
        questions = clients.call(ClientRole.question_formulator, request)["questions"]
        if _questions_cover(questions, phrases, case.n_objects):
            return QuestionSet(case.case_id, tuple(questions))
    raise FormulationFailed(f"case {case.case_id}: coverage floor unmet after retry")


@dataclass(frozen=True)
class TextScore:
    score: float
    answers: tuple[bool, ...]
    raw_answers: tuple[str, ...]


def _parse_answer(raw: str) -> bool | None:
    token = raw.strip().lower().rstrip(".!")
    if token == "yes":
        return True
    if token == "no":
        return False
    return None


def score_text_consistency(
    generated: bytes, questions: QuestionSet, clients: ClientHub
) -> TextScore:
    """Yes-ratio over the case's binary questions; answers kept verbatim."""
    image_b64 = to_b64(generated)
    answers: list[bool] = []
    raw_answers: list[str] = []
    for question in questions.questions:
        raw = clients.call(
            ClientRole.qa_answerer, {"image_b64": image_b64, "question": question}
        )["answer"]
        parsed = _parse_answer(raw)
        if parsed is None:
            raw = clients.call(
                ClientRole.qa_answerer,
                {"image_b64": image_b64, "question": question + ANSWER_FORMAT_REMINDER},
            )["answer"]
            parsed = _parse_answer(raw)
            if parsed is None:
                raise AnswerUnparseable(f"answer {raw!r} is neither yes nor no")
        answers.append(parsed)
        raw_answers.append(raw)
    return TextScore(
        score=sum(answers) / len(answers),
        answers=tuple(answers),
        raw_answers=tuple(raw_answers),
    )


def evaluate_case(
    generated: bytes,
    case: BenchCase,
    questions: QuestionSet,
    clients: ClientHub,
) -> EvalRecord:
    """Both metrics for one accepted case and one generated image."""
    _require_accepted(case)
    rating, image_score = score_image_consistency(generated, case, clients)
    text = score_text_consistency(generated, questions, clients)
    return EvalRecord(
        case_id=case.case_id,
        n_objects=case.n_objects,
        judge_rating_raw=rating,
        image_consistency=image_score,
        text_consistency=text.score,
        qa_answers=text.answers,
    )


@dataclass(frozen=True)
class BucketStats:
    count: int
    image_mean: float
    text_mean: float


@dataclass(frozen=True)
class ReportTable:
    buckets: dict[int, BucketStats]
    overall: BucketStats

    def to_dict(self) -> dict:
        return {
            "buckets": {
                BUCKET_NAMES[n]: {
                    "count": b.count,
                    "image_consistency": b.image_mean,
                    "text_consistency": b.text_mean,
                }
                for n, b in sorted(self.buckets.items())
            },
            "overall": {
                "count": self.overall.count,
                "image_consistency": self.overall.image_mean,
                "text_consistency": self.overall.text_mean,
            },
        }

    def render_text(self) -> str:
        columns = [BUCKET_NAMES[n] for n in sorted(self.buckets)] + ["Overall"]
        image_row = [
            _round2(self.buckets[n].image_mean) for n in sorted(self.buckets)
        ] + [_round2(self.overall.image_mean)]
        text_row = [
            _round2(self.buckets[n].text_mean) for n in sorted(self.buckets)
        ] + [_round2(self.overall.text_mean)]
        count_row = [str(self.buckets[n].count) for n in sorted(self.buckets)] + [
            str(self.overall.count)
        ]
        rows = [
            ("Metric", columns),
            ("Image Consistency", image_row),
            ("Text Consistency", text_row),
            ("Cases", count_row),
        ]
        label_w = max(len(r[0]) for r in rows)
        col_ws = [
            max(len(str(rows[r][1][c])) for r in range(len(rows)))
            for c in range(len(columns))
        ]
        lines = []
        for label, cells in rows:
            parts = [label.ljust(label_w)]
            parts.extend(str(c).rjust(col_ws[i]) for i, c in enumerate(cells))
            lines.append("  ".join(parts))
        return "\n".join(lines)


def _round2(value: float) -> str:
    return str(Decimal(str(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def aggregate_report(records: list[EvalRecord]) -> ReportTable:
    """Bucketed means plus the count-weighted overall.

    Empty buckets are absent from the table, never reported as zero. The
    overall is the mean over records, which equals weighting bucket means
    by their counts.
    """
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    for record in records:
        if record.n_objects not in BUCKET_NAMES:
            raise ValueError(f"n_objects {record.n_objects} outside 2..5")
    buckets: dict[int, BucketStats] = {}
    for n in sorted(BUCKET_NAMES):
        group = [r for r in records if r.n_objects == n]
        if not group:
            continue
        buckets[n] = BucketStats(
            count=len(group),
            image_mean=sum(r.image_consistency for r in group) / len(group),
            text_mean=sum(r.text_consistency for r in group) / len(group),
        )
    total = sum(b.count for b in buckets.values())
    overall = BucketStats(
        count=total,
        image_mean=sum(b.image_mean * b.count for b in buckets.values()) / total,
        text_mean=sum(b.text_mean * b.count for b in buckets.values()) / total,
    )
    return ReportTable(buckets=buckets, overall=overall)

import random

import pytest

from interleavekit.benchmark import (
    ACCEPTED,
    PENDING,
    AnswerUnparseable,
    BenchCase,
    CaseNotAccepted,
    EvalRecord,
    FormulationFailed,
    IncompatibleSet,
    JudgeOutOfRange,
    QuestionSet,
    aggregate_report,
    curate_case,
    evaluate_case,
    formulate_questions,
    score_image_consistency,
    score_text_consistency,
)
from interleavekit.clients import ClientRole
from interleavekit.imaging import encode_png
from interleavekit.instructions import PhraseMapping, parse_template, validate_mapping
from interleavekit.synth import scene_image

GENERATED = encode_png(scene_image(999))


def make_case(n=2, state=ACCEPTED, entity_pool=None):
    texts = {2: "a [Image1] cat by a [Image2] lamp",
             3: "a [Image1] cat by a [Image2] lamp on a [Image3] rug"}
    instr = parse_template(texts[n])
    mapping = PhraseMapping.of(*[(p, i) for i, p in enumerate(["cat", "lamp", "rug"][:n], 1)])
    refs = tuple(entity_pool[:n])
    return BenchCase("case-x", refs, instr, mapping, n, review_state=state)


class ScriptedHub:
    """Duck-typed hub: per-role response scripts (lists are consumed in order)."""

    def __init__(self, **by_role):
        self.scripts = by_role
        self.calls = []

    def call(self, role, request):
        self.calls.append((role, request))
        script = self.scripts[role.value]
        if callable(script):
            return script(request)
        if isinstance(script, list):
            return script.pop(0)
        return script


class TestCurateCase:
    def test_produces_pending_case_with_distinct_references(self, entity_pool, echo_hub):
        for seed in range(6):
            case = curate_case(entity_pool, random.Random(seed), echo_hub)
            assert case.review_state == PENDING
            assert 2 <= case.n_objects <= 5
            digests = [r.digest for r in case.references]
            assert len(set(digests)) == len(digests)
            assert validate_mapping(case.instruction, case.mapping).ok

    def test_n_spans_full_range_over_seeds(self, entity_pool, echo_hub):
        seen = set()
        for seed in range(40):
            case = curate_case(entity_pool, random.Random(seed), echo_hub)
            seen.add(case.n_objects)
            if seen == {2, 3, 4, 5}:
                break
        assert seen == {2, 3, 4, 5}

    def test_incompatible_pool_exhausts_budget(self, entity_pool):
        hub = ScriptedHub(qa_answerer={"answer": "no"})
        with pytest.raises(IncompatibleSet):
            curate_case(entity_pool, random.Random(0), hub)
        assert len(hub.calls) == 5  # default resample budget

    def test_small_pool_rejected(self, entity_pool, echo_hub):
        with pytest.raises(ValueError):
            curate_case(entity_pool[:4], random.Random(0), echo_hub)


class TestImageConsistency:
    def test_normalization_endpoints(self, entity_pool):
        case = make_case(entity_pool=entity_pool)
        for rating, expected in [(5, 1.0), (1, 0.0), (3, 0.5)]:
            hub = ScriptedHub(judge={"rating": rating, "rationale": "r"})
            raw, norm = score_image_consistency(GENERATED, case, hub)
            assert raw == rating and norm == expected

    def test_out_of_range_reasks_once_then_fails(self, entity_pool):
        case = make_case(entity_pool=entity_pool)
        hub = ScriptedHub(judge=[{"rating": 7, "rationale": "r"}, {"rating": 7, "rationale": "r"}])
        with pytest.raises(JudgeOutOfRange):
            score_image_consistency(GENERATED, case, hub)
        assert len(hub.calls) == 2
        assert hub.calls[1][1]["instruction"] != hub.calls[0][1]["instruction"]

    def test_out_of_range_then_recovered(self, entity_pool):
        case = make_case(entity_pool=entity_pool)
        hub = ScriptedHub(judge=[{"rating": 0, "rationale": "r"}, {"rating": 4, "rationale": "r"}])
        raw, norm = score_image_consistency(GENERATED, case, hub)
        assert (raw, norm) == (4, 0.75)

    def test_requires_accepted_case(self, entity_pool):
        case = make_case(state=PENDING, entity_pool=entity_pool)
        with pytest.raises(CaseNotAccepted):
            score_image_consistency(GENERATED, case, ScriptedHub())


class TestFormulateQuestions:
    def test_floor_two_object_case(self, entity_pool, echo_hub):
        case = make_case(n=2, entity_pool=entity_pool)
        qs = formulate_questions(case, echo_hub)
        assert len(qs.questions) >= 3  # 2 attribute + 1 relation
        for phrase in ("cat", "lamp"):
            assert any(phrase in q for q in qs.questions)

    def test_empty_twice_fails(self, entity_pool):
        case = make_case(entity_pool=entity_pool)
        hub = ScriptedHub(question_formulator=[{"questions": []}, {"questions": []}])
        with pytest.raises(FormulationFailed):
            formulate_questions(case, hub)
        assert len(hub.calls) == 2

    def test_missing_phrase_coverage_retried(self, entity_pool):
        case = make_case(entity_pool=entity_pool)
        hub = ScriptedHub(
            question_formulator=[
                {"questions": ["Is the cat there?", "Is it sunny?", "Are they close?"]},
                {"questions": ["Is the cat there?", "Is the lamp lit?", "Are they close?"]},
            ]
        )
        qs = formulate_questions(case, hub)
        assert any("lamp" in q for q in qs.questions)


class TestTextConsistency:
    QS = QuestionSet("case-x", ("q1?", "q2?", "q3?", "q4?"))

    def test_yes_ratio(self):
        answers = [{"answer": a} for a in ("yes", "yes", "yes", "no")]
        hub = ScriptedHub(qa_answerer=answers)
        result = score_text_consistency(GENERATED, self.QS, hub)
        assert result.score == 0.75
        assert result.answers == (True, True, True, False)

    def test_all_yes(self):
        hub = ScriptedHub(qa_answerer={"answer": "yes"})
        assert score_text_consistency(GENERATED, self.QS, hub).score == 1.0

    def test_answer_normalization(self):
        hub = ScriptedHub(qa_answerer=[{"answer": " Yes."}, {"answer": "NO"},
                                       {"answer": "yes"}, {"answer": "no"}])
        result = score_text_consistency(GENERATED, self.QS, hub)
        assert result.answers == (True, False, True, False)

    def test_unparseable_twice_fails(self):
        hub = ScriptedHub(qa_answerer={"answer": "maybe"})
        with pytest.raises(AnswerUnparseable):
            score_text_consistency(GENERATED, QuestionSet("c", ("q?",)), hub)
        assert len(hub.calls) == 2

    def test_unparseable_then_recovered(self):
        hub = ScriptedHub(qa_answerer=[{"answer": "maybe"}, {"answer": "no"}])
        result = score_text_consistency(GENERATED, QuestionSet("c", ("q?",)), hub)
        assert result.score == 0.0


class TestEvalRecord:
    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            EvalRecord("c", 2, 5, 0.9, 1.0, (True,))
        with pytest.raises(ValueError):
            EvalRecord("c", 2, 5, 1.0, 0.9, (True,))

    def test_evaluate_case_driver(self, entity_pool):
        case = make_case(entity_pool=entity_pool)
        hub = ScriptedHub(
            judge={"rating": 4, "rationale": "r"},
            qa_answerer={"answer": "yes"},
        )
        record = evaluate_case(GENERATED, case, QuestionSet("case-x", ("a?", "b?")), hub)
        assert record.image_consistency == 0.75
        assert record.text_consistency == 1.0
        assert record.qa_answers == (True, True)


def record_with(n_objects: int, score: float, questions: int = 100) -> EvalRecord:
    """Record whose image and text scores both equal `score` exactly."""
    quarters = round(score * 4)
    assert abs(quarters / 4 - score) < 1e-12, "score must be a quarter for image side"
    yes = round(score * questions)
    assert abs(yes / questions - score) < 1e-12
    return EvalRecord(
        case_id=f"r{n_objects}-{score}",
        n_objects=n_objects,
        judge_rating_raw=1 + quarters,
        image_consistency=quarters / 4,
        text_consistency=yes / questions,
        qa_answers=tuple([True] * yes + [False] * (questions - yes)),
    )


def mixed_bucket(n_objects: int, target_mean: float, count: int) -> list[EvalRecord]:
    """Records with quantized image scores whose bucket mean is exact."""
    total_quarters = target_mean * 4 * count
    assert abs(total_quarters - round(total_quarters)) < 1e-9
    total_quarters = round(total_quarters)
    records = []
    remaining = total_quarters
    for i in range(count):
        left = count - i - 1
        # Greedy: hand out 4s while the rest can still absorb the remainder.
        q = min(4, remaining)
        if remaining - q > 4 * left:
            q = remaining - 4 * left
        records.append(
            EvalRecord(
                case_id=f"b{n_objects}-{i}",
                n_objects=n_objects,
                judge_rating_raw=1 + q,
                image_consistency=q / 4,
                text_consistency=q / 4,
                qa_answers=tuple([True] * q + [False] * (4 - q)),
            )
        )
        remaining -= q
    assert remaining == 0
    return records


class TestAggregateReport:
    def test_table_one_fixture_equal_counts(self):
        records = []
        for n, mean in zip((2, 3, 4, 5), (0.93, 0.94, 0.90, 0.94)):
            records.extend(mixed_bucket(n, mean, 25))
        table = aggregate_report(records)
        assert abs(table.overall.image_mean - 0.9275) < 1e-12
        rendered = table.render_text()
        assert "0.93" in rendered.splitlines()[1]  # image row ends at overall 0.93
        assert rendered.splitlines()[1].rstrip().endswith("0.93")

    def test_weighted_fixture(self):
        records = (
            mixed_bucket(2, 0.8, 10)
            + mixed_bucket(3, 0.8, 10)
            + mixed_bucket(4, 0.8, 10)
            + mixed_bucket(5, 0.4, 30)
        )
        table = aggregate_report(records)
        assert abs(table.overall.text_mean - 0.60) < 1e-12
        assert table.render_text().splitlines()[2].rstrip().endswith("0.60")

    def test_overall_matches_brute_force_mean(self):
        rng = random.Random(5)
        records = []
        for i in range(200):
            n = rng.randint(2, 5)
            quarters = rng.randint(0, 4)
            yes, total = rng.randint(0, 7), 7
            records.append(
                EvalRecord(
                    case_id=f"r{i}",
                    n_objects=n,
                    judge_rating_raw=1 + quarters,
                    image_consistency=quarters / 4,
                    text_consistency=yes / total,
                    qa_answers=tuple([True] * yes + [False] * (total - yes)),
                )
            )
        table = aggregate_report(records)
        brute_image = sum(r.image_consistency for r in records) / len(records)
        brute_text = sum(r.text_consistency for r in records) / len(records)
        assert abs(table.overall.image_mean - brute_image) < 1e-12
        assert abs(table.overall.text_mean - brute_text) < 1e-12

    def test_single_record_fills_one_bucket(self):
        record = record_with(3, 0.5, questions=2)
        table = aggregate_report([record])
        assert list(table.buckets) == [3]
        assert "0.50" in table.render_text()

    def test_empty_bucket_absent_not_zero(self):
        table = aggregate_report([record_with(2, 0.75, questions=4)])
        assert 5 not in table.buckets
        assert "Five Obj." not in table.render_text()

    def test_mixed_quantized_bucket_helper(self):
        bucket = mixed_bucket(2, 0.93, 25)
        mean = sum(r.image_consistency for r in bucket) / len(bucket)
        assert abs(mean - 0.93) < 1e-12

    def test_out_of_range_bucket_rejected(self):
        bad = EvalRecord("x", 6, 5, 1.0, 1.0, (True,))
        with pytest.raises(ValueError):
            aggregate_report([bad])

    def test_normalization_bijection(self):
        for rating in range(1, 6):
            norm = (rating - 1) / 4
            assert norm in {0.0, 0.25, 0.5, 0.75, 1.0}
            assert round(norm * 4) + 1 == rating

import json

import numpy as np
import pytest

from parcot.datagen import (
    DEFAULT_ANSWER_TEMPLATE,
    MAX_CONTEXT_TOKENS,
    RawProblem,
    build_sample,
    parse_sample,
    problem_from_record,
    read_problems,
    training_layout,
    training_record,
    write_training_records,
)
from parcot.errors import DataError, FormatError, LayoutError
from parcot.masking import REASONING, SUMMARIZATION, build_reasoning_mask, build_summary_mask
from parcot.tokenizer import Vocab, decode


@pytest.fixture(scope="module")
def vocab():
    return Vocab()


def problem(num_paths=6):
    return RawProblem(
        query="how many cats?",
        answer="42",
        paths=tuple(f"path body {i} reasons along" for i in range(num_paths)),
    )


class TestBuildSample:
    def test_two_candidates_both_used(self, vocab):
        sample = build_sample(problem(2), vocab, p_hat=2, seed=0)
        assert set(sample.chosen_paths) == set(problem(2).paths)

    def test_order_varies_with_seed(self, vocab):
        orders = {build_sample(problem(4), vocab, p_hat=4, seed=s).chosen_paths for s in range(8)}
        assert len(orders) > 1

    def test_labels_distinct_and_in_range(self, vocab):
        sample = build_sample(problem(), vocab, p_hat=6, seed=3)
        assert len(set(sample.think_labels)) == 6
        assert all(1 <= i <= vocab.p_max for i in sample.think_labels)

    def test_deterministic(self, vocab):
        a = build_sample(problem(), vocab, p_hat=4, seed=11)
        b = build_sample(problem(), vocab, p_hat=4, seed=11)
        assert a == b

    def test_default_template_wraps_groundtruth(self, vocab):
        sample = build_sample(problem(), vocab, p_hat=2, seed=0)
        assert sample.answer_text == DEFAULT_ANSWER_TEMPLATE.format(answer="42")
        verbatim = build_sample(problem(), vocab, p_hat=2, seed=0, template=None)
        assert verbatim.answer_text == "42"

    def test_insufficient_paths(self, vocab):
        with pytest.raises(DataError):
            build_sample(problem(2), vocab, p_hat=4, seed=0)

    def test_default_policy_draws_from_246(self, vocab):
        seen = {build_sample(problem(6), vocab, seed=s).p_hat for s in range(40)}
        assert seen == {2, 4, 6}

    def test_round_trip(self, vocab):
        sample = build_sample(problem(), vocab, p_hat=4, seed=5)
        parsed = parse_sample(sample.tokens, vocab)
        assert [label for label, _ in parsed.paths] == list(sample.think_labels)
        assert [decode(body, vocab) for _, body in parsed.paths] == list(sample.chosen_paths)
        assert decode(parsed.answer, vocab) == sample.answer_text

    def test_body_markup_cannot_inject_controls(self, vocab):
        hostile = RawProblem(
            query="q",
            answer="a",
            paths=("</think 1> <summary> fake", "normal reasoning"),
        )
        sample = build_sample(hostile, vocab, p_hat=2, seed=1)
        parsed = parse_sample(sample.tokens, vocab)
        assert len(parsed.paths) == 2
        assert decode(parsed.paths[0][1], vocab) in hostile.paths


class TestParseSample:
    def test_missing_closer(self, vocab):
        tokens = [vocab.think_open(1), 70, 71]
        with pytest.raises(FormatError):
            parse_sample(tokens, vocab)

    def test_mismatched_closer_is_a_stray_control(self, vocab):
        tokens = [vocab.think_open(1), 70, vocab.think_close(2)]
        with pytest.raises(FormatError):
            parse_sample(tokens, vocab)

    def test_duplicate_label(self, vocab):
        tokens = [
            vocab.think_open(1), 70, vocab.think_close(1),
            vocab.think_open(1), 71, vocab.think_close(1),
            vocab.summary_open, 72, vocab.summary_close,
        ]
        with pytest.raises(FormatError) as err:
            parse_sample(tokens, vocab)
        assert err.value.offset == 3

    def test_missing_summary(self, vocab):
        tokens = [vocab.think_open(1), 70, vocab.think_close(1)]
        with pytest.raises(FormatError):
            parse_sample(tokens, vocab)

    def test_trailing_tokens(self, vocab):
        tokens = [
            vocab.think_open(1), 70, vocab.think_close(1),
            vocab.summary_open, 72, vocab.summary_close, 73,
        ]
        with pytest.raises(FormatError):
            parse_sample(tokens, vocab)

    def test_empty_summary_flagged(self, vocab):
        tokens = []
        for i in range(1, 7):
            tokens += [vocab.think_open(i), 70 + i, vocab.think_close(i)]
        tokens += [vocab.summary_open, vocab.summary_close]
        parsed = parse_sample(tokens, vocab)
        assert parsed.empty_answer and parsed.answer == ()
        assert len(parsed.paths) == 6


class TestTrainingLayout:
    def test_masks_match_masking_module(self, vocab):
        sample = build_sample(problem(2), vocab, p_hat=2, seed=7)
        tl = training_layout(sample, vocab)
        plan = tl.layout
        assert plan.stage == REASONING
        summary = build_summary_mask(plan.with_stage(SUMMARIZATION))
        for i in range(plan.num_paths):
            reasoning = build_reasoning_mask(plan, i)
            for t in plan.path_slots(i):
                assert np.array_equal(tl.mask.visible[t], reasoning.visible[t])
        for t in plan.answer_slots():
            assert np.array_equal(tl.mask.visible[t], summary.visible[t])

    def test_single_path_is_standard_causal(self, vocab):
        sample = build_sample(problem(1), vocab, p_hat=1, seed=0)
        tl = training_layout(sample, vocab)
        n = len(tl.tokens)
        assert np.array_equal(tl.mask.visible, np.tril(np.ones((n, n), dtype=bool)))

    def test_positions_follow_shared_scheme(self, vocab):
        sample = build_sample(problem(3), vocab, p_hat=2, seed=2)
        tl = training_layout(sample, vocab)
        plan = tl.layout
        l_x = plan.l_x
        assert tl.positions[: l_x].tolist() == list(range(1, l_x + 1))
        for i in range(plan.num_paths):
            slots = list(plan.path_slots(i))
            assert tl.positions[slots].tolist() == [
                l_x + t + 1 for t in range(len(slots))
            ]
        answer = list(plan.answer_slots())
        seg_len = plan.path_lengths[0]
        assert tl.positions[answer].tolist() == [
            l_x + seg_len + t + 1 for t in range(len(answer))
        ]

    def test_padding_and_loss_mask(self, vocab):
        uneven = RawProblem(query="q", answer="a", paths=("short", "a much longer path"))
        sample = build_sample(uneven, vocab, p_hat=2, seed=4)
        tl = training_layout(sample, vocab)
        plan = tl.layout
        assert len(set(plan.path_lengths)) == 1
        pad_slots = [t for t in range(len(tl.tokens)) if tl.tokens[t] == vocab.pad]
        assert pad_slots, "expected the short path to be padded"
        assert all(tl.loss_mask[t] == 0 for t in pad_slots)
        assert all(tl.loss_mask[t] == 0 for t in plan.prompt_slots())
        for i in range(plan.num_paths):
            slots = list(plan.path_slots(i))
            assert tl.loss_mask[slots[0]] == 0  # opener carries no loss
        answer = list(plan.answer_slots())
        assert tl.loss_mask[answer[0]] == 0  # engine inserts the summary opener
        assert tl.loss_mask[answer[-1]] == 1  # the closer is predicted

    def test_thought_indices_track_labels(self, vocab):
        sample = build_sample(problem(4), vocab, p_hat=2, seed=9)
        tl = training_layout(sample, vocab)
        plan = tl.layout
        for i, (label, _) in enumerate(parse_sample(sample.tokens, vocab).paths):
            slots = list(plan.path_slots(i))
            assert set(tl.thought_indices[slots].tolist()) == {label}
        assert set(tl.thought_indices[list(plan.prompt_slots())].tolist()) == {0}

    def test_context_limit(self, vocab):
        # 10 prompt + (28649 + 2) + (10 + 2) = 28,673: one past the limit
        over = RawProblem(query="q" * 10, answer="a" * 10, paths=("x" * 28649,))
        sample = build_sample(over, vocab, p_hat=1, seed=0, template=None)
        with pytest.raises(LayoutError):
            training_layout(sample, vocab)

    def test_context_limit_boundary(self, vocab):
        # same boundary semantics, exercised at a desk-scale limit
        prob = RawProblem(query="q" * 10, answer="a" * 10, paths=("x" * 76,))
        sample = build_sample(prob, vocab, p_hat=1, seed=0, template=None)
        # 10 + 78 + 12 = 100 tokens exactly
        assert len(training_layout(sample, vocab, max_context=100).tokens) == 100
        with pytest.raises(LayoutError):
            training_layout(sample, vocab, max_context=99)
        assert MAX_CONTEXT_TOKENS == 28672


class TestJsonl:
    def test_problem_schema_requires_format(self):
        with pytest.raises(DataError):
            problem_from_record({"query": "q", "answer": "a", "paths": ["p"]})

    def test_io_round_trip(self, vocab, tmp_path):
        problems_path = tmp_path / "problems.jsonl"
        with open(problems_path, "w") as fh:
            for i in range(3):
                fh.write(
                    json.dumps(
                        {
                            "format": "ptsft-1",
                            "query": f"question {i}",
                            "answer": str(i),
                            "paths": [f"r{i}a", f"r{i}b"],
                        }
                    )
                    + "\n"
                )
        problems = read_problems(str(problems_path))
        assert len(problems) == 3

        records = []
        for i, prob in enumerate(problems):
            sample = build_sample(prob, vocab, p_hat=2, seed=i)
            records.append(training_record(sample, training_layout(sample, vocab)))
        out_path = tmp_path / "train.jsonl"
        write_training_records(records, str(out_path))
        lines = [json.loads(l) for l in open(out_path) if l.strip()]
        assert all(rec["format"] == "ptsft-1" for rec in lines)
        assert all(
            len(rec["tokens"]) == len(rec["loss_mask"]) for rec in lines
        )
        assert lines[0]["P"] == 2

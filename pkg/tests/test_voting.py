from __future__ import annotations

import itertools
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lateqa.errors import InvalidInputError
from lateqa.voting import TrialRecord, fuse_models, run_vote_protocol, shuffle_options, unshuffle
from oracles import vote_oracle

OPTIONS = [f"opt-{c}" for c in "ABCDEFGHIJ"]
A, B, C, D = 1, 2, 3, 4


def canonical_executor(script):
    """Executor that answers scripted *canonical* options by locating their text in the shuffled list."""
    calls = []

    def run(shuffled, trial_no):
        calls.append(trial_no)
        target = script[trial_no - 1]
        if target is None:
            return None
        return shuffled.index(OPTIONS[target - 1]) + 1

    return run, calls


def vote(script, qid="q1"):
    ex, calls = canonical_executor(script)
    return run_vote_protocol(ex, OPTIONS, qid), calls


def test_worked_examples():
    o, calls = vote([A, A, B, None, None])
    assert (o.final_answer, o.decided_by, o.rounds_used, calls) == (A, "majority", 1, [1, 2, 3])
    o, _ = vote([A, B, C, B, None])
    assert (o.final_answer, o.decided_by, o.rounds_used) == (B, "second_round_majority", 2)
    o, _ = vote([A, A, A, None, None])
    assert (o.final_answer, o.decided_by) == (A, "majority")
    o, calls = vote([A, B, C, D, C])
    assert (o.final_answer, o.decided_by, o.rounds_used, calls) == (C, "final_inference", 3, [1, 2, 3, 4, 5])


def test_all_abstain_falls_back_to_option_one():
    o, calls = vote([None] * 5)
    assert (o.final_answer, o.decided_by, len(calls)) == (1, "final_inference", 5)


def test_final_abstain_uses_lowest_voted_option():
    o, _ = vote([7, 4, None, 9, None])
    assert (o.final_answer, o.decided_by) == (4, "final_inference")


def test_exhaustive_decision_table():
    values = [None] + list(range(1, 11))
    rnd = random.Random(0)
    n = 0
    for r1 in itertools.product(values, repeat=3):
        # every round-2 answer is checked; round 3 is sampled to keep the run short
        for r2 in values:
            r3 = rnd.choice(values)
            o, calls = vote([*r1, r2, r3], qid=f"q{n}")
            want = vote_oracle(r1, r2, r3)
            assert (o.final_answer, o.decided_by, o.rounds_used) == want, (r1, r2, r3)
            assert 1 <= o.final_answer <= 10
            assert len(calls) == {1: 3, 2: 4, 3: 5}[o.rounds_used]
            if o.decided_by == "majority":
                votes = [t.canonical_answer_index for t in o.trials if t.round == 1]
                assert votes.count(o.final_answer) >= 2
            n += 1
    assert n == 11**4


def test_round_one_shuffles_are_distinct():
    for qid in range(200):
        o, _ = vote([A, B, C, D, A], qid=f"q{qid}")
        perms = [t.permutation for t in o.trials if t.round == 1]
        assert len(set(perms)) == 3


def test_shuffle_determinism_and_bijection():
    s1, p1 = shuffle_options(OPTIONS, "qx", 1, 7)
    s2, p2 = shuffle_options(OPTIONS, "qx", 1, 7)
    assert (s1, p1) == (s2, p2)
    assert sorted(p1) == list(range(10))
    assert [s1[p1.index(i)] for i in range(10)] == OPTIONS
    for i in range(1, 11):
        assert s1[i - 1] == OPTIONS[unshuffle(i, p1) - 1]
    assert shuffle_options(OPTIONS, "qx", 1, 8)[1] != p1 or shuffle_options(OPTIONS, "qx", 1, 9)[1] != p1


def test_shuffle_trials_differ():
    differ = sum(shuffle_options(OPTIONS, f"q{i}", 1)[1] != shuffle_options(OPTIONS, f"q{i}", 2)[1] for i in range(100))
    assert differ >= 99


def test_shuffle_requires_ten():
    with pytest.raises(InvalidInputError):
        shuffle_options(OPTIONS[:9], "q", 1)


def test_content_keyed_executor_is_shuffle_invariant():
    for i in range(100):
        rnd = random.Random(i)
        options = [f"q{i}-text-{rnd.random():.6f}" for _ in range(10)]
        target = options[rnd.randrange(10)]

        def content(shuffled, trial_no):
            return shuffled.index(target) + 1

        canon = set()
        for trial in range(1, 6):
            shuffled, perm = shuffle_options(options, f"q{i}", trial)
            canon.add(unshuffle(content(shuffled, trial), perm))
        assert canon == {options.index(target) + 1}
        o = run_vote_protocol(content, options, f"q{i}")
        assert o.final_answer == options.index(target) + 1 and o.decided_by == "majority"
        assert {t.canonical_answer_index for t in o.trials} == {o.final_answer}


def test_out_of_range_answers_are_abstentions():
    answers = iter([11, 0, "3", 2, 2])
    o = run_vote_protocol(lambda s, n: next(answers), OPTIONS, "q")
    assert [t.shuffled_answer_index for t in o.trials][:3] == [None, None, None]


def test_executor_failure_carries_partial_log():
    def boom(shuffled, trial_no):
        if trial_no == 3:
            raise RuntimeError("model crashed")
        return 1

    with pytest.raises(RuntimeError) as e:
        run_vote_protocol(boom, OPTIONS, "q")
    assert [t.trial_no for t in e.value.partial_trials] == [1, 2]


def test_trial_record_invariant():
    with pytest.raises(InvalidInputError):
        TrialRecord(1, 1, tuple(range(10)), 3, 4)
    with pytest.raises(InvalidInputError):
        TrialRecord(1, 1, (0, 0, 1, 2, 3, 4, 5, 6, 7, 8), None, None)


def test_audit_record_shape():
    o, _ = vote([A, B, C, B, None])
    d = o.to_dict()
    assert d["decided_by"] == "second_round_majority"
    assert len(d["trials"]) == 4 and len(d["tallies"]) == 2
    assert d["tallies"][1] == {"1": 1, "2": 2, "3": 1}


# -- fusion -------------------------------------------------------------------------


def test_fusion_examples():
    assert fuse_models({"m1": A, "m2": A, "m3": B}, ["m1", "m2", "m3"]) == A
    assert fuse_models({"m1": A, "m2": B}, ["m2", "m1"]) == B
    assert fuse_models({"m1": C, "m2": C, "m3": C}, ["m3", "m1", "m2"]) == C
    o, _ = vote([D, D, A, None, None])
    assert fuse_models({"m1": o, "m2": D}, ["m1", "m2"]) == D


def test_fusion_errors():
    with pytest.raises(InvalidInputError):
        fuse_models({}, [])
    with pytest.raises(InvalidInputError):
        fuse_models({"m1": A}, ["m1"])
    with pytest.raises(InvalidInputError):
        fuse_models({"m1": A, "m2": B}, ["m1"])


@given(st.dictionaries(st.sampled_from([f"m{i}" for i in range(6)]), st.integers(1, 10), min_size=2),
       st.randoms(use_true_random=False))
def test_fusion_order_invariant(answers, rnd):
    priority = sorted(answers)
    rnd.shuffle(priority)
    items = list(answers.items())
    rnd.shuffle(items)
    result = fuse_models(dict(items), priority)
    assert result == fuse_models(answers, priority)
    counts = {a: list(answers.values()).count(a) for a in answers.values()}
    assert counts[result] == max(counts.values())

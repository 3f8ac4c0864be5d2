"""Shuffled-option voting and cross-model fusion.

Round 1 runs three trials, each on a differently shuffled option list. An
option with at least two votes wins outright. Otherwise one more shuffled
trial is run; if it agrees with a round-1 vote and that option then holds a
strict plurality, it wins. Otherwise a final trial decides; if that trial
abstains too, the lowest-numbered option that received any vote is used, and
option 1 if nothing was ever voted for. Abstentions are never counted as votes.
"""

from __future__ import annotations

import hashlib
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from .errors import InvalidInputError

N_OPTIONS = 10
ROUND1_TRIALS = 3

# executor(options_in_presented_order, trial_no) -> 1-based index into that list, or None to abstain
TrialExecutor = Callable[[list, int], "int | None"]


def stable_seed(*parts) -> int:
    blob = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


def shuffle_options(
    options: Sequence[str], question_id: str, trial_no: int, global_seed: int = 0, salt: int = 0
) -> tuple[list[str], tuple[int, ...]]:
    """Deterministically permute ``options``.

    Returns ``(shuffled, permutation)`` with ``shuffled[i] == options[permutation[i]]``.
    """
    if len(options) != N_OPTIONS:
        raise InvalidInputError(f"expected exactly {N_OPTIONS} options, got {len(options)}")
    seed_parts = (question_id, trial_no, global_seed) if salt == 0 else (question_id, trial_no, global_seed, salt)
    perm = list(range(len(options)))
    random.Random(stable_seed(*seed_parts)).shuffle(perm)
    return [options[i] for i in perm], tuple(perm)


def unshuffle(shuffled_index: int | None, permutation: Sequence[int]) -> int | None:
    if shuffled_index is None:
        return None
    return permutation[shuffled_index - 1] + 1


@dataclass(frozen=True)
class TrialRecord:
    trial_no: int
    round: int
    permutation: tuple[int, ...]
    shuffled_answer_index: int | None
    canonical_answer_index: int | None

    def __post_init__(self):
        if sorted(self.permutation) != list(range(len(self.permutation))):
            raise InvalidInputError(f"not a permutation: {self.permutation}")
        if self.canonical_answer_index != unshuffle(self.shuffled_answer_index, self.permutation):
            raise InvalidInputError("canonical answer does not match the un-permuted shuffled answer")

    def to_dict(self) -> dict:
        return {
            "trial_no": self.trial_no,
            "round": self.round,
            "permutation": list(self.permutation),
            "shuffled_answer_index": self.shuffled_answer_index,
            "canonical_answer_index": self.canonical_answer_index,
        }


@dataclass(frozen=True)
class VoteOutcome:
    final_answer: int
    decided_by: str  # majority | second_round_majority | final_inference
    trials: tuple[TrialRecord, ...]
    rounds_used: int
    tallies: tuple[dict, ...] = field(default=())
    question_id: str = ""
    global_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "question_id": self.question_id,
            "global_seed": self.global_seed,
            "final_answer": self.final_answer,
            "decided_by": self.decided_by,
            "rounds_used": self.rounds_used,
            "tallies": [{str(k): v for k, v in sorted(t.items())} for t in self.tallies],
            "trials": [t.to_dict() for t in self.trials],
        }


def _run_trial(executor, options, question_id, trial_no, rnd, global_seed, used):
    salt = 0
    shuffled, perm = shuffle_options(options, question_id, trial_no, global_seed)
    while perm in used:
        salt += 1
        shuffled, perm = shuffle_options(options, question_id, trial_no, global_seed, salt)
    used.add(perm)
    answer = executor(shuffled, trial_no)
    if answer is not None and not (isinstance(answer, int) and 1 <= answer <= len(options)):
        answer = None
    return TrialRecord(trial_no, rnd, perm, answer, unshuffle(answer, perm))


def run_vote_protocol(
    executor: TrialExecutor, options: Sequence[str], question_id: str, global_seed: int = 0
) -> VoteOutcome:
    """Run the three-round voting protocol; always returns a valid option.

    If ``executor`` raises, the exception propagates with the trials completed
    so far attached as ``exc.partial_trials``.
    """
    options = list(options)
    trials: list[TrialRecord] = []
    used: set = set()

    def trial(trial_no: int, rnd: int, distinct: bool) -> TrialRecord:
        try:
            rec = _run_trial(executor, options, question_id, trial_no, rnd, global_seed, used if distinct else set())
        except Exception as exc:
            exc.partial_trials = list(trials)
            raise
        trials.append(rec)
        return rec

    def outcome(answer, decided_by, rounds, tallies):
        return VoteOutcome(answer, decided_by, tuple(trials), rounds, tuple(tallies), question_id, global_seed)

    for n in range(1, ROUND1_TRIALS + 1):
        trial(n, 1, distinct=True)
    tally1 = Counter(t.canonical_answer_index for t in trials if t.canonical_answer_index is not None)
    if tally1:
        top, count = min(tally1.items(), key=lambda kv: (-kv[1], kv[0]))
        if count >= 2:
            return outcome(top, "majority", 1, [dict(tally1)])

    r2 = trial(ROUND1_TRIALS + 1, 2, distinct=False)
    tally2 = Counter(tally1)
    if r2.canonical_answer_index is not None:
        tally2[r2.canonical_answer_index] += 1
        a = r2.canonical_answer_index
        if a in tally1 and all(tally2[a] > c for k, c in tally2.items() if k != a):
            return outcome(a, "second_round_majority", 2, [dict(tally1), dict(tally2)])

    r3 = trial(ROUND1_TRIALS + 2, 3, distinct=False)
    if r3.canonical_answer_index is not None:
        final = r3.canonical_answer_index
    elif tally2:
        final = min(tally2)
    else:
        final = 1
    tally3 = Counter(tally2)
    if r3.canonical_answer_index is not None:
        tally3[r3.canonical_answer_index] += 1
    return outcome(final, "final_inference", 3, [dict(tally1), dict(tally2), dict(tally3)])


def fuse_models(per_model: Mapping[str, "VoteOutcome | int"], priority: Sequence[str]) -> int:
    """Plurality over each model's final answer; ties go to the answer of the
    highest-priority model among those backing a tied answer."""
    if not per_model:
        raise InvalidInputError("fuse_models needs at least one model outcome")
    if len(per_model) < 2:
        raise InvalidInputError("fusion needs at least two models")
    missing = set(per_model) - set(priority)
    if missing:
        raise InvalidInputError(f"priority list does not cover models {sorted(missing)}")
    answers = {m: (o.final_answer if isinstance(o, VoteOutcome) else int(o)) for m, o in per_model.items()}
    tally = Counter(answers.values())
    best = max(tally.values())
    tied = {a for a, c in tally.items() if c == best}
    for model in priority:
        if model in answers and answers[model] in tied:
            return answers[model]
    raise AssertionError("unreachable: priority covers every model")

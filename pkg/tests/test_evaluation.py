from __future__ import annotations

import json

import pytest

from lateqa.errors import ConfigError, DatasetError, FixtureMissingError, InvalidInputError
from lateqa.evaluation import (
    ABLATION_ARMS,
    PipelineConfig,
    QuestionItem,
    answer_question,
    interpolate_env,
    load_config,
    load_dataset,
    run_benchmark,
    score_predictions,
)
from lateqa.gateway import MockBackend, Transcript

OPTS = [f"o{i}" for i in range(1, 11)]


def line(qid="q1", n_opts=10, **kw):
    d = {"question_id": qid, "doc_id": "docA", "question": "What?", "options": OPTS[:n_opts], "gold": 2}
    d.update(kw)
    return json.dumps(d)


def write_lines(tmp_path, *lines):
    p = tmp_path / "ds.jsonl"
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def counting_oracle(dataset, option):
    return sum(1 for q in dataset if q.gold_index == option) / len(dataset)


# -- dataset ----------------------------------------------------------------------


def test_load_dataset_valid(tmp_path):
    items = load_dataset(write_lines(tmp_path, line("a"), "", line("b"), line("c", gold=None)))
    assert [i.question_id for i in items] == ["a", "b", "c"]
    assert items[2].gold_index is None


@pytest.mark.parametrize(
    "bad, msg",
    [
        (line("x", n_opts=9), "9 options"),
        (line("q1"), "duplicate"),
        ('{"question_id": "x", ', "malformed JSON"),
        (line("x", gold=11), "gold"),
        (json.dumps({"question_id": "x"}), "missing field"),
    ],
)
def test_load_dataset_errors_name_the_line(tmp_path, bad, msg):
    with pytest.raises(DatasetError, match=msg) as e:
        load_dataset(write_lines(tmp_path, line("q1"), line("q2"), bad))
    assert e.value.line_no == 3 and str(e.value).startswith("line 3:")


def test_score_predictions_examples():
    golds = {f"q{i}": 1 for i in range(10)}
    assert score_predictions({f"q{i}": (1 if i < 5 else 2) for i in range(10)}, golds) == 0.5
    assert score_predictions(dict(golds), golds) == 1.0
    assert score_predictions({}, golds) == 0.0


def test_interpolate_env():
    env = {"HOST": "example.org"}
    assert interpolate_env({"u": "https://${HOST}/v1", "k": ["${MISSING:-dflt}"]}, env) == {
        "u": "https://example.org/v1", "k": ["dflt"]}
    with pytest.raises(ConfigError):
        interpolate_env("${MISSING}", env)


def test_config_validation(planted_dir):
    raw = json.loads((planted_dir / "config_planted.json").read_text())
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**raw, "temperature": 1})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({**raw, "features": {"use_magic": True}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"backends": {"embed": raw["backends"]["embed"]}})
    with pytest.raises(ConfigError):
        load_config(planted_dir / "absent.json")
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict(raw, planted_dir).with_arm("nope")


def test_fingerprint_ignores_parallelism(planted_dir):
    cfg = load_config(planted_dir / "config_planted.json")
    d = cfg.to_dict()
    d["parallelism"] = 4
    assert PipelineConfig.from_dict(d).fingerprint() == cfg.fingerprint()
    d["global_seed"] = 99
    assert PipelineConfig.from_dict(d).fingerprint() != cfg.fingerprint()


# -- end to end ---------------------------------------------------------------------


def test_planted_answers_score_one(planted_dir, planted_index):
    cfg = load_config(planted_dir / "config_planted.json")
    dataset = load_dataset(planted_dir / "dataset.jsonl")
    report = run_benchmark(cfg, dataset, planted_index)
    assert report.public_score == 1.0
    assert report.n_questions == 20 and report.n_correct == 20 and report.n_errored == 0
    assert {r["decided_by"] for r in report.per_question} == {"majority"}


def test_fixed_option_matches_counting_oracle(planted_dir, planted_index):
    cfg = load_config(planted_dir / "config_fixed.json")
    dataset = load_dataset(planted_dir / "dataset.jsonl")
    report = run_benchmark(cfg, dataset, planted_index)
    assert report.public_score == counting_oracle(dataset, 3)
    assert {r["predicted"] for r in report.per_question} == {3}


def test_reports_are_byte_identical(planted_dir, planted_index, tmp_path):
    cfg = load_config(planted_dir / "config_planted.json")
    dataset = load_dataset(planted_dir / "dataset.jsonl")
    outs = []
    for run, par in (("a", 1), ("b", 1), ("c", 4)):
        d = cfg.to_dict()
        d["parallelism"] = par
        report = run_benchmark(PipelineConfig.from_dict(d), dataset, planted_index,
                               transcript_path=tmp_path / f"{run}.jsonl")
        report.write(tmp_path / f"{run}.json")
        outs.append(tuple((tmp_path / f"{run}{ext}").read_bytes() for ext in (".json", ".csv", ".jsonl")))
    assert outs[0] == outs[1] == outs[2]


def test_resume_matches_uninterrupted_run(planted_dir, planted_index, tmp_path):
    cfg = load_config(planted_dir / "config_planted.json")
    dataset = load_dataset(planted_dir / "dataset.jsonl")
    full = run_benchmark(cfg, dataset, planted_index, transcript_path=tmp_path / "full.jsonl")

    audit = tmp_path / "audit"
    run_benchmark(cfg, dataset[:7], planted_index, audit_dir=audit)  # "interrupted" after 7 questions
    assert len(list(audit.glob("*.json"))) == 7

    calls = []
    original = MockBackend.chat

    def counting_chat(self, request):
        calls.append(request.stage)
        return original(self, request)

    MockBackend.chat = counting_chat
    try:
        resumed = run_benchmark(cfg, dataset, planted_index, audit_dir=audit, transcript_path=tmp_path / "res.jsonl")
    finally:
        MockBackend.chat = original
    assert resumed.to_json() == full.to_json()
    assert (tmp_path / "res.jsonl").read_bytes() == (tmp_path / "full.jsonl").read_bytes()
    # only the 13 unfinished questions reached the models
    assert calls.count("filter") == 13


def test_resume_ignores_records_from_other_configs(planted_dir, planted_index, tmp_path):
    dataset = load_dataset(planted_dir / "dataset.jsonl")
    audit = tmp_path / "audit"
    run_benchmark(load_config(planted_dir / "config_fixed.json"), dataset, planted_index, audit_dir=audit)
    report = run_benchmark(load_config(planted_dir / "config_planted.json"), dataset, planted_index, audit_dir=audit)
    assert report.public_score == 1.0


def test_empty_dataset(planted_dir, planted_index):
    with pytest.raises(InvalidInputError):
        run_benchmark(load_config(planted_dir / "config_planted.json"), [], planted_index)


def test_missing_doc_is_errored_and_counted_wrong(planted_dir, planted_index):
    dataset = load_dataset(planted_dir / "dataset.jsonl")[:3]
    dataset.append(QuestionItem("zz", "docMissing", "?", tuple(OPTS), 1))
    report = run_benchmark(load_config(planted_dir / "config_planted.json"), dataset, planted_index)
    assert report.n_errored == 1 and report.n_correct == 3 and report.public_score == 0.75
    row = next(r for r in report.per_question if r["question_id"] == "zz")
    assert row["predicted"] is None and "docMissing" in row["error"]


def test_blind_set_has_no_score(planted_dir, planted_index):
    dataset = [QuestionItem(q.question_id, q.doc_id, q.question_text, q.options, None)
               for q in load_dataset(planted_dir / "dataset.jsonl")[:2]]
    report = run_benchmark(load_config(planted_dir / "config_planted.json"), dataset, planted_index)
    assert report.public_score is None and report.n_correct == 0


def test_fixture_miss_is_loud(planted_dir, planted_index):
    dataset = [QuestionItem("new", "docA", "A question no rule covers", tuple(OPTS), 1)]
    with pytest.raises(FixtureMissingError):
        run_benchmark(load_config(planted_dir / "config_planted.json"), dataset, planted_index)


EXPECTED_STAGES = {
    "baseline": ["embed_query", "retrieve", "filter", "answer", "vote"],
    "decomposition": ["embed_query", "retrieve", "filter", "decompose", "answer", "vote"],
    "bilingual": ["embed_query", "retrieve", "filter", "decompose", "answer", "vote"],
    "region": ["embed_query", "retrieve", "filter", "region_refine", "decompose", "answer", "vote"],
}


@pytest.mark.parametrize("arm", sorted(ABLATION_ARMS))
def test_ablation_arms_run_exactly_their_stages(planted_dir, planted_index, arm):
    cfg = load_config(planted_dir / "config_planted.json").with_arm(arm)
    item = load_dataset(planted_dir / "dataset.jsonl")[0]
    t = Transcript()
    record = answer_question(cfg, item, planted_index, transcript=t)
    assert record["stages"] == EXPECTED_STAGES[arm]
    chat_stages = [r["request"]["stage"] for r in t.records if r["type"] == "chat"]
    assert ("region" in chat_stages) == (arm == "region")
    assert ("decompose" in chat_stages) == (arm != "baseline")
    first = next((r["request"] for r in t.records if r["type"] == "chat" and r["request"]["stage"] == "decompose"), None)
    if first is not None:
        # the bilingual arms add the Japanese block after the English one
        assert ("質問:" in first["user_text"]) == (arm in ("bilingual", "region"))
    assert record["correct"]


def test_every_flag_combination_runs_its_stage_set(planted_dir, planted_index):
    import itertools

    base = load_config(planted_dir / "config_planted.json").to_dict()
    item = load_dataset(planted_dir / "dataset.jsonl")[5]
    for flags in itertools.product([False, True], repeat=4):
        use_filter, use_dec, use_region, use_voting = flags
        d = json.loads(json.dumps(base))
        d["features"].update(use_filter=use_filter, use_decomposition=use_dec, use_region_refine=use_region,
                             use_voting=use_voting)
        record = answer_question(PipelineConfig.from_dict(d), item, planted_index)
        want = ["embed_query", "retrieve"] + ["filter"] * use_filter + ["region_refine"] * use_region \
            + ["decompose"] * use_dec + ["answer"] + ["vote"] * use_voting
        assert record["stages"] == want
        assert record["decided_by"] == ("majority" if use_voting else "single_trial")
        # the planted mock picks the gold option by content, so voting or not it is right
        assert record["correct"]


def test_transcript_replay_reproduces_decisions(planted_dir, planted_index, tmp_path):
    cfg = load_config(planted_dir / "config_planted.json")
    item = load_dataset(planted_dir / "dataset.jsonl")[3]
    t = Transcript()
    original = answer_question(cfg, item, planted_index, transcript=t)

    replay = MockBackend.from_transcript(t.records, scenario_id="replay")
    (tmp_path / "replay.json").write_text(json.dumps(replay.scenario), encoding="utf-8")
    backend = {"kind": "mock", "fixtures_dir": str(tmp_path), "scenario_id": "replay"}
    d = cfg.to_dict()
    d["backends"] = {"default": backend}
    replayed = answer_question(PipelineConfig.from_dict(d), item, planted_index)
    for key in ("hits", "filter", "region_refine", "decomposition", "models", "predicted", "decided_by", "pages_used"):
        assert replayed[key] == original[key], key


def test_fusion_across_answer_models(planted_dir, planted_index):
    raw = json.loads((planted_dir / "config_planted.json").read_text())
    planted = {"kind": "mock", "fixtures_dir": "scenarios", "scenario_id": "planted"}
    fixed = {"kind": "mock", "fixtures_dir": "scenarios", "scenario_id": "fixed"}
    raw["answer_models"] = {"good": planted, "bad1": fixed, "bad2": fixed}
    raw["features"]["use_voting"] = False  # fixed-position models then always vote canonical option 3
    dataset = load_dataset(planted_dir / "dataset.jsonl")

    raw["fusion_models"] = ["good", "bad1", "bad2"]
    report = run_benchmark(PipelineConfig.from_dict(raw, planted_dir), dataset, planted_index)
    # two fixed-option models outvote the planted one
    assert report.public_score == counting_oracle(dataset, 3)
    assert {r["decided_by"] for r in report.per_question} == {"fusion"}

    raw["answer_models"] = {"good": planted, "bad1": fixed}
    raw["fusion_models"] = ["good", "bad1"]
    assert run_benchmark(PipelineConfig.from_dict(raw, planted_dir), dataset, planted_index).public_score == 1.0
    raw["fusion_models"] = ["bad1", "good"]
    assert run_benchmark(PipelineConfig.from_dict(raw, planted_dir), dataset, planted_index).public_score == \
        counting_oracle(dataset, 3)


def test_report_files(planted_dir, planted_index, tmp_path):
    cfg = load_config(planted_dir / "config_planted.json")
    report = run_benchmark(cfg, load_dataset(planted_dir / "dataset.jsonl")[:2], planted_index)
    json_path, csv_path = report.write(tmp_path / "out" / "report.json")
    assert json.loads(json_path.read_text())["public_score"] == 1.0
    rows = csv_path.read_text().splitlines()
    assert rows[0] == "question_id,predicted,gold,correct,decided_by,rounds_used,pages_used,error"
    assert len(rows) == 3

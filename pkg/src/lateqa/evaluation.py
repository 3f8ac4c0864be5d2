"""Dataset loading, the per-question pipeline, benchmark runs and scoring.

Dataset lines (JSONL)::

    {"question_id": "q1", "doc_id": "docA", "question": "...",
     "options": ["...", ... 10 strings], "gold": 3}

``gold`` is optional (blind sets). Public Score is plain top-1 accuracy over
the questions that have a gold answer; errored questions count as wrong.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import re
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from urllib.parse import quote

from .errors import (
    ConfigError,
    DatasetError,
    DecompositionFailedError,
    FixtureMissingError,
    InvalidInputError,
    LateQAError,
)
from .gateway import BackendConfig, Gateway, ImagePart, Transcript
from .qa.pipeline import MAX_PAGES, N_OPTIONS, answer_second_step, decompose_first_step, filter_pages
from .qa.templates import TemplateSet, default_templates
from .qa.types import CandidatePage
from .region import load_manual_regions, refine_retrieval_set
from .retrieval.index import PageIndex, retrieve_topk
from .voting import fuse_models, run_vote_protocol

logger = logging.getLogger(__name__)

STAGES = ("embed_query", "retrieve", "filter", "region_refine", "decompose", "answer", "vote", "fuse")


@dataclass(frozen=True)
class QuestionItem:
    question_id: str
    doc_id: str
    question_text: str
    options: tuple[str, ...]
    gold_index: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "options", tuple(self.options))
        if len(self.options) != N_OPTIONS:
            raise InvalidInputError(f"question {self.question_id!r} has {len(self.options)} options, expected {N_OPTIONS}")
        if any(not isinstance(o, str) or not o.strip() for o in self.options):
            raise InvalidInputError(f"question {self.question_id!r} has an empty or non-string option")
        if self.gold_index is not None and not (
            isinstance(self.gold_index, int) and not isinstance(self.gold_index, bool) and 1 <= self.gold_index <= N_OPTIONS
        ):
            raise InvalidInputError(f"question {self.question_id!r} has gold {self.gold_index!r} outside 1..{N_OPTIONS}")
        if not self.question_id or not self.doc_id or not self.question_text.strip():
            raise InvalidInputError("question_id, doc_id and question must be non-empty")

    @classmethod
    def from_dict(cls, d: Mapping) -> "QuestionItem":
        if not isinstance(d, Mapping):
            raise InvalidInputError("question record must be a JSON object")
        for key in ("question_id", "doc_id", "question", "options"):
            if key not in d:
                raise InvalidInputError(f"missing field {key!r}")
        if not isinstance(d["options"], list):
            raise InvalidInputError("options must be a list")
        qid = d["question_id"]
        if isinstance(qid, bool) or not isinstance(qid, (str, int)):
            raise InvalidInputError("question_id must be a string")
        return cls(str(qid), str(d["doc_id"]), str(d["question"]), tuple(d["options"]), d.get("gold"))

    def to_dict(self) -> dict:
        d = {"question_id": self.question_id, "doc_id": self.doc_id, "question": self.question_text, "options": list(self.options)}
        if self.gold_index is not None:
            d["gold"] = self.gold_index
        return d


def load_dataset(path) -> list[QuestionItem]:
    items, seen = [], {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except ValueError as exc:
                raise DatasetError(f"malformed JSON: {exc}", line_no) from None
            try:
                item = QuestionItem.from_dict(record)
            except InvalidInputError as exc:
                raise DatasetError(str(exc), line_no) from None
            if item.question_id in seen:
                raise DatasetError(
                    f"duplicate question_id {item.question_id!r} (first seen on line {seen[item.question_id]})", line_no
                )
            seen[item.question_id] = line_no
            items.append(item)
    return items


def score_predictions(predictions: Mapping[str, int | None], golds: Mapping[str, int]) -> float:
    """Fraction of gold-labelled questions predicted correctly; missing predictions are wrong."""
    if not golds:
        return 0.0
    correct = sum(1 for qid, gold in golds.items() if predictions.get(qid) == gold)
    return correct / len(golds)


# -- configuration ---------------------------------------------------------

_ENV_REF = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate_env(value, env: Mapping[str, str] | None = None):
    """Replace ``${VAR}`` / ``${VAR:-default}`` in every string of a JSON value."""
    env = os.environ if env is None else env
    if isinstance(value, str):
        def sub(m):
            name, default = m.group(1), m.group(2)
            if name in env:
                return env[name]
            if default is not None:
                return default
            raise ConfigError(f"environment variable {name} is referenced by the config but not set")
        return _ENV_REF.sub(sub, value)
    if isinstance(value, list):
        return [interpolate_env(v, env) for v in value]
    if isinstance(value, dict):
        return {k: interpolate_env(v, env) for k, v in value.items()}
    return value


FEATURE_FLAGS = ("use_filter", "use_decomposition", "bilingual_first_stage", "use_region_refine", "use_voting")

# Ablation arms, cumulative left to right.
ABLATION_ARMS = {
    "baseline": dict(use_filter=True, use_decomposition=False, bilingual_first_stage=False, use_region_refine=False),
    "decomposition": dict(use_filter=True, use_decomposition=True, bilingual_first_stage=False, use_region_refine=False),
    "bilingual": dict(use_filter=True, use_decomposition=True, bilingual_first_stage=True, use_region_refine=False),
    "region": dict(use_filter=True, use_decomposition=True, bilingual_first_stage=True, use_region_refine=True),
}


@dataclass(frozen=True)
class PipelineConfig:
    backends: Mapping[str, BackendConfig]
    use_filter: bool = True
    use_decomposition: bool = True
    bilingual_first_stage: bool = True
    use_region_refine: bool = False
    use_voting: bool = True
    fusion_models: tuple[str, ...] = ()
    answer_models: Mapping[str, BackendConfig] = field(default_factory=dict)
    k: int = 3
    global_seed: int = 0
    parallelism: int = 1
    templates_dir: str | None = None
    manual_regions: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "fusion_models", tuple(self.fusion_models))
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if len(self.fusion_models) == 1:
            raise ConfigError("fusion needs at least two models")
        for m in self.fusion_models:
            if m not in self.answer_models:
                raise ConfigError(f"fusion model {m!r} has no entry in answer_models")
        needed = ["embed", "answer"]
        if self.use_filter:
            needed.append("filter")
        if self.use_decomposition:
            needed.append("decompose")
        if self.use_region_refine and not self.manual_regions:
            needed.append("region")
        if self.fusion_models:
            needed.remove("answer")
        for stage in needed:
            self.backend_for(stage)

    def backend_for(self, stage: str) -> BackendConfig:
        cfg = self.backends.get(stage) or self.backends.get("default")
        if cfg is None:
            raise ConfigError(f"no backend configured for stage {stage!r} (and no 'default')")
        return cfg

    def with_arm(self, arm: str) -> "PipelineConfig":
        if arm not in ABLATION_ARMS:
            raise ConfigError(f"unknown ablation arm {arm!r}; choose from {sorted(ABLATION_ARMS)}")
        d = self.to_dict()
        d["features"].update(ABLATION_ARMS[arm])
        return PipelineConfig.from_dict(d)

    @classmethod
    def from_dict(cls, raw: Mapping, base_dir: Path | None = None) -> "PipelineConfig":
        raw = interpolate_env(dict(raw))
        known = {"features", "backends", "answer_models", "fusion_models", "k", "global_seed", "parallelism",
                 "templates_dir", "manual_regions", *FEATURE_FLAGS}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        flags = {**{k: raw[k] for k in FEATURE_FLAGS if k in raw}, **raw.get("features", {})}
        bad = set(flags) - set(FEATURE_FLAGS)
        if bad:
            raise ConfigError(f"unknown feature flags: {sorted(bad)}")

        def resolve(p):
            if p is None or base_dir is None:
                return p
            return str((Path(base_dir) / p).resolve())

        return cls(
            backends={k: v if isinstance(v, BackendConfig) else BackendConfig.from_dict(v, base_dir)
                      for k, v in raw.get("backends", {}).items()},
            answer_models={k: v if isinstance(v, BackendConfig) else BackendConfig.from_dict(v, base_dir)
                           for k, v in raw.get("answer_models", {}).items()},
            fusion_models=tuple(raw.get("fusion_models", ())),
            k=int(raw.get("k", 3)),
            global_seed=int(raw.get("global_seed", 0)),
            parallelism=int(raw.get("parallelism", 1)),
            templates_dir=resolve(raw.get("templates_dir")),
            manual_regions=resolve(raw.get("manual_regions")),
            **{k: bool(v) for k, v in flags.items()},
        )

    def to_dict(self) -> dict:
        return {
            "features": {k: getattr(self, k) for k in FEATURE_FLAGS},
            "backends": {k: v.to_dict() for k, v in sorted(self.backends.items())},
            "answer_models": {k: v.to_dict() for k, v in sorted(self.answer_models.items())},
            "fusion_models": list(self.fusion_models),
            "k": self.k,
            "global_seed": self.global_seed,
            "parallelism": self.parallelism,
            "templates_dir": self.templates_dir,
            "manual_regions": self.manual_regions,
        }

    def fingerprint(self) -> str:
        d = self.to_dict()
        d.pop("parallelism")  # does not affect results
        blob = json.dumps(d, sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return PipelineConfig.from_dict(raw, base_dir=path.parent)


# -- the per-question pipeline ----------------------------------------------


class Pipeline:
    """Runs one question end to end. Safe to share across threads."""

    def __init__(self, config: PipelineConfig, index: PageIndex, image_root: Path | None = None,
                 crop_dir: Path | None = None):
        self.config = config
        self.index = index
        self.image_root = Path(image_root) if image_root else None
        self.crop_dir = crop_dir
        self.templates = TemplateSet(config.templates_dir) if config.templates_dir else default_templates()
        self.manual_regions = load_manual_regions(config.manual_regions) if config.manual_regions else None
        self._gateways: dict[str, Gateway] = {}
        for stage in ("embed", "filter", "decompose", "region", "answer"):
            try:
                self._gateways[stage] = Gateway(config.backend_for(stage))
            except ConfigError:
                pass
        self._models = {m: Gateway(c) for m, c in config.answer_models.items()}

    def _gw(self, stage: str, transcript: Transcript | None) -> Gateway:
        if stage not in self._gateways:
            raise ConfigError(f"no backend configured for stage {stage!r}")
        return self._gateways[stage].bind(transcript)

    def _image(self, image_ref: str, doc_id: str, page_no: int) -> ImagePart:
        if not image_ref:
            return ImagePart(ref=f"{doc_id}_{page_no:04d}")
        p = Path(image_ref)
        if not p.is_absolute() and self.image_root is not None:
            p = self.image_root / p
        return ImagePart(ref=p.stem, path=str(p))

    def run(self, item: QuestionItem, transcript: Transcript | None = None) -> dict:
        cfg = self.config
        stages, timings = [], {}
        record = {"question_id": item.question_id, "doc_id": item.doc_id, "gold": item.gold_index}

        def timed(stage, fn):
            t0 = time.perf_counter()
            out = fn()
            timings[stage] = round((time.perf_counter() - t0) * 1000, 3)
            stages.append(stage)
            return out

        query_emb = timed("embed_query", lambda: self._gw("embed", transcript).embed_multivector(item.question_text))
        hits = timed("retrieve", lambda: retrieve_topk(self.index, query_emb, cfg.k, doc_id=item.doc_id))
        record["hits"] = [h.to_dict() for h in hits]
        pages = [CandidatePage(h, self._image(h.image_ref, h.doc_id, h.page_no)) for h in hits][:MAX_PAGES]

        if cfg.use_filter:
            fr = timed("filter", lambda: filter_pages(self._gw("filter", transcript), item.question_text, pages, self.templates))
            pages = list(fr.pages)
            record["filter"] = fr.to_dict()

        if cfg.use_region_refine:
            manual = None
            if self.manual_regions is not None:
                manual = self.manual_regions.get(item.question_id, {})
            region_gw = self._gw("region", transcript) if manual is None else None
            rr = timed("region_refine", lambda: refine_retrieval_set(
                region_gw, self._gw("embed", transcript), query_emb, pages, item.question_text,
                manual, self.templates, self.crop_dir))
            pages = rr.pages
            record["region_refine"] = rr.to_dict()

        trace = None
        if cfg.use_decomposition:
            mode = "bilingual" if cfg.bilingual_first_stage else "english"
            try:
                trace = timed("decompose", lambda: decompose_first_step(
                    self._gw("decompose", transcript), pages, item.question_text, mode, self.templates))
                record["decomposition"] = trace.to_dict()
            except DecompositionFailedError as exc:
                stages.append("decompose")
                record["decomposition"] = {"failed": str(exc), "raw_model_text": exc.raw_text}

        models = list(cfg.fusion_models) or ["answer"]
        outcomes, per_model = {}, {}
        for model in models:
            gw = (self._models[model] if cfg.fusion_models else self._gateways["answer"]).bind(transcript)
            answers = []

            def answer(options, trial_no=0, gw=gw, answers=answers):
                sa = answer_second_step(gw, pages, item.question_text, options, trace, self.templates)
                answers.append({"trial_no": trial_no, **sa.to_dict()})
                return sa.answer_index

            if cfg.use_voting:
                outcome = run_vote_protocol(answer, item.options, item.question_id, cfg.global_seed)
                outcomes[model] = outcome
                per_model[model] = {"vote": outcome.to_dict(), "answers": answers}
            else:
                predicted = answer(list(item.options), 1)
                per_model[model] = {"predicted": predicted, "answers": answers}
        stages.append("answer")
        if cfg.use_voting:
            stages.append("vote")
        record["models"] = per_model

        if cfg.fusion_models:
            finals = {m: (outcomes[m].final_answer if cfg.use_voting else per_model[m]["predicted"]) for m in models}
            # an abstaining single-trial model has no answer to contribute
            finals = {m: a for m, a in finals.items() if a is not None}
            if len(finals) >= 2:
                predicted = fuse_models(finals, cfg.fusion_models)
            else:
                predicted = next(iter(finals.values()), None)
            stages.append("fuse")
            decided_by = "fusion"
            rounds = max((o.rounds_used for o in outcomes.values()), default=1)
        elif cfg.use_voting:
            o = outcomes["answer"]
            predicted, decided_by, rounds = o.final_answer, o.decided_by, o.rounds_used
        else:
            predicted, decided_by, rounds = per_model["answer"]["predicted"], "single_trial", 1

        record.update(
            predicted=predicted,
            correct=item.gold_index is not None and predicted == item.gold_index,
            decided_by=decided_by,
            rounds_used=rounds,
            pages_used=[[p.doc_id, p.page_no, p.replaced] for p in pages],
            stages=stages,
            timings_ms=timings,
            error=None,
        )
        return record


def error_record(item: QuestionItem, exc: Exception) -> dict:
    return {
        "question_id": item.question_id,
        "doc_id": item.doc_id,
        "gold": item.gold_index,
        "predicted": None,
        "correct": False,
        "decided_by": "error",
        "rounds_used": 0,
        "pages_used": [],
        "stages": [],
        "error": f"{type(exc).__name__}: {exc}",
    }


REPORT_FIELDS = ("question_id", "predicted", "gold", "correct", "decided_by", "rounds_used", "pages_used", "error")


@dataclass
class BenchmarkReport:
    public_score: float | None
    n_questions: int
    n_correct: int
    n_errored: int
    per_question: list[dict]
    config_fingerprint: str

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for row in self.per_question:
            pages = ";".join(f"{d}:{p}{'*' if r else ''}" for d, p, r in row["pages_used"])
            writer.writerow([row["question_id"], row["predicted"] if row["predicted"] is not None else "",
                             row["gold"] if row["gold"] is not None else "", int(row["correct"]),
                             row["decided_by"], row["rounds_used"], pages, row["error"] or ""])
        return buf.getvalue()

    def write(self, path) -> tuple[Path, Path]:
        path = Path(path)
        _atomic_write(path, self.to_json())
        csv_path = path.with_suffix(".csv")
        _atomic_write(csv_path, self.to_csv())
        return path, csv_path


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _audit_path(audit_dir: Path, qid: str, suffix: str = ".json") -> Path:
    return audit_dir / (quote(qid, safe="") + suffix)


def build_report(records: Iterable[dict], fingerprint: str) -> BenchmarkReport:
    rows = sorted((dict((k, r.get(k)) for k in REPORT_FIELDS) for r in records), key=lambda r: r["question_id"])
    golds = {r["question_id"]: r["gold"] for r in rows if r["gold"] is not None}
    preds = {r["question_id"]: r["predicted"] for r in rows}
    score = score_predictions(preds, golds) if golds else None
    return BenchmarkReport(
        public_score=score,
        n_questions=len(rows),
        n_correct=sum(1 for r in rows if r["correct"]),
        n_errored=sum(1 for r in rows if r["error"]),
        per_question=rows,
        config_fingerprint=fingerprint,
    )


def run_benchmark(
    config: PipelineConfig,
    dataset: Sequence[QuestionItem],
    index: PageIndex,
    audit_dir=None,
    transcript_path=None,
    image_root=None,
) -> BenchmarkReport:
    """Run every question and aggregate the Public Score.

    With ``audit_dir`` each finished question is written to
    ``{audit_dir}/{question_id}.json``; a later run with the same config
    fingerprint reuses those records instead of recomputing them.
    """
    if not dataset:
        raise InvalidInputError("dataset is empty")
    fingerprint = config.fingerprint()
    audit_dir = Path(audit_dir) if audit_dir else None
    if audit_dir:
        audit_dir.mkdir(parents=True, exist_ok=True)
    pipeline = Pipeline(config, index, image_root=image_root, crop_dir=(audit_dir / "crops") if audit_dir else None)
    missing_docs = set(item.doc_id for item in dataset) - set(index.doc_ids())
    if missing_docs:
        logger.warning("index has no pages for %d referenced document(s): %s", len(missing_docs), sorted(missing_docs))

    def one(item: QuestionItem) -> tuple[dict, str]:
        if audit_dir:
            path = _audit_path(audit_dir, item.question_id)
            if path.exists():
                cached = json.loads(path.read_text(encoding="utf-8"))
                if cached.get("config_fingerprint") == fingerprint:
                    tpath = _audit_path(audit_dir, item.question_id, ".transcript.jsonl")
                    return cached["record"], tpath.read_text(encoding="utf-8") if tpath.exists() else ""
        transcript = Transcript()
        try:
            record = pipeline.run(item, transcript)
        except FixtureMissingError:
            raise
        except LateQAError as exc:
            logger.error("question %s errored: %s", item.question_id, exc)
            record = error_record(item, exc)
        text = transcript.dumps()
        if audit_dir:
            _atomic_write(_audit_path(audit_dir, item.question_id, ".transcript.jsonl"), text)
            audit = {"config_fingerprint": fingerprint, "record": record}
            _atomic_write(_audit_path(audit_dir, item.question_id),
                          json.dumps(audit, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
        return record, text

    if config.parallelism > 1:
        with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
            results = list(pool.map(one, dataset))
    else:
        results = [one(item) for item in dataset]

    if transcript_path:
        ordered = sorted(zip(dataset, results), key=lambda pair: pair[0].question_id)
        _atomic_write(Path(transcript_path), "".join(text for _, (_, text) in ordered))
    return build_report([r for r, _ in results], fingerprint)


def answer_question(config: PipelineConfig, item: QuestionItem, index: PageIndex, image_root=None,
                    transcript: Transcript | None = None) -> dict:
    """Full audit record for a single question."""
    return Pipeline(config, index, image_root=image_root).run(item, transcript)

"""Command-line entry point.

Machine-readable output goes to stdout (JSON or JSON lines); logs and errors go
to stderr. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError, LateQAError
from .evaluation import PipelineConfig, QuestionItem, answer_question, load_config, load_dataset, run_benchmark
from .gateway import BackendConfig, Gateway
from .ingest import DEFAULT_DPI, discover_doc_ids, embed_pages, load_page_set, rasterize_document
from .retrieval import build_index, load_index, retrieve_topk, save_index
from .retrieval.index import PageRecord

logger = logging.getLogger("lateqa")

CONFIG_ENV = "LATEQA_CONFIG"
DEFAULT_EMBED_BACKEND = BackendConfig(kind="mock", scenario_id="hash")
_DEFAULT_SCENARIO = {"scenario_id": "hash", "embeddings": {"dim": 128, "tokens": 16, "hash_fallback": True}}


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, ensure_ascii=False, sort_keys=True) + "\n")


def _config_path(arg: str | None) -> str | None:
    return arg or os.environ.get(CONFIG_ENV) or None


def _embed_gateway(config_path: str | None) -> Gateway:
    """Embedding gateway from a pipeline config, or a hash-seeded mock when none is given."""
    if config_path is None:
        from .gateway import MockBackend

        return Gateway(DEFAULT_EMBED_BACKEND, backend=MockBackend(_DEFAULT_SCENARIO))
    raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
    if "backends" in raw:
        cfg = load_config(config_path)
        return Gateway(cfg.backend_for("embed"))
    return Gateway(BackendConfig.from_dict(raw, Path(config_path).parent))


def cmd_ingest(args) -> int:
    page_set = rasterize_document(args.pdf, args.out, dpi=args.dpi, doc_id=args.doc_id, command=args.rasterizer)
    _emit({"doc_id": page_set.doc_id, "dpi": args.dpi, "pages": [p.to_dict() for p in page_set.pages]})
    return 0


def cmd_index(args) -> int:
    gateway = _embed_gateway(_config_path(args.backend))
    doc_ids = [args.doc_id] if args.doc_id else discover_doc_ids(args.pages)
    if not doc_ids:
        raise LateQAError(f"no page images named <doc_id>_NNNN.png found in {args.pages}")
    records = []
    for doc_id in doc_ids:
        pages = load_page_set(args.pages, doc_id)
        for page, emb in embed_pages(gateway, pages, parallelism=args.parallelism):
            records.append(PageRecord(doc_id, page.page_no, str(page.path.resolve()), emb))
        logger.info("embedded %d pages of %s", len(pages), doc_id)
    index = build_index(records)
    save_index(index, args.out)
    _emit({"index": str(args.out), "dim": index.dim, "pages": len(index), "docs": index.doc_ids()})
    return 0


def cmd_retrieve(args) -> int:
    index = load_index(args.index)
    gateway = _embed_gateway(_config_path(args.backend))
    query = gateway.embed_multivector(args.query)
    for hit in retrieve_topk(index, query, args.k, doc_id=args.doc_id):
        _emit(hit.to_dict())
    return 0


def _pipeline_config(args) -> PipelineConfig:
    path = _config_path(args.config)
    if path is None:
        raise ConfigError(f"a pipeline config is required (--config or ${CONFIG_ENV})")
    cfg = load_config(path)
    overrides = {}
    if args.seed is not None:
        overrides["global_seed"] = args.seed
    if getattr(args, "arm", None):
        cfg = cfg.with_arm(args.arm)
    if overrides:
        d = cfg.to_dict()
        d.update(overrides)
        cfg = PipelineConfig.from_dict(d)
    return cfg


def cmd_ask(args) -> int:
    qpath = Path(args.question_file)
    if not qpath.exists():
        raise LateQAError(f"question file not found: {qpath}")
    try:
        item = QuestionItem.from_dict(json.loads(qpath.read_text(encoding="utf-8")))
    except ValueError as exc:
        raise LateQAError(f"invalid question file {qpath}: {exc}") from None
    cfg = _pipeline_config(args)
    index = load_index(args.index)
    _emit(answer_question(cfg, item, index))
    return 0


def cmd_eval(args) -> int:
    cfg = _pipeline_config(args)
    index = load_index(args.index)
    dataset = load_dataset(args.dataset)
    report = run_benchmark(cfg, dataset, index, audit_dir=args.audit_dir, transcript_path=args.transcript)
    json_path, csv_path = report.write(args.report)
    _emit({
        "public_score": report.public_score,
        "n_questions": report.n_questions,
        "n_correct": report.n_correct,
        "n_errored": report.n_errored,
        "config_fingerprint": report.config_fingerprint,
        "report": str(json_path),
        "csv": str(csv_path),
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global seed for option shuffling")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="lateqa", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"lateqa {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", parents=[common], help="rasterize a PDF into page PNGs")
    s.add_argument("--pdf", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dpi", type=int, default=DEFAULT_DPI)
    s.add_argument("--doc-id")
    s.add_argument("--rasterizer", help="command template with {input} {dpi} {output}")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("index", parents=[common], help="embed page images and write an index")
    s.add_argument("--pages", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--backend", help="pipeline config or backend config JSON (default: hash mock)")
    s.add_argument("--doc-id", help="index only this document")
    s.add_argument("--parallelism", type=int, default=1)
    s.set_defaults(func=cmd_index)

    s = sub.add_parser("retrieve", parents=[common], help="rank pages for a query")
    s.add_argument("--index", required=True)
    s.add_argument("--query", required=True)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--doc-id")
    s.add_argument("--backend", help="pipeline config or backend config JSON (default: hash mock)")
    s.set_defaults(func=cmd_retrieve)

    s = sub.add_parser("ask", parents=[common], help="answer one question")
    s.add_argument("--index", required=True)
    s.add_argument("--question-file", required=True)
    s.add_argument("--config")
    s.add_argument("--arm", help="ablation arm overriding the feature flags")
    s.set_defaults(func=cmd_ask)

    s = sub.add_parser("eval", parents=[common], help="run a benchmark and write a report")
    s.add_argument("--index", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--config")
    s.add_argument("--report", required=True)
    s.add_argument("--audit-dir", help="per-question audit records; enables resume")
    s.add_argument("--transcript", help="write the model transcript (JSONL) here")
    s.add_argument("--arm", help="ablation arm overriding the feature flags")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "retrieve" and args.k < 1:
        parser.error("--k must be >= 1")
    try:
        return args.func(args)
    except (LateQAError, OSError, ValueError) as exc:
        print(f"lateqa {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

from __future__ import annotations

import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest

TESTS = Path(__file__).resolve().parent
sys.path.insert(0, str(TESTS))

PLANTED = TESTS / "fixtures" / "planted"


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


@pytest.fixture
def planted_dir(tmp_path):
    """A private copy of the planted fixture so tests may write next to it."""
    dst = tmp_path / "planted"
    shutil.copytree(PLANTED, dst)
    return dst


@pytest.fixture(scope="session")
def planted_index():
    from lateqa.evaluation import load_config
    from lateqa.gateway import Gateway
    from lateqa.ingest import discover_doc_ids, embed_pages, load_page_set
    from lateqa.retrieval import build_index
    from lateqa.retrieval.index import PageRecord

    cfg = load_config(PLANTED / "config_planted.json")
    gw = Gateway(cfg.backend_for("embed"))
    records = []
    for doc in discover_doc_ids(PLANTED / "pages"):
        for page, emb in embed_pages(gw, load_page_set(PLANTED / "pages", doc)):
            records.append(PageRecord(doc, page.page_no, str(page.path), emb))
    return build_index(records)


SUITE_LIMIT_S = 120.0


def pytest_sessionstart(session):
    session.config._lateqa_t0 = time.perf_counter()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # the runtime criterion only means something when the whole suite ran
    ran = {Path(str(r.fspath)).name for key in ("passed", "failed") for r in terminalreporter.stats.get(key, [])}
    if "test_acceptance.py" not in ran or len(ran) < 5:
        return
    elapsed = time.perf_counter() - config._lateqa_t0
    status = "PASS" if elapsed < SUITE_LIMIT_S else "FAIL"
    terminalreporter.write_line(f"ACCEPTANCE {status} whole suite runtime: {elapsed:.1f}s (limit {SUITE_LIMIT_S:.0f}s)")

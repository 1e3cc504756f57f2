from __future__ import annotations

import pytest

from qintent.models import ModelConfig
from qintent.synth import synth_click_log, typeahead_preset
from qintent.text import (
    DEFAULT_INTENTS,
    FeatureSpec,
    IntentLabelSet,
    LocaleRegistry,
    build_vocab,
    ingest_click_log,
    prefix_expand,
    split_dataset,
)
from qintent.training import TrainHyper, train_classifier


@pytest.fixture(scope="session")
def labels():
    return IntentLabelSet(DEFAULT_INTENTS)


@pytest.fixture(scope="session")
def small_data(labels):
    """A few thousand prefix examples from the typeahead generator."""
    recs = synth_click_log(typeahead_preset(0.0), 1500, seed=11)
    vocab = build_vocab((r.query for r in recs), "char", 60)
    locales = LocaleRegistry(("en",))
    feats = FeatureSpec(len(labels), 16, 8)
    ds, _ = ingest_click_log(recs, labels, vocab, locales, feats, max_len=24)
    tr, dv, te = split_dataset(ds, seed=11)
    tr, dv, te = (prefix_expand(x, vocab, 24) for x in (tr, dv, te))
    return {"vocab": vocab, "locales": locales, "features": feats, "train": tr, "dev": dv, "test": te}


@pytest.fixture(scope="session")
def fixture_model(small_data, labels):
    """Small char CNN trained on ``small_data``; the shared trained fixture."""
    d = small_data
    cfg = ModelConfig.char("CNN", vocab_size=len(d["vocab"]), emb_dim=16, filters=32, fusion_width=32, max_len=24)
    hp = TrainHyper(lr=3e-3, batch_size=128, epochs=3, seed=0, patience=None)
    bundle, history = train_classifier(cfg, d["train"], d["dev"], hp, d["vocab"], labels, d["locales"], d["features"])
    return bundle, history


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, printed at the end of the run."""

    def record(criterion: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[criterion] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

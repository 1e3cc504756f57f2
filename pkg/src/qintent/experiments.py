"""Seeded synthetic benchmarks behind the acceptance suite and the ``bench`` scripts.

Each function builds its own data from the generator, trains the compared
models with identical hyperparameters and returns test accuracies. Model
widths are scaled down from the library defaults so that a full run fits a
single CPU core; the scaled settings are recorded in :data:`SCALED`.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .evaluation import LatencyReport, measure_latency
from .models import DatasetArrays, ModelBundle, ModelConfig, new_bundle
from .synth import complete_preset, mlm_corpus, multilingual_preset, synth_click_log, typeahead_preset
from .text import (
    DEFAULT_INTENTS,
    FeatureSpec,
    IntentLabelSet,
    LabeledExample,
    LocaleRegistry,
    Query,
    Vocabulary,
    build_vocab,
    ingest_click_log,
    prefix_expand,
    split_dataset,
)
from .training import TrainHyper, predict_arrays, pretrain_mlm, train_classifier

SCALED = {
    "char": dict(emb_dim=32, filters=64, hidden=64, fusion_width=64, max_len=32),
    "word": dict(emb_dim=32, filters=64, hidden=64, fusion_width=64, max_len=12),
    "transformer": dict(hidden=64, layers=2, heads=4, ffn_mult=4, max_positions=16, max_len=12, fusion_width=64),
}
LABELS = IntentLabelSet(DEFAULT_INTENTS)


@dataclass
class RunResult:
    accuracy: dict[str, float] = field(default_factory=dict)
    seconds: float = 0.0
    sizes: tuple[int, int, int] = (0, 0, 0)


def _accuracy(bundle: ModelBundle, test: list[LabeledExample]) -> float:
    data = DatasetArrays.build(bundle.config, test)
    return float((predict_arrays(bundle.config, bundle.tensors(), data) == data.labels).mean())


def _strip_features(ds: list[LabeledExample]) -> list[LabeledExample]:
    return [LabeledExample(e.text, e.token_ids, e.locale, (), e.label) for e in ds]


def _splits(records, vocab, locales, fspec, seed, max_len, expand):
    ds, _ = ingest_click_log(records, LABELS, vocab, locales, fspec, max_len=max_len)
    parts = split_dataset(ds, (0.8, 0.1, 0.1), seed=seed)
    if expand:
        parts = tuple(prefix_expand(p, vocab, max_len) for p in parts)
    return parts


def typeahead_run(seed: int, n_records: int = 13_200, epochs: int = 4,
                  archs: tuple[str, ...] = ("TRILETTER_LR", "CNN", "BILSTM")) -> RunResult:
    """Char models on prefix-expanded typeahead logs (about 200k examples at the default size)."""
    t0 = time.perf_counter()
    recs = synth_click_log(typeahead_preset(0.05), n_records, seed=seed)
    vocab = build_vocab((r.query for r in recs), "char", 500)
    locales = LocaleRegistry(("en",))
    fspec = FeatureSpec(len(LABELS), 16, 8)
    tr, dv, te = _splits(recs, vocab, locales, fspec, seed, SCALED["char"]["max_len"], expand=True)
    out = RunResult(sizes=(len(tr), len(dv), len(te)))
    for arch in archs:
        cfg = ModelConfig.char(arch, vocab_size=len(vocab), **SCALED["char"])
        linear = arch.endswith("_LR")
        hp = TrainHyper(lr=0.02 if linear else 3e-3, batch_size=512 if linear else 256, epochs=epochs, seed=seed,
                        patience=None)
        bundle, _ = train_classifier(cfg, tr, dv, hp, vocab, LABELS, locales, fspec)
        out.accuracy[arch] = _accuracy(bundle, te)
    out.seconds = time.perf_counter() - t0
    return out


def multilingual_run(seed: int, n_records: int = 8_000, epochs: int = 3, fusion_width: int = 24) -> RunResult:
    """Char BiLSTM without locale input versus locale ``embed`` and ``concat`` injection.

    The traditional features keep only the behavioural propensities here, so
    the injected locale vector is the only locale signal any model sees. The
    fusion layer is kept narrow: with a wide head, ``concat`` can memorise the
    word x locale x role table there and the two injection points tie.
    """
    t0 = time.perf_counter()
    recs = synth_click_log(multilingual_preset(0.05), n_records, seed=seed)
    vocab = build_vocab((r.query for r in recs), "char", 500)
    locales = LocaleRegistry(("en", "fr", "de"))
    fspec = FeatureSpec(len(LABELS), 16, 0)
    tr, dv, te = _splits(recs, vocab, locales, fspec, seed, SCALED["char"]["max_len"], expand=True)
    out = RunResult(sizes=(len(tr), len(dv), len(te)))
    hp = TrainHyper(lr=3e-3, batch_size=256, epochs=epochs, seed=seed, patience=None)
    for name, mode in (("agnostic", "none"), ("embed", "embed"), ("concat", "concat")):
        extra = dict(multilingual=mode, n_locales=len(locales), locale_dim=16) if mode != "none" else {}
        shape = {**SCALED["char"], "fusion_width": fusion_width}
        cfg = ModelConfig.char("BILSTM", vocab_size=len(vocab), **shape, **extra)
        bundle, _ = train_classifier(cfg, tr, dv, hp, vocab, LABELS, locales, fspec)
        out.accuracy[name] = _accuracy(bundle, te)
    out.seconds = time.perf_counter() - t0
    return out


def complete_run(seed: int, n_records: int = 12_000, epochs: int = 4) -> RunResult:
    """Word models on complete queries, each with and without traditional features."""
    t0 = time.perf_counter()
    recs = synth_click_log(complete_preset(0.05), n_records, seed=seed)
    vocab = build_vocab((r.query for r in recs), "word", 5_000)
    locales = LocaleRegistry(("en",))
    fspec = FeatureSpec(len(LABELS), 16, 8)
    tr, dv, te = _splits(recs, vocab, locales, fspec, seed, SCALED["word"]["max_len"], expand=False)
    out = RunResult(sizes=(len(tr), len(dv), len(te)))
    for arch in ("BOW_LR", "CNN", "BILSTM"):
        for with_feats in (True, False):
            if arch == "BOW_LR" and not with_feats:
                continue
            width = fspec.width if with_feats else 0
            cfg = ModelConfig.word(arch, vocab_size=len(vocab), feature_width=width, **SCALED["word"])
            linear = arch.endswith("_LR")
            hp = TrainHyper(lr=0.02 if linear else 3e-3, batch_size=128, epochs=epochs * (3 if linear else 1),
                            seed=seed, patience=None)
            data = (tr, dv, te) if with_feats else tuple(_strip_features(x) for x in (tr, dv, te))
            bundle, _ = train_classifier(cfg, data[0], data[1], hp, vocab, LABELS, locales,
                                         fspec if with_feats else None)
            out.accuracy[arch if with_feats else f"{arch}-no-features"] = _accuracy(bundle, data[2])
    out.seconds = time.perf_counter() - t0
    return out


def pretraining_run(seed: int, n_labeled: int = 500, n_corpus: int = 20_000, n_eval: int = 2_000,
                    mlm_epochs: int = 20, mlm_lr: float = 2e-3, epochs: int = 30, lr: float = 3e-4,
                    with_features: bool = False) -> RunResult:
    """Mini-transformer fine-tuned on ``n_labeled`` examples from MLM or random initialization.

    By default the classifier sees the query text only. Pre-training changes
    the text encoder and nothing else; with 500 labels the behavioural
    features otherwise dominate fine-tuning and swamp the encoder's effect.
    """
    t0 = time.perf_counter()
    cfg_syn = complete_preset(0.05)
    corpus = mlm_corpus(n_corpus, seed=1000 + seed, config=cfg_syn)
    recs = synth_click_log(cfg_syn, n_labeled * 2 + n_eval, seed=seed)
    vocab = build_vocab(corpus + [r.query for r in recs], "word", 5_000)
    locales = LocaleRegistry(("en",))
    fspec = FeatureSpec(len(LABELS), 16, 8)
    ds, _ = ingest_click_log(recs, LABELS, vocab, locales, fspec, max_len=SCALED["transformer"]["max_len"])
    order = np.random.default_rng([seed, 7]).permutation(len(ds))
    ds = [ds[i] for i in order]
    if not with_features:
        ds, fspec = _strip_features(ds), None
    train, dev, test = ds[:n_labeled], ds[n_labeled : 2 * n_labeled], ds[2 * n_labeled :]
    cfg = ModelConfig.transformer(vocab_size=len(vocab), feature_width=fspec.width if fspec else 0,
                                  **SCALED["transformer"])
    pre, _ = pretrain_mlm(cfg, corpus, vocab, TrainHyper(lr=mlm_lr, batch_size=128, epochs=mlm_epochs, seed=seed))
    hp = TrainHyper(lr=lr, batch_size=32, epochs=epochs, seed=seed, patience=None)
    out = RunResult(sizes=(len(train), len(dev), len(test)))
    for name, init in (("random", None), ("pretrained", pre)):
        bundle, _ = train_classifier(cfg, train, dev, hp, vocab, LABELS, locales, fspec, init=init)
        out.accuracy[name] = _accuracy(bundle, test)
    out.seconds = time.perf_counter() - t0
    return out


def default_complete_bundles(vocab_size: int = 25_000) -> dict[str, ModelBundle]:
    """Untrained word CNN, word BiLSTM and transformer at their default shapes."""
    tokens = ("<pad>", "<unk>", "<cls>", "<mask>") + tuple(f"w{i}" for i in range(vocab_size - 4))
    vocab = Vocabulary("word", tokens)
    fspec = FeatureSpec(len(LABELS), 16, 8)
    cfgs = {
        "CNN": ModelConfig.word("CNN", vocab_size=vocab_size),
        "BILSTM": ModelConfig.word("BILSTM", vocab_size=vocab_size),
        "TRANSFORMER": ModelConfig.transformer(vocab_size=vocab_size),
    }
    return {name: new_bundle(cfg, vocab, LABELS, None, fspec, seed=0) for name, cfg in cfgs.items()}


def latency_run(n_measured: int = 10_000, n_warmup: int = 200, seed: int = 0) -> LatencyReport:
    """Batch-1 p99 on the default complete-query configs over synthetic queries."""
    bundles = default_complete_bundles()
    recs = synth_click_log(complete_preset(0.0), 500, seed=seed)
    vocab = bundles["CNN"].vocab
    words = sorted({w for r in recs for w in r.query.split()})
    # map synthetic words onto in-vocabulary ids so every query exercises real lookups
    lookup = {w: vocab.tokens[4 + i] for i, w in enumerate(words)}
    queries = [Query(" ".join(lookup[w] for w in r.query.split())) for r in recs]
    report = LatencyReport()
    for name, b in bundles.items():
        report.models.update(measure_latency(b, queries, n_warmup, n_measured, name).models)
    return report

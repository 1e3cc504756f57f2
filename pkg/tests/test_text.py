from __future__ import annotations

import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qintent.synth import ClickLogSynthesizer, SynthConfig, multilingual_preset, synth_click_log, typeahead_preset
from qintent.text import (
    CLS,
    DEFAULT_INTENTS,
    MASK,
    PAD,
    UNK,
    ClickRecord,
    FeatureSpec,
    IntentLabelSet,
    LabeledExample,
    LocaleRegistry,
    Query,
    UnknownLocaleError,
    UnmappedTypeError,
    Vocabulary,
    build_user_features,
    build_vocab,
    derive_label,
    encode_query,
    encode_text,
    generate_prefixes,
    ingest_click_log,
    prefix_expand,
    read_dataset,
    split_dataset,
    tokenize,
    write_click_log,
    write_dataset,
)

LABELS = IntentLabelSet(DEFAULT_INTENTS)
LOCALES = LocaleRegistry(("en", "fr", "de"))
FEATS = FeatureSpec(5, 16, 8)


def _example(text: str, label: int = 0) -> LabeledExample:
    return LabeledExample(text, (), 0, (0.0,) * 16, label)


class TestTokenize:
    def test_char_lowercases(self):
        assert tokenize("AbC", "char") == ["a", "b", "c"]

    def test_word_strips_punctuation(self):
        assert tokenize("Hello, World!", "word") == ["hello", "world"]

    def test_triletter_uses_boundary_marks(self):
        assert tokenize("ab", "triletter") == ["#ab", "ab#"]
        assert tokenize("", "triletter") == []

    def test_unknown_granularity(self):
        with pytest.raises(ValueError):
            tokenize("x", "byte")


class TestVocabulary:
    def test_frequency_order_after_reserved(self):
        v = build_vocab(["aab"], "char", 10)
        assert v.tokens[:4] == ("<pad>", "<unk>", "<cls>", "<mask>")
        assert v.id("a") == 4 and v.id("b") == 5
        assert len(v) == 6

    def test_max_size_caps(self):
        v = build_vocab(["abcdefg"], "char", 6)
        assert len(v) == 6

    def test_oov_maps_to_unk(self):
        v = build_vocab(["ab"], "char", 10)
        assert v.id("z") == UNK
        assert v.id("<pad>") == UNK

    def test_reserved_ids(self):
        assert (PAD, UNK, CLS, MASK) == (0, 1, 2, 3)

    def test_rejects_bad_prefix(self):
        with pytest.raises(ValueError):
            Vocabulary("char", ("a", "b"))

    def test_save_load_roundtrip(self, tmp_path):
        v = build_vocab(["hello world", "héllo"], "word", 50)
        v.save(tmp_path / "v.json")
        w = Vocabulary.load(tmp_path / "v.json")
        assert w == v and w.digest == v.digest

    def test_digest_changes_with_tokens(self):
        assert build_vocab(["ab"], "char", 10).digest != build_vocab(["ba"], "char", 10).digest

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            build_vocab(["a"], "char", 0)


class TestEncoding:
    def test_pad_and_truncate(self):
        v = build_vocab(["abc"], "char", 10)
        assert encode_text("ab", v, 4) == [v.id("a"), v.id("b"), PAD, PAD]
        assert len(encode_text("abcabcabc", v, 4)) == 4

    def test_encode_query_matches_text(self):
        v = build_vocab(["data science"], "word", 10)
        assert encode_query(Query("data science"), v, 3) == [v.id("data"), v.id("science"), PAD]

    def test_triletter_vocab_cannot_sequence_encode(self):
        v = build_vocab(["abc"], "triletter", 10)
        with pytest.raises(ValueError):
            encode_text("abc", v, 4)

    def test_prefixes_of_unicode_text(self):
        got = generate_prefixes(Query("hél"))
        assert [q.text for q in got] == ["h", "hé", "hél"]
        assert not any(q.complete for q in got)

    @given(st.text(min_size=0, max_size=40))
    def test_prefix_count_equals_length(self, s):
        got = generate_prefixes(Query(s))
        assert len(got) == len(s)
        assert all(s.startswith(q.text) for q in got)


class TestFeatures:
    def test_laplace_propensities(self):
        vec = build_user_features([1, 1, 0], 0, FEATS)
        assert vec[1] == pytest.approx(3 / 8)
        assert vec[0] == pytest.approx(2 / 8)
        assert vec[2] == vec[3] == vec[4] == pytest.approx(1 / 8)

    def test_empty_history_uniform(self):
        vec = build_user_features([], 1, FEATS)
        np.testing.assert_allclose(vec[:5], 0.2)
        assert vec[5 + 1] == 1.0

    def test_overflow_locale_slot(self):
        vec = build_user_features([], 42, FEATS)
        assert vec[5 + 8] == 1.0 and vec[5:13].sum() == 0.0

    def test_no_locale_block(self):
        vec = build_user_features([0], 2, FeatureSpec(5, 16, 0))
        assert vec[5:].sum() == 0.0

    def test_width_too_small(self):
        with pytest.raises(ValueError):
            FeatureSpec(5, 8, 8)

    @given(st.lists(st.integers(0, 4), max_size=50), st.integers(0, 20))
    def test_propensities_form_distribution(self, hist, loc):
        vec = build_user_features(hist, loc, FEATS)
        assert vec[:5].sum() == pytest.approx(1.0)
        assert (vec[:5] > 0).all()
        assert vec[5:14].sum() == 1.0


class TestLabels:
    def test_derive_label(self):
        r = ClickRecord("acme jobs", "en", "u1", "job_posting")
        assert derive_label(r, LABELS) == LABELS.id("JOB")

    def test_unmapped_type(self):
        with pytest.raises(UnmappedTypeError):
            derive_label(ClickRecord("x", "en", "u1", "video"), LABELS)

    def test_unknown_locale(self):
        with pytest.raises(UnknownLocaleError):
            LOCALES.id("xx")
        with pytest.raises(UnknownLocaleError):
            LOCALES.code(9)


class TestIngest:
    def test_counts_and_skips(self, tmp_path):
        records = [
            ClickRecord("maria gonzalez", "en", "u1", "profile"),
            ClickRecord("nurse jobs", "fr", "u1", "job_posting"),
            ClickRecord("   ", "en", "u2", "profile"),
            ClickRecord("acme", "en", "u2", "podcast"),
            ClickRecord("acme", "xx", "u2", "company_page"),
        ]
        path = tmp_path / "log.jsonl"
        write_click_log(path, records)
        with open(path, "a", encoding="utf-8") as fh:
            fh.write("{not json\n")
            fh.write(json.dumps({"query": "no type"}) + "\n")
        ds, rep = ingest_click_log(path, LABELS, None, LOCALES, FEATS)
        assert rep.total == 7 and rep.accepted == 2
        assert rep.skipped == Counter(malformed=2, empty_query=1, unmapped_type=1, unknown_locale=1)
        assert rep.accepted + rep.skipped_total == rep.total

    def test_features_use_only_earlier_history(self):
        records = [
            ClickRecord("a", "en", "u1", "job_posting"),
            ClickRecord("b", "en", "u1", "job_posting"),
            ClickRecord("c", "en", "u1", "profile"),
        ]
        ds, _ = ingest_click_log(records, LABELS, None, LOCALES, FEATS)
        assert ds[0].features[:5] == pytest.approx((0.2,) * 5)
        assert ds[2].features[1] == pytest.approx(3 / 7)

    def test_whitespace_normalised(self):
        ds, _ = ingest_click_log([ClickRecord("  data   science ", "en", "u", "article")], LABELS, None, LOCALES, FEATS)
        assert ds[0].text == "data science"


class TestSplitAndExpand:
    def test_split_sizes(self):
        ds = [_example(f"q{i}") for i in range(1000)]
        tr, dv, te = split_dataset(ds, (0.8, 0.1, 0.1), seed=3)
        assert (len(tr), len(dv), len(te)) == (800, 100, 100)
        assert {e.text for e in tr} | {e.text for e in dv} | {e.text for e in te} == {e.text for e in ds}

    def test_split_deterministic(self):
        ds = [_example(f"q{i}") for i in range(50)]
        assert split_dataset(ds, seed=1) == split_dataset(ds, seed=1)
        assert split_dataset(ds, seed=1) != split_dataset(ds, seed=2)

    @pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.8, 0.3, -0.1), (0.5, 0.3, 0.1)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(ValueError):
            split_dataset([_example("a")] * 10, ratios)

    def test_prefix_expand_length_sum(self):
        rng = np.random.default_rng(0)
        texts = ["".join(rng.choice(list("abcde "), size=int(n))) for n in rng.integers(1, 12, size=10)]
        texts = [t if t.strip() else "x" for t in texts]
        out = prefix_expand([_example(t, i % 5) for i, t in enumerate(texts)])
        assert len(out) == sum(len(t) for t in texts)

    def test_prefix_expand_inherits_label(self):
        v = build_vocab(["abc"], "char", 10)
        out = prefix_expand([_example("abc", 3)], v, 4)
        assert [e.text for e in out] == ["a", "ab", "abc"]
        assert all(e.label == 3 for e in out)
        assert out[1].token_ids == (v.id("a"), v.id("b"), PAD, PAD)

    def test_dataset_file_roundtrip(self, tmp_path):
        v = build_vocab(["abc"], "char", 10)
        ds = prefix_expand([_example("abc", 2)], v, 4)
        write_dataset(tmp_path / "d.jsonl", ds, LABELS, v, FEATS, LOCALES)
        header, back = read_dataset(tmp_path / "d.jsonl")
        assert back == ds
        assert header["vocab_hash"] == v.digest and header["labels"] == list(DEFAULT_INTENTS)


class TestSynth:
    def test_deterministic(self):
        cfg = typeahead_preset(0.05)
        assert synth_click_log(cfg, 300, seed=4) == synth_click_log(cfg, 300, seed=4)
        assert synth_click_log(cfg, 300, seed=4) != synth_click_log(cfg, 300, seed=5)

    def test_noise_free_labels_match_template_intent(self):
        syn = ClickLogSynthesizer(typeahead_preset(0.0), seed=7)
        records = list(syn.generate(1000))
        assert len(records) == 1000
        counts = Counter(r.clicked_type for r in records)
        assert counts == syn.clicked_counts
        assert sum(syn.intent_counts.values()) == 1000
        for intent, n in syn.intent_counts.items():
            assert counts[syn.config.intent_types[intent]] == n

    def test_noise_rate_observed(self):
        # queries led by a first name only come from PEOPLE templates
        cfg = typeahead_preset(0.2)
        recs = synth_click_log(cfg, 20_000, seed=1)
        named = [r for r in recs if r.query.split()[0] in cfg.lexicon["first"]]
        flipped = sum(r.clicked_type != "profile" for r in named) / len(named)
        assert abs(flipped - 0.2) < 0.03

    def test_mixture_within_tolerance(self):
        cfg = SynthConfig(mixture={"JOB": 0.5, "PEOPLE": 0.5})
        syn = ClickLogSynthesizer(cfg, seed=0)
        n = 100_000
        for _ in syn.generate(n):
            pass
        assert abs(syn.intent_counts["JOB"] / n - 0.5) <= 0.01

    def test_person_names_are_people(self):
        cfg = typeahead_preset(0.0)
        recs = synth_click_log(cfg, 2000, seed=0)
        named = [r for r in recs if r.query.split()[0] in cfg.lexicon["first"]]
        assert named and all(r.clicked_type == "profile" for r in named)

    def test_empty_mixture_rejected(self):
        with pytest.raises(ValueError):
            ClickLogSynthesizer(SynthConfig(mixture={}))

    def test_multilingual_locales(self):
        recs = synth_click_log(multilingual_preset(), 3000, seed=0)
        share = Counter(r.locale for r in recs)
        assert set(share) == {"en", "fr", "de"}
        assert abs(share["en"] / 3000 - 0.4) < 0.05

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_records_ingest_cleanly(self, seed):
        recs = synth_click_log(typeahead_preset(0.05), 50, seed=seed)
        _, rep = ingest_click_log(recs, LABELS, None, LocaleRegistry(("en",)), FEATS)
        assert rep.accepted == 50

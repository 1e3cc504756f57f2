from __future__ import annotations

import pytest

from qintent.experiments import (
    complete_run,
    default_complete_bundles,
    multilingual_run,
    pretraining_run,
    typeahead_run,
)
from qintent.models import param_count


def _valid(result, keys):
    assert set(result.accuracy) == set(keys)
    assert all(0.0 <= v <= 1.0 for v in result.accuracy.values())
    assert min(result.sizes) > 0 and result.seconds > 0


class TestTinyRuns:
    def test_typeahead_is_deterministic(self):
        a = typeahead_run(3, n_records=150, epochs=1, archs=("TRILETTER_LR", "CNN"))
        b = typeahead_run(3, n_records=150, epochs=1, archs=("TRILETTER_LR", "CNN"))
        _valid(a, ["TRILETTER_LR", "CNN"])
        assert a.accuracy == b.accuracy and a.sizes == b.sizes

    def test_typeahead_sizes_are_prefix_counts(self):
        r = typeahead_run(0, n_records=100, epochs=1, archs=("TRILETTER_LR",))
        # every record contributes one example per character of its query
        assert sum(r.sizes) > 100 * 5

    def test_multilingual_keys(self):
        _valid(multilingual_run(0, n_records=120, epochs=1), ["agnostic", "embed", "concat"])

    def test_complete_keys(self):
        keys = ["BOW_LR", "CNN", "CNN-no-features", "BILSTM", "BILSTM-no-features"]
        _valid(complete_run(0, n_records=300, epochs=1), keys)

    @pytest.mark.parametrize("with_features", [False, True])
    def test_pretraining_keys(self, with_features):
        r = pretraining_run(0, n_labeled=40, n_corpus=300, n_eval=60, mlm_epochs=1, epochs=1,
                            with_features=with_features)
        _valid(r, ["random", "pretrained"])
        assert r.sizes == (40, 40, 60)


def test_default_bundles_have_default_shapes():
    bundles = default_complete_bundles()
    assert set(bundles) == {"CNN", "BILSTM", "TRANSFORMER"}
    assert 9_000_000 <= param_count(bundles["TRANSFORMER"]).total <= 11_000_000
    for b in bundles.values():
        assert b.config.granularity == "word" and len(b.vocab) == 25_000

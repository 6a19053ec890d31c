import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from syngrid.estimator import SyntaxGuidedTransformer
from syngrid.validation import check_episodes, check_positive, check_targets

TINY = dict(d_model=16, d_hidden=32, n_heads=2, n_encoder_layers=2, n_decoder_layers=2, dropout=0.0, epochs=2,
            batch_size=16, lr=1e-3)


def test_get_params_and_clone():
    est = SyntaxGuidedTransformer(**TINY)
    params = est.get_params()
    assert params["d_model"] == 16 and params["use_text_mask"] is True
    copy = clone(est)
    assert copy.get_params() == params
    est.set_params(use_text_mask=False)
    assert est.model_config().use_text_mask is False


def test_defaults_follow_reference_configuration():
    cfg = SyntaxGuidedTransformer().model_config()
    assert (cfg.d_model, cfg.d_hidden, cfg.n_heads, cfg.n_encoder_layers, cfg.dropout) == (128, 256, 8, 6, 0.1)


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SyntaxGuidedTransformer(**TINY).predict([])


def test_fit_predict_score(small_corpus):
    est = SyntaxGuidedTransformer(**TINY).fit(small_corpus.train[:32], X_val=small_corpus.train[32:36])
    assert len(est.history_) == 4
    preds = est.predict(small_corpus.tests["c1"])
    assert len(preds) == len(small_corpus.tests["c1"])
    assert 0.0 <= est.score(small_corpus.tests["c1"]) <= 1.0
    t, v = est.transform(small_corpus.train[:2])
    assert t.shape[0] == 2 and v.shape == (2, 36, 16)


def test_fit_accepts_records(small_corpus):
    records = [ep.to_record() for ep in small_corpus.train[:8]]
    est = SyntaxGuidedTransformer(**{**TINY, "epochs": 1}).fit(records)
    assert est.best_step_ == 1


def test_n_parameters_shrinks_with_sharing():
    shared = SyntaxGuidedTransformer(**TINY).n_parameters()
    unshared = SyntaxGuidedTransformer(**TINY, share_encoder_weights=False).n_parameters()
    assert shared < unshared


def test_validation_helpers(small_corpus):
    with pytest.raises(TypeError):
        check_episodes([1, 2])
    with pytest.raises(ValueError):
        check_targets([["walk"]], 2)
    with pytest.raises(ValueError):
        check_targets([["fly"]], 1)
    with pytest.raises(ValueError):
        check_positive("epochs", 0)
    assert check_episodes(np.array(small_corpus.train[:2], dtype=object)) == small_corpus.train[:2]

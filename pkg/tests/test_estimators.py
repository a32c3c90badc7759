import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vitprune.data import gen_synthetic
from vitprune.errors import DimensionError, NonFiniteError
from vitprune.estimators import AttentionHeadRanker, StructuredPruner, VisionTransformerClassifier
from vitprune.validation import check_images, check_labels
from vitprune.vit import count_params

TINY = dict(image_size=16, patch_size=4, embed_dim=16, num_blocks=2, num_heads=4,
            mlp_hidden=32, batch_size=32)


@pytest.fixture(scope="module")
def blobs():
    X, y = gen_synthetic(0, classes=3, samples=360, image_size=16, signal=1.0)
    labels = np.array(["cat", "dog", "eel"])[y]
    return X[:300], labels[:300], X[300:], labels[300:]


@pytest.fixture(scope="module")
def fitted(blobs):
    X, y, _, _ = blobs
    return VisionTransformerClassifier(epochs=4, **TINY).fit(X, y)


def test_classifier_fits_string_labels(fitted, blobs):
    _, _, Xt, yt = blobs
    assert fitted.classes_.tolist() == ["cat", "dog", "eel"]
    assert fitted.score(Xt, yt) > 0.9
    proba = fitted.predict_proba(Xt)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(fitted.predict(Xt)) <= set(fitted.classes_)


def test_flattened_input_accepted(fitted, blobs):
    _, _, Xt, _ = blobs
    np.testing.assert_array_equal(fitted.predict(Xt.reshape(len(Xt), -1)), fitted.predict(Xt))


def test_fit_is_deterministic(fitted, blobs):
    X, y, Xt, _ = blobs
    again = clone(fitted).fit(X, y)
    np.testing.assert_array_equal(again.decision_function(Xt), fitted.decision_function(Xt))


def test_unfitted_raises(blobs):
    with pytest.raises(NotFittedError):
        VisionTransformerClassifier().predict(blobs[2])


def test_ranker_scores_are_distributions(fitted, blobs):
    ranker = AttentionHeadRanker(fitted, batch_size=32).fit(blobs[0])
    S = ranker.transform()
    assert S.shape == (2, 4)
    np.testing.assert_allclose(S.sum(axis=1), 1.0, atol=1e-9)
    assert (S >= 0).all()


def test_pruner_realizes_budget(fitted, blobs):
    X, y, Xt, yt = blobs
    pr = StructuredPruner(fitted, sparsity=0.4, epochs=1, finetune_epochs=1,
                          batch_size=32, ranking_batch_size=32).fit(X, y)
    assert pr.structure_.matches(pr.budget_)
    for blk, b in zip(pr.model_.blocks, pr.budget_.blocks):
        assert len(blk.head_ids) == b.heads
    assert pr.n_params_ == count_params(pr.model_) < count_params(fitted.model_)
    assert pr.predict(Xt).shape == yt.shape
    assert len(pr.trace_.records) == 1


def test_pruner_rejects_unseen_labels(fitted, blobs):
    X, y, _, _ = blobs
    y = y.copy()
    y[0] = "fox"
    with pytest.raises(ValueError, match="unseen"):
        StructuredPruner(fitted, epochs=1).fit(X, y)


def test_check_images_errors():
    with pytest.raises(DimensionError):
        check_images(np.zeros((2, 3, 4, 5)))
    with pytest.raises(NonFiniteError):
        check_images(np.full((1, 1, 2, 2), np.nan))
    with pytest.raises(TypeError):
        check_images(np.array([["a"]]))
    with pytest.raises(DimensionError):
        check_labels(np.zeros((3, 1)), 3)
    assert check_images(np.zeros((1, 1, 2, 2), np.uint8)).dtype == np.float32


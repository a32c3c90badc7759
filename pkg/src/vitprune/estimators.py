"""scikit-learn style wrappers around training, head ranking and pruning."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .data import split_validation
from .optimizer import (
    Dataset,
    Schedule,
    admm_init,
    finetune,
    hard_prune_compact,
    run_soft_pruning,
    train_sgd,
)
from .ranking import RankingConfig, rank_heads
from .sparsity import er_allocate, full_budget
from .validation import check_images, check_labels
from .vit import VitConfig, count_params, init_weights, predict_logits
from .numerics.kernels import softmax_rows

_DTYPES = {"float32": np.float32, "float64": np.float64}


def _encode(y):
    check_classification_targets(y)
    classes, codes = np.unique(y, return_inverse=True)
    return classes, codes.astype(np.int64)


def _dataset(X, codes, val_fraction):
    Xtr, ytr, Xva, yva = split_validation(X, codes, val_fraction)
    if len(yva) == 0:
        Xva, yva = Xtr, ytr
    return Dataset(Xtr, ytr, Xva, yva)


class _PredictMixin:
    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config, self.model_.dtype)
        return predict_logits(self.model_, X)

    def decision_function(self, X):
        return self._logits(X)

    def predict_proba(self, X):
        return softmax_rows(self._logits(X).astype(np.float64))

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]


class VisionTransformerClassifier(_PredictMixin, ClassifierMixin, BaseEstimator):
    """Dense ViT trained from scratch with minibatch SGD.

    Parameters
    ----------
    image_size, patch_size, embed_dim, num_blocks, num_heads, mlp_hidden : int
        Architecture; channels are taken from ``X``.
    epochs : int
    eta : float
        Learning rate.
    batch_size : int
    val_fraction : float
        Trailing fraction of ``X`` held out for validation.
    dtype : {"float32", "float64"}
    random_state : int

    Attributes
    ----------
    model_ : ModelWeights
    classes_ : ndarray
    history_ : list of dict
    """

    def __init__(self, image_size=32, patch_size=4, embed_dim=64, num_blocks=4,
                 num_heads=4, mlp_hidden=128, epochs=10, eta=0.05, batch_size=128,
                 val_fraction=0.1, dtype="float32", random_state=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.mlp_hidden = mlp_hidden
        self.epochs = epochs
        self.eta = eta
        self.batch_size = batch_size
        self.val_fraction = val_fraction
        self.dtype = dtype
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X, dtype=_DTYPES[self.dtype])
        check_labels(y, X.shape[0])
        self.classes_, codes = _encode(y)
        config = VitConfig(image_size=self.image_size, patch_size=self.patch_size,
                           embed_dim=self.embed_dim, num_blocks=self.num_blocks,
                           num_heads=self.num_heads, mlp_hidden=self.mlp_hidden,
                           num_classes=len(self.classes_), channels=X.shape[1])
        X = check_images(X, config)
        model = init_weights(config, self.random_state, _DTYPES[self.dtype])
        self.model_, self.history_ = train_sgd(
            model, _dataset(X, codes, self.val_fraction), self.epochs, self.eta,
            Schedule(self.batch_size, self.random_state))
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self


class AttentionHeadRanker(BaseEstimator):
    """Per-block head importance of a fitted :class:`VisionTransformerClassifier`.

    ``fit(X)`` ranks heads on the first ``batch_size`` images of ``X``.

    Attributes
    ----------
    scores_ : list of ndarray
        Stationary distribution per block.
    rankings_ : list of BlockRanking
    """

    def __init__(self, estimator=None, batch_size=64, tol=1e-10, max_iter=10_000):
        self.estimator = estimator
        self.batch_size = batch_size
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y=None):
        check_is_fitted(self.estimator, "model_")
        model = self.estimator.model_
        X = check_images(X, model.config, model.dtype)
        cfg = RankingConfig(self.batch_size, self.tol, self.max_iter)
        self.rankings_ = rank_heads(model, X[:self.batch_size], None, cfg)
        self.scores_ = [r.scores.scores for r in self.rankings_]
        return self

    def transform(self, X=None):
        """Scores as an ``(num_blocks, num_heads)`` array."""
        check_is_fitted(self, "scores_")
        return np.vstack(self.scores_)


class StructuredPruner(_PredictMixin, ClassifierMixin, BaseEstimator):
    """Head ranking, soft pruning, hard pruning and fine-tuning of a fitted
    :class:`VisionTransformerClassifier`.

    Attributes
    ----------
    model_ : ModelWeights
        Compacted, fine-tuned model.
    budget_ : SparsityBudget
    structure_ : PruneStructure
    trace_ : PruneTrace
    history_ : list of dict
        Fine-tuning history.
    """

    def __init__(self, estimator=None, sparsity=0.4, rho=1e-3, lam=1e-2, eta=0.05,
                 epochs=5, finetune_epochs=1, batch_size=128, ranking_batch_size=64,
                 val_fraction=0.1, placement="full", random_state=0):
        self.estimator = estimator
        self.sparsity = sparsity
        self.rho = rho
        self.lam = lam
        self.eta = eta
        self.epochs = epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.ranking_batch_size = ranking_batch_size
        self.val_fraction = val_fraction
        self.placement = placement
        self.random_state = random_state

    def fit(self, X, y):
        check_is_fitted(self.estimator, "model_")
        dense = self.estimator.model_
        cfg = dense.config
        X = check_images(X, cfg, dense.dtype)
        check_labels(y, X.shape[0])
        self.classes_ = self.estimator.classes_
        codes = np.searchsorted(self.classes_, y)
        if np.any(self.classes_[np.minimum(codes, len(self.classes_) - 1)] != y):
            raise ValueError("y contains labels unseen by the dense estimator")
        data = _dataset(X, codes.astype(np.int64), self.val_fraction)
        self.budget_ = full_budget(cfg) if self.sparsity == 0 else er_allocate(cfg, self.sparsity)
        perm = np.random.default_rng([self.random_state, 7]).permutation(len(data.y_train))
        batch = data.X_train[perm[:self.ranking_batch_size]]
        masks = [r.mask for r in rank_heads(dense, batch, self.budget_)]
        state = admm_init(dense, self.rho, self.lam, self.eta, self.epochs, self.placement)
        schedule = Schedule(self.batch_size, self.random_state)
        soft, self.trace_ = run_soft_pruning(dense, masks, self.budget_, state, data, schedule)
        pruned, self.structure_ = hard_prune_compact(soft, masks, self.budget_)
        self.model_, self.history_ = finetune(pruned, data, self.finetune_epochs, self.eta,
                                              schedule, epoch_offset=self.epochs)
        self.n_params_ = count_params(self.model_)
        return self

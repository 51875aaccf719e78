"""scikit-learn style estimators wrapping the functional pipeline.

`DiverseExpertClassifier` trains the shared-backbone multi-expert network on
long-tailed labels; `StabilityAggregator` learns the expert aggregation
weights from unlabeled (test) features by prediction-stability ascent. Both
follow the fit/predict + get_params/set_params conventions so they compose
with pipelines, cloning, and model selection utilities.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .aggregate import AdaptConfig, adapt
from .data import ClassPrior, Dataset, LongTailProfile, ViewConfig, prior_from_counts
from .errors import DomainError
from .model import check_weights, forward, init_model, predict_probs
from .numkit import Rng, softmax
from .train import TrainConfig, train


def _profile_from_counts(counts: np.ndarray) -> LongTailProfile:
    """Best-effort profile describing observed per-class counts (the counts
    are pre-sorted descending by the estimator, so direction is forward)."""
    counts = np.asarray(counts, dtype=np.int64)
    rho = float(counts.max() / counts.min())
    return LongTailProfile(
        class_count=int(counts.size),
        counts=tuple(int(c) for c in counts),
        rho=rho,
        direction="uniform" if rho == 1.0 else "forward",
        max_count=int(counts.max()),
    )


class DiverseExpertClassifier(ClassifierMixin, BaseEstimator):
    """Multi-expert classifier trained with expertise-guided losses.

    A shared ReLU MLP backbone feeds `n_experts` heads; expert 1 trains with
    plain cross-entropy, expert 2 with the balanced softmax loss, and later
    experts with increasingly inverse-weighted softmax losses, so the heads
    specialize toward head-heavy, uniform, and tail-heavy label distributions
    respectively. Classes are re-indexed internally by descending training
    frequency so the inverse prior is always the frequency flip.

    Parameters mirror the training configuration; `predict` uses uniform
    expert weights unless `weights` is supplied (e.g. from
    `StabilityAggregator`).
    """

    def __init__(
        self,
        n_experts: int = 3,
        hidden: tuple[int, ...] = (64, 64),
        head_hidden: int | None = None,
        epochs: int = 40,
        batch_size: int = 128,
        learning_rate: float = 0.1,
        schedule: str = "linear",
        momentum: float = 0.9,
        nesterov: bool = True,
        weight_decay: float = 5e-4,
        tail_lambda: float = 2.0,
        random_state: int = 0,
    ):
        self.n_experts = n_experts
        self.hidden = hidden
        self.head_hidden = head_hidden
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.tail_lambda = tail_lambda
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        classes, y_idx = np.unique(y, return_inverse=True)
        if classes.size < 2:
            raise DomainError("need at least two classes to fit")
        counts = np.bincount(y_idx)
        # stable order: descending count, ties by class value
        order = np.lexsort((np.arange(classes.size), -counts))
        rank = np.empty_like(order)
        rank[order] = np.arange(order.size)
        internal_y = rank[y_idx]

        self.classes_ = classes
        self._order = order
        self.n_features_in_ = X.shape[1]
        profile = _profile_from_counts(counts[order])
        dataset = Dataset(X, internal_y, profile)
        self.prior_: ClassPrior = prior_from_counts(counts[order])

        rng = Rng(self.random_state)
        self.model_ = init_model(
            input_dim=X.shape[1],
            hidden=tuple(self.hidden),
            n_experts=self.n_experts,
            n_classes=classes.size,
            rng=rng.child("init"),
            head_hidden=self.head_hidden,
        )
        cfg = TrainConfig(
            epochs=self.epochs,
            batch_size=min(self.batch_size, X.shape[0]),
            lr0=self.learning_rate,
            schedule=self.schedule,  # type: ignore[arg-type]
            momentum=self.momentum,
            nesterov=self.nesterov,
            weight_decay=self.weight_decay,
            lam=self.tail_lambda,
            seed=self.random_state,
        )
        self.history_ = train(self.model_, dataset, self.prior_, cfg, rng.child("train"))
        self.weights_ = np.full(self.n_experts, 1.0 / self.n_experts)
        return self

    def _to_class_columns(self, internal: np.ndarray) -> np.ndarray:
        out = np.empty_like(internal)
        out[:, self._order] = internal
        return out

    def predict_proba(self, X, weights=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        w = self.weights_ if weights is None else check_weights(weights, self.n_experts)
        return self._to_class_columns(predict_probs(self.model_, X, w))

    def predict(self, X, weights=None):
        probs = self.predict_proba(X, weights=weights)
        return self.classes_[np.argmax(probs, axis=1)]

    def expert_logits(self, X) -> list[np.ndarray]:
        """Per-expert logits with columns in classes_ order."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        logits, _ = forward(self.model_, X)
        return [self._to_class_columns(v) for v in logits]

    def expert_proba(self, X, expert: int) -> np.ndarray:
        """Softmax prediction of one expert alone."""
        return softmax(self.expert_logits(X)[expert], axis=1)


class StabilityAggregator(BaseEstimator):
    """Learns expert aggregation weights from unlabeled features.

    Wraps a fitted `DiverseExpertClassifier`; `fit(X)` runs prediction-
    stability ascent over two stochastic views of each sample, updating only
    the weight parameters, and stops early once any weight falls to
    `stop_threshold`. After fitting, `predict`/`predict_proba` delegate to
    the classifier under the learned weights.
    """

    def __init__(
        self,
        classifier: DiverseExpertClassifier | None = None,
        epochs: int = 5,
        batch_size: int = 128,
        learning_rate: float = 1.2,
        schedule: str = "linear",
        momentum: float = 0.9,
        nesterov: bool = True,
        weight_decay: float = 0.03,
        stop_threshold: float = 0.05,
        noise_sigma: float = 2.9,
        mask_prob: float = 0.0,
        scale_jitter: float = 0.35,
        random_state: int = 0,
    ):
        self.classifier = classifier
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.schedule = schedule
        self.momentum = momentum
        self.nesterov = nesterov
        self.weight_decay = weight_decay
        self.stop_threshold = stop_threshold
        self.noise_sigma = noise_sigma
        self.mask_prob = mask_prob
        self.scale_jitter = scale_jitter
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.classifier is None:
            raise DomainError("StabilityAggregator requires a fitted classifier")
        check_is_fitted(self.classifier, "model_")
        X = check_array(X, dtype=np.float64)
        cfg = AdaptConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.learning_rate,
            schedule=self.schedule,
            momentum=self.momentum,
            nesterov=self.nesterov,
            weight_decay=self.weight_decay,
            stop_threshold=self.stop_threshold,
            views=ViewConfig(
                noise_sigma=self.noise_sigma,
                mask_prob=self.mask_prob,
                scale_jitter=self.scale_jitter,
            ),
        )
        result = adapt(self.classifier.model_, X, cfg, Rng(self.random_state).child("adapt"))
        self.weights_ = result.state.w
        self.stopped_ = result.state.stopped
        self.n_iter_ = result.state.epoch
        self.trace_ = result.trace
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        return self.classifier.predict_proba(X, weights=self.weights_)

    def predict(self, X):
        check_is_fitted(self, "weights_")
        return self.classifier.predict(X, weights=self.weights_)

"""scikit-learn style wrappers around the training loop and classifiers."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import evaluate, nn, train
from .data import Dataset


class DPSinkhornGenerator(BaseEstimator):
    """Class-conditional generator trained with the DP-Sinkhorn loop.

    Parameters mirror :class:`dpsinkhorn.train.TrainConfig`; see there for
    meanings. ``X`` must lie in [-1, 1] and ``y`` holds integer class ids.

    Attributes
    ----------
    theta_ : GeneratorParams
    report_ : TrainReport
    n_classes_ : int
    """

    def __init__(self, batch_size=50, sigma=1.5, clip_bound=0.5, noise_convention="alg1",
                 composition="perrow", lam=0.05, p=0.4, m_mix=1.0, alpha_c=15.0, latent_dim=12,
                 hidden=(128, 128), optimizer="adam", lr=1e-4, steps=1000, target_epsilon=10.0,
                 delta=1e-5, dp_enabled=True, sinkhorn_iters=500, seed=0):
        self.batch_size = batch_size
        self.sigma = sigma
        self.clip_bound = clip_bound
        self.noise_convention = noise_convention
        self.composition = composition
        self.lam = lam
        self.p = p
        self.m_mix = m_mix
        self.alpha_c = alpha_c
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.optimizer = optimizer
        self.lr = lr
        self.steps = steps
        self.target_epsilon = target_epsilon
        self.delta = delta
        self.dp_enabled = dp_enabled
        self.sinkhorn_iters = sinkhorn_iters
        self.seed = seed

    def _config(self):
        return train.TrainConfig(**{k: v for k, v in self.get_params().items()})

    def fit(self, X, y=None):
        if y is None:
            X = check_array(X)
            y = np.zeros(X.shape[0], dtype=int)
        else:
            X, y = check_X_y(X, y)
        classes = np.unique(y)
        if not np.array_equal(classes, np.arange(classes.size)):
            raise ValueError("class labels must be 0..L-1")
        dataset = Dataset(X, y, int(classes.size))
        self.theta_, self.report_ = train.train(self._config(), dataset)
        self.n_classes_ = int(classes.size)
        self.n_features_in_ = X.shape[1]
        return self

    def sample(self, n_samples, labels=None, seed=0):
        """Return ``(X, y)`` with ``n_samples`` generated rows."""
        check_is_fitted(self, "theta_")
        data = evaluate.synthesize(self.theta_, n_samples, seed, labels)
        return data.samples, data.labels

    @property
    def epsilon_(self):
        check_is_fitted(self, "report_")
        return self.report_.epsilon


class SoftmaxClassifier(ClassifierMixin, BaseEstimator):
    """Multinomial logistic regression or one-hidden-layer MLP, full-batch Adam."""

    def __init__(self, kind="logreg", budget=500, hidden=100, lr=0.05, l2=1e-4, seed=0):
        self.kind = kind
        self.budget = budget
        self.hidden = hidden
        self.lr = lr
        self.l2 = l2
        self.seed = seed

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        self.weights_, self.biases_ = nn.train_classifier(
            X, codes, kind=self.kind, budget=self.budget, n_classes=self.classes_.size,
            hidden=self.hidden, lr=self.lr, l2=self.l2, seed=self.seed)
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "weights_")
        X = check_array(X)
        return nn.classifier_predict_proba(self.weights_, self.biases_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

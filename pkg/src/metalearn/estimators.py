"""scikit-learn style wrappers: meta-train with ``fit``, adapt to a new task, then ``predict``.

Training data is a pooled ``(X, y)`` with a ``groups`` array naming the task
of every row, so the estimators compose with sklearn tooling (``clone``,
``get_params``, pipelines of preprocessing steps).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .algorithms import GbmlLearner, MamlLearner, meta_train_step
from .autodiff import Tensor, cross_entropy, detach, mse_loss, no_grad, softmax
from .nn import MLP, clone_module

_ALGORITHMS = ("maml", "fomaml", "anil", "metasgd", "metacurvature", "metakfo")


def _make_learner(model, algorithm, inner_lr, adapt_steps):
    if algorithm not in _ALGORITHMS:
        raise ValueError(f"algorithm must be one of {_ALGORITHMS}, got {algorithm!r}")
    if algorithm == "maml":
        return MamlLearner(model, inner_lr, adapt_steps=adapt_steps)
    if algorithm == "fomaml":
        return MamlLearner(model, inner_lr, first_order=True, adapt_steps=adapt_steps)
    if algorithm == "anil":
        return MamlLearner(model, inner_lr, adapt_steps=adapt_steps, head_names=model.head_names)
    if algorithm == "metasgd":
        return GbmlLearner(model, "scale", lr=1.0, adapt_steps=adapt_steps, transform_init=inner_lr)
    if algorithm == "metacurvature":
        return GbmlLearner(model, "metacurvature", lr=inner_lr, adapt_steps=adapt_steps)
    return GbmlLearner(model, "kronecker", lr=inner_lr, adapt_transform=True, adapt_steps=adapt_steps)


class _FewShotBase(BaseEstimator):
    _classification = False

    def __init__(self, hidden_layer_sizes=(40, 40), activation="relu", algorithm="maml", inner_lr=0.01,
                 outer_lr=0.001, adapt_steps=1, meta_iterations=1000, task_batch_size=4, shots=5,
                 random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.algorithm = algorithm
        self.inner_lr = inner_lr
        self.outer_lr = outer_lr
        self.adapt_steps = adapt_steps
        self.meta_iterations = meta_iterations
        self.task_batch_size = task_batch_size
        self.shots = shots
        self.random_state = random_state

    def _loss(self):
        return cross_entropy if self._classification else mse_loss

    def _targets(self, y):
        return y if self._classification else y.reshape(-1, 1)

    def _output_size(self, y, groups) -> int:
        return 1

    def _task_labels(self, y):
        return y

    def fit(self, X, y, groups):
        X, y = check_X_y(X, y, y_numeric=not self._classification)
        groups = np.asarray(groups)
        if groups.shape != (len(X),):
            raise ValueError("groups must give one task id per row")
        rng = np.random.default_rng(self.random_state)
        self.n_features_in_ = X.shape[1]
        out = self._output_size(y, groups)
        model = MLP([X.shape[1], *self.hidden_layer_sizes, out], self.activation, rng)
        self.learner_ = _make_learner(model, self.algorithm, self.inner_lr, self.adapt_steps)
        tasks = [np.flatnonzero(groups == g) for g in np.unique(groups)]
        tasks = [t for t in tasks if len(t) > self.shots]
        if not tasks:
            raise ValueError(f"every task needs more than shots={self.shots} rows")
        self.meta_losses_ = []
        for _ in range(self.meta_iterations):
            batch = []
            for j in rng.choice(len(tasks), size=self.task_batch_size):
                rows = rng.permutation(tasks[j])
                ys = self._task_labels(y[rows])
                s, q = rows[:self.shots], rows[self.shots:]
                batch.append(((Tensor(X[s]), self._targets(ys[:self.shots])),
                              (Tensor(X[q]), self._targets(ys[self.shots:]))))
            self.meta_losses_.append(meta_train_step(self.learner_, batch, self.outer_lr, self._loss()))
        self.adapted_ = None
        return self

    def adapt(self, X_support, y_support):
        """Fast-adapt a copy of the meta-trained model to one new task's support set."""
        check_is_fitted(self, "learner_")
        X_support, y_support = check_X_y(X_support, y_support, y_numeric=not self._classification)
        ys = self._prepare_support(y_support)
        clone = self.learner_.clone()
        for _ in range(self.adapt_steps):
            clone.adapt(self._loss()(clone(Tensor(X_support)), self._targets(ys)), first_order=True)
        module = clone_module(clone.module)
        module.set_parameters({n: Tensor(detach(p).data, requires_grad=True)
                               for n, p in clone.module.named_parameters()})
        self.adapted_ = module
        return self

    def _prepare_support(self, y):
        return y

    def _forward(self, X):
        check_is_fitted(self, "learner_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        model = self.adapted_ if self.adapted_ is not None else self.learner_.module
        with no_grad():
            return model(Tensor(X)).data


class FewShotRegressor(RegressorMixin, _FewShotBase):
    """Few-shot regressor; ``predict`` uses the adapted model when ``adapt`` was called."""

    def predict(self, X):
        return self._forward(X).ravel()


class FewShotClassifier(ClassifierMixin, _FewShotBase):
    """Few-shot classifier over ``n_ways`` classes per task.

    Within each training task, labels are remapped to 0..n_ways-1 in sorted
    order; ``adapt`` records the support labels as ``classes_``.
    """

    _classification = True

    def __init__(self, n_ways=5, hidden_layer_sizes=(64, 64), activation="relu", algorithm="maml",
                 inner_lr=0.5, outer_lr=0.1, adapt_steps=1, meta_iterations=500, task_batch_size=4, shots=1,
                 random_state=None):
        super().__init__(hidden_layer_sizes, activation, algorithm, inner_lr, outer_lr, adapt_steps,
                         meta_iterations, task_batch_size, shots, random_state)
        self.n_ways = n_ways

    def _output_size(self, y, groups):
        for g in np.unique(groups):
            if len(np.unique(y[groups == g])) > self.n_ways:
                raise ValueError(f"task {g} has more than n_ways={self.n_ways} classes")
        return self.n_ways

    def _task_labels(self, y):
        return np.unique(y, return_inverse=True)[1]

    def _prepare_support(self, y):
        self.classes_, inverse = np.unique(y, return_inverse=True)
        if len(self.classes_) > self.n_ways:
            raise ValueError(f"support set has {len(self.classes_)} classes, more than n_ways={self.n_ways}")
        return inverse

    def predict_proba(self, X):
        probs = softmax(self._forward(X))
        if getattr(self, "classes_", None) is not None and self.adapted_ is not None:
            return probs[:, :len(self.classes_)] / probs[:, :len(self.classes_)].sum(axis=1, keepdims=True)
        return probs

    def predict(self, X):
        probs = self.predict_proba(X)
        idx = probs.argmax(axis=1)
        if getattr(self, "classes_", None) is not None and self.adapted_ is not None:
            return self.classes_[idx]
        return idx

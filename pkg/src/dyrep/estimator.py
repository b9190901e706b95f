"""scikit-learn compatible classifier wrapping training with structural re-parameterization."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import tensor as T
from .data import Dataset
from .grow_prune import DepConfig, GrowConfig
from .models import ModelSpec, build_model
from .trainer import TrainConfig, deploy, train


class DyRepClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier trained with dynamic re-parameterization.

    ``X`` is an ``(n_samples, channels, height, width)`` array. After
    :meth:`fit` the network is collapsed back to its original topology, so
    prediction costs the same as the plain model.

    Parameters mirror :class:`~dyrep.trainer.TrainConfig` and
    :class:`~dyrep.models.ModelSpec`; ``dyrep=False`` trains the plain
    baseline with identical settings.
    """

    def __init__(self, family="vgg_like", widths=(16, 32, 64), blocks=None, epochs=20, t=5, lr=0.1,
                 momentum=0.9, weight_decay=1e-4, batch_size=128, metric="synflow", dyrep=True,
                 precision="double", gamma_init=0.01, calib_batches=20, dep_lambda=0.02, random_state=0):
        self.family = family
        self.widths = widths
        self.blocks = blocks
        self.epochs = epochs
        self.t = t
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.metric = metric
        self.dyrep = dyrep
        self.precision = precision
        self.gamma_init = gamma_init
        self.calib_batches = calib_batches
        self.dep_lambda = dep_lambda
        self.random_state = random_state

    def _check_images(self, X):
        if X.ndim != 4:
            raise ValueError(f"expected images of shape (n, channels, height, width), got {X.shape}")
        return X

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = self._check_images(X)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit a classifier")
        widths = list(self.widths)
        blocks = list(self.blocks) if self.blocks is not None else [1] * len(widths)
        spec = ModelSpec(self.family, widths, blocks, len(self.classes_), X.shape[1:])
        cfg = TrainConfig(epochs=self.epochs, t=self.t, lr=self.lr, momentum=self.momentum,
                          weight_decay=self.weight_decay, batch_size=self.batch_size,
                          seed=self.random_state, metric=self.metric, precision=self.precision,
                          dyrep=self.dyrep,
                          grow=GrowConfig(gamma_init=self.gamma_init, calib_batches=self.calib_batches),
                          dep=DepConfig(lam=self.dep_lambda))
        data = Dataset(X.astype(cfg.dtype), self.label_encoder_.transform(y), len(self.classes_))
        model = build_model(spec, self.random_state, cfg.dtype)
        state, self.history_ = train(model, data, cfg)
        self.training_model_ = state.model
        self.model_ = deploy(state.model)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.input_shape_ = tuple(X.shape[1:])
        return self

    def _logits(self, X):
        check_is_fitted(self, "model_")
        X = self._check_images(check_array(X, allow_nd=True, dtype=np.float64))
        if tuple(X.shape[1:]) != self.input_shape_:
            raise ValueError(f"X has sample shape {X.shape[1:]}, the model was fitted on {self.input_shape_}")
        return self.model_.predict_logits(X.astype(self.model_.dtype))

    def predict_proba(self, X):
        return np.exp(T.log_softmax(self._logits(X)))

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[logits.argmax(axis=1)]

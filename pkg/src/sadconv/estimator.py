"""scikit-learn style wrapper around :func:`sadconv.trainer.fit`."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import check_images, check_masks
from .dataio import Triplet
from .metrics import region_rmse_lab
from .trainer import TrainConfig, fit, predict


class ShadowRemover(BaseEstimator):
    """Shadow removal network with fit / predict / score.

    ``X`` are shadow images and ``y`` shadow-free targets, both
    ``(n, 3, h, w)`` in [0, 1]; ``mask`` marks shadow pixels. Hyperparameters
    mirror :class:`sadconv.trainer.TrainConfig`.

    Attributes
    ----------
    net_ : SadcNet
    history_ : list of dict
        Per-epoch losses.
    """

    def __init__(self, epochs=300, batch_size=5, lr=2e-4, lr_schedule="constant", kappa=7, schedule="warmup-ramp",
                 warmup_epochs=50, fashion=1, arm="sadc", use_intra=True, channels=16, n_blocks=3, kernel_size=3,
                 seed=0, lambda1=1.0, extractor="standin", phase="test"):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_schedule = lr_schedule
        self.kappa = kappa
        self.schedule = schedule
        self.warmup_epochs = warmup_epochs
        self.fashion = fashion
        self.arm = arm
        self.use_intra = use_intra
        self.channels = channels
        self.n_blocks = n_blocks
        self.kernel_size = kernel_size
        self.seed = seed
        self.lambda1 = lambda1
        self.extractor = extractor
        self.phase = phase

    def _config(self) -> TrainConfig:
        params = self.get_params()
        params.pop("phase")
        return TrainConfig(**params)

    def fit(self, X, y, mask):
        X = check_images(X, "X")
        y = check_images(y, "y")
        if y.shape != X.shape:
            raise ValueError(f"y shape {y.shape} does not match X {X.shape}")
        m = check_masks(mask, X)
        data = [Triplet(X[i], m[i], y[i], f"{i:05d}") for i in range(X.shape[0])]
        self.net_, self.history_ = fit(self._config(), data)
        return self

    def _check_fitted(self):
        if not hasattr(self, "net_"):
            raise NotFittedError("ShadowRemover is not fitted yet; call fit first")

    def predict(self, X, mask):
        self._check_fitted()
        X = check_images(X, "X")
        m = check_masks(mask, X)
        return np.stack([predict(self.net_, X[i], m[i], self.phase) for i in range(X.shape[0])])

    def score(self, X, y, mask):
        """Negative mean shadow-region LAB RMSE (higher is better)."""
        pred = self.predict(X, mask)
        y = check_images(y, "y")
        m = check_masks(mask, pred)
        return -float(np.mean([region_rmse_lab(pred[i], y[i], m[i], "shadow") for i in range(len(pred))]))

"""scikit-learn style wrapper around network construction, training and tiled inference."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .evaluation import binarize, dice_coefficient
from .inference import predict_volume
from .network import NetworkSpec, valid_input_dims
from .training import TrainConfig, train
from .validation import as_volumes, check_split, check_threshold


class UNetGNNSegmenter(BaseEstimator):
    """Voxelwise tree segmenter.

    ``X`` is a list of :class:`~ugnn.data.Volume` or 3-D images; for images
    the binary reference masks go in ``y``.  The last ``n_valid`` volumes
    are held out for validation-loss tracking and early stopping.
    """

    def __init__(self, variant: str = "UGnnReg", output_size: int = 48, learning_rate: float | None = None,
                 max_epochs: int = 200, n_valid: int = 1, threshold: float = 0.5, overlap: float = 0.0,
                 augment: bool = False, dtype: str = "float64", seed: int = 0, first_level_features: int = 8):
        self.variant = variant
        self.output_size = output_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.n_valid = n_valid
        self.threshold = threshold
        self.overlap = overlap
        self.augment = augment
        self.dtype = dtype
        self.seed = seed
        self.first_level_features = first_level_features

    def _spec(self) -> NetworkSpec:
        n = valid_input_dims(self.variant, int(self.output_size))
        return NetworkSpec(self.variant, input_dims=(n, n, n), first_level_features=int(self.first_level_features))

    def fit(self, X, y=None):
        vols = as_volumes(X, y, require_reference=True)
        check_split(len(vols), self.n_valid)
        check_threshold(self.threshold)
        config = TrainConfig(learning_rate=self.learning_rate, max_epochs=self.max_epochs, seed=self.seed,
                             overlap=self.overlap, augment=self.augment, dtype=self.dtype)
        result = train(self._spec(), vols[:-self.n_valid], vols[-self.n_valid:], config)
        self.network_ = result.network
        self.history_ = result.history
        self.stop_reason_ = result.stop.value
        self.n_features_in_ = 1
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "network_")
        return [predict_volume(self.network_, v.image, self.overlap) for v in as_volumes(X)]

    def predict(self, X) -> list[np.ndarray]:
        t = check_threshold(self.threshold)
        return [binarize(p, t).astype(np.uint8) for p in self.predict_proba(X)]

    def score(self, X, y=None) -> float:
        """Mean dice against the reference masks (exclusion removed)."""
        vols = as_volumes(X, y, require_reference=True)
        preds = self.predict(vols)
        return float(np.mean([dice_coefficient(p, v.reference, v.exclusion) for p, v in zip(preds, vols)]))

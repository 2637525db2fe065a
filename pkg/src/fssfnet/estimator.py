"""scikit-learn compatible wrappers.

``CubePatchExtractor`` turns pixel coordinates into normalized patches of a
fixed cube, and ``FSSFNetClassifier`` trains on such patches, so the two
chain in a ``Pipeline`` fitted on ``(coords, labels)``.
"""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_coords, check_cube, check_patches, check_seed
from .data import extract_patches
from .exceptions import ConfigurationError
from .model import count_params_model, forward_full
from .train import FULL_EPOCHS, TrainOptions, prepare_cube, train_full


class CubePatchExtractor(TransformerMixin, BaseEstimator):
    """Map ``(n, 2)`` pixel coordinates to ``(n, W, W, D)`` patches of ``cube``.

    The cube is min-max normalized per band and mirror padded at fit time.
    """

    def __init__(self, cube=None, patch_width=7):
        self.cube = cube
        self.patch_width = patch_width

    def fit(self, X=None, y=None):
        cube = check_cube(self.cube)
        if not isinstance(self.patch_width, numbers.Integral) or self.patch_width < 1 or self.patch_width % 2 == 0:
            raise ConfigurationError(f"patch_width must be a positive odd integer, got {self.patch_width!r}")
        self.padded_ = prepare_cube(cube, self.patch_width)
        self.image_shape_ = cube.shape[:2]
        self.n_bands_ = cube.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self, "padded_")
        coords = check_coords(X, self.image_shape_)
        return extract_patches(self.padded_, coords, self.patch_width)


class FSSFNetClassifier(ClassifierMixin, BaseEstimator):
    """Factorized spectral-spatial patch classifier.

    Parameters
    ----------
    hidden : {"fcn", "lcn", "cnn"}
        Hidden-layer family of the spectral network.
    pretrain : bool
        Pre-train the spectral network on centre spectra before fine-tuning.
    sharing : bool
        Use one spectral network for every patch position. When False,
        ``W*W`` independent copies are cloned after pre-training.
    pretrain_epochs, finetune_epochs : int
        Full-batch epochs (one ADAM step each) per stage.
    learning_rate, pretrain_decay, finetune_decay : float
        ADAM base rate and per-stage inverse-time decay.
    retain : float
        Dropout retain probability.
    acc_stride : int
        Evaluate training accuracy every ``acc_stride`` epochs.
    random_state : int, Generator or None
        Seeds initialization and dropout masks.

    Attributes
    ----------
    classes_ : ndarray
        Original label values; internally they map to 1..C in sorted order.
    model_ : FssfModel
    history_ : dict
        ``{"pretrain": TrainHistory | None, "finetune": TrainHistory}``
    """

    def __init__(self, hidden="fcn", pretrain=True, sharing=True, pretrain_epochs=FULL_EPOCHS[0],
                 finetune_epochs=FULL_EPOCHS[1], learning_rate=0.001, pretrain_decay=0.005,
                 finetune_decay=0.01, retain=0.5, acc_stride=1, random_state=None):
        self.hidden = hidden
        self.pretrain = pretrain
        self.sharing = sharing
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.learning_rate = learning_rate
        self.pretrain_decay = pretrain_decay
        self.finetune_decay = finetune_decay
        self.retain = retain
        self.acc_stride = acc_stride
        self.random_state = random_state

    def fit(self, X, y):
        X = check_patches(X)
        y = np.asarray(y).ravel()
        if len(y) != len(X):
            raise ValueError(f"{len(X)} patches but {len(y)} labels")
        self.classes_, encoded = np.unique(y, return_inverse=True)
        options = TrainOptions(
            width=X.shape[1], hidden=self.hidden, pretrain=self.pretrain, sharing=self.sharing,
            pretrain_epochs=self.pretrain_epochs, finetune_epochs=self.finetune_epochs,
            lr=self.learning_rate, pretrain_decay=self.pretrain_decay, finetune_decay=self.finetune_decay,
            retain=self.retain, seed=check_seed(self.random_state), acc_stride=self.acc_stride,
        )
        self.model_, self.history_ = train_full(X, encoded + 1, len(self.classes_), options)
        self.n_bands_in_ = X.shape[3]
        self.patch_width_ = X.shape[1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_patches(X, self.patch_width_, self.n_bands_in_)
        return forward_full(self.model_, X, training=False)

    def predict(self, X):
        check_is_fitted(self, "model_")
        # argmax returns the first maximum, so ties go to the lowest class
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def count_params(self):
        check_is_fitted(self, "model_")
        return count_params_model(self.model_)

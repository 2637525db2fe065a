"""Factorized spectral-spatial feature network for hyperspectral pixel classification."""

__version__ = "0.1.0"

from .model import FssfModel, build_model, build_psc, build_sfe, load_model, save_model
from .train import TrainOptions, predict, train_full

__all__ = [
    "CubePatchExtractor",
    "FSSFNetClassifier",
    "FssfModel",
    "TrainOptions",
    "build_model",
    "build_psc",
    "build_sfe",
    "load_model",
    "predict",
    "save_model",
    "train_full",
]


def __getattr__(name):
    # keeps scikit-learn off the import path of the CLI
    if name in ("CubePatchExtractor", "FSSFNetClassifier"):
        from . import estimator

        return getattr(estimator, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")

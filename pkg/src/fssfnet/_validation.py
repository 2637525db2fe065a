"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ConfigurationError, DimensionError


def check_cube(cube):
    cube = np.asarray(cube, dtype=np.float64)
    if cube.ndim != 3 or min(cube.shape) < 1:
        raise DimensionError(f"expected a (rows, cols, bands) cube, got shape {cube.shape}")
    if not np.all(np.isfinite(cube)):
        raise ValueError("cube contains NaN or infinite values")
    return cube


def check_label_raster(labels, cube=None):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError(f"expected a (rows, cols) label raster, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValueError("label raster must hold integers")
        labels = labels.astype(np.int64)
    if labels.size and labels.min() < 0:
        raise ValueError("labels must be >= 0 (0 = unlabeled)")
    if cube is not None and labels.shape != np.shape(cube)[:2]:
        raise DimensionError(f"label raster {labels.shape} does not match cube {np.shape(cube)[:2]}")
    return labels


def check_patches(X, width=None, n_bands=None):
    """Validate a stack of square patches ``(n, W, W, D)`` and return float64."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != X.shape[2]:
        raise DimensionError(f"expected patches of shape (n, W, W, D), got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError("no patches given")
    if X.shape[1] % 2 == 0:
        raise ConfigurationError(f"patch width must be odd, got {X.shape[1]}")
    if width is not None and X.shape[1] != width:
        raise DimensionError(f"expected patch width {width}, got {X.shape[1]}")
    if n_bands is not None and X.shape[3] != n_bands:
        raise DimensionError(f"expected {n_bands} bands, got {X.shape[3]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("patches contain NaN or infinite values")
    return X


def check_coords(coords, shape=None):
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 2 or not np.issubdtype(coords.dtype, np.integer):
        raise DimensionError(f"expected integer (n, 2) pixel coordinates, got {coords.shape} {coords.dtype}")
    if shape is not None and coords.size:
        if coords.min() < 0 or coords[:, 0].max() >= shape[0] or coords[:, 1].max() >= shape[1]:
            raise IndexError(f"coordinates outside a {shape[0]}x{shape[1]} image")
    return coords.astype(np.int64)


def check_seed(random_state):
    """Turn ``random_state`` into a non-negative int seed (None draws one)."""
    if random_state is None:
        return int(np.random.SeedSequence().generate_state(1, np.uint32)[0])
    if isinstance(random_state, numbers.Integral) and random_state >= 0:
        return int(random_state)
    if isinstance(random_state, np.random.Generator):
        return int(random_state.integers(0, 2**63))
    raise ConfigurationError(f"random_state must be None, a non-negative int or a Generator, got {random_state!r}")

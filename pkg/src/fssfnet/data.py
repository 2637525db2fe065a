"""Hyperspectral cube and label I/O, preprocessing, patches and splits.

Cubes are ``(rows, cols, bands)`` float arrays (pixel-interleaved in C
order); label rasters are ``(rows, cols)`` integer arrays with 0 meaning
unlabeled.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DimensionError, FormatError, PairingError

CUBE_MAGIC = b"HSC1"
LABEL_MAGIC = b"HSL1"
FORMAT_VERSION = 1

_CUBE_HEADER = struct.Struct("<4sBIII")
_LABEL_HEADER = struct.Struct("<4sBII")


def save_cube(cube, path):
    cube = np.asarray(cube)
    if cube.ndim != 3:
        raise DimensionError(f"cube must be (rows, cols, bands), got shape {cube.shape}")
    rows, cols, bands = cube.shape
    payload = np.ascontiguousarray(cube, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_CUBE_HEADER.pack(CUBE_MAGIC, FORMAT_VERSION, rows, cols, bands))
        fh.write(payload.tobytes())


def _read_header(buf, header, magic, what):
    if len(buf) < header.size:
        raise FormatError(f"{what} file truncated inside the {header.size}-byte header", len(buf))
    fields = header.unpack_from(buf, 0)
    if fields[0] != magic:
        raise FormatError(f"bad {what} magic {fields[0]!r}, expected {magic!r}", 0)
    if fields[1] != FORMAT_VERSION:
        raise FormatError(f"unsupported {what} version {fields[1]}", 4)
    return fields[2:]


def load_cube(path):
    """Read an HSC1 file into a float64 ``(rows, cols, bands)`` array."""
    buf = Path(path).read_bytes()
    rows, cols, bands = _read_header(buf, _CUBE_HEADER, CUBE_MAGIC, "cube")
    if min(rows, cols, bands) < 1:
        raise FormatError(f"cube header has a zero extent {rows}x{cols}x{bands}", 5)
    need = rows * cols * bands * 4
    have = len(buf) - _CUBE_HEADER.size
    if have < need:
        raise FormatError(f"cube payload truncated: expected {need} bytes, found {have}", len(buf))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after cube payload", _CUBE_HEADER.size + need)
    values = np.frombuffer(buf, dtype="<f4", count=rows * cols * bands, offset=_CUBE_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise FormatError("non-finite value in cube payload", _CUBE_HEADER.size + 4 * int(bad[0]))
    return values.astype(np.float64).reshape(rows, cols, bands)


def save_labels(labels, path):
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise DimensionError(f"label raster must be (rows, cols), got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ConfigurationError("labels must fit in an unsigned 16-bit integer")
    rows, cols = labels.shape
    with open(path, "wb") as fh:
        fh.write(_LABEL_HEADER.pack(LABEL_MAGIC, FORMAT_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())


def load_labels(path):
    buf = Path(path).read_bytes()
    rows, cols = _read_header(buf, _LABEL_HEADER, LABEL_MAGIC, "label")
    if min(rows, cols) < 1:
        raise FormatError(f"label header has a zero extent {rows}x{cols}", 5)
    need = rows * cols * 2
    have = len(buf) - _LABEL_HEADER.size
    if have < need:
        raise FormatError(f"label payload truncated: expected {need} bytes, found {have}", len(buf))
    if have > need:
        raise FormatError(f"{have - need} trailing bytes after label payload", _LABEL_HEADER.size + need)
    values = np.frombuffer(buf, dtype="<u2", count=rows * cols, offset=_LABEL_HEADER.size)
    return values.astype(np.int64).reshape(rows, cols)


def check_pair(cube, labels):
    if np.shape(cube)[:2] != np.shape(labels):
        raise PairingError(f"label raster {np.shape(labels)} does not match cube {np.shape(cube)[:2]}")


def normalize(cube):
    """Per-band min-max scaling to [0, 1] over the whole image.

    Constant bands are set to 0.5 with a warning.
    """
    cube = np.asarray(cube, dtype=np.float64)
    lo = cube.min(axis=(0, 1))
    hi = cube.max(axis=(0, 1))
    span = hi - lo
    flat = span <= 0
    if np.any(flat):
        warnings.warn(f"constant band(s) {np.flatnonzero(flat).tolist()} mapped to 0.5", RuntimeWarning, stacklevel=2)
    out = (cube - lo) / np.where(flat, 1.0, span)
    out[..., flat] = 0.5
    return out


def pad_mirror(cube, margin):
    """Reflect-pad the spatial axes by ``margin`` without repeating the edge."""
    cube = np.asarray(cube)
    if margin < 0:
        raise ConfigurationError(f"margin must be >= 0, got {margin}")
    if margin and (margin >= cube.shape[0] or margin >= cube.shape[1]):
        raise DimensionError(f"margin {margin} too large for a {cube.shape[0]}x{cube.shape[1]} image")
    pad = [(margin, margin), (margin, margin)] + [(0, 0)] * (cube.ndim - 2)
    return np.pad(cube, pad, mode="reflect")


def _check_width(width):
    if width < 1 or width % 2 == 0:
        raise ConfigurationError(f"patch width must be a positive odd integer, got {width}")


def extract_patch(padded, row, col, width):
    """``width x width x bands`` window centred on unpadded pixel (row, col)."""
    _check_width(width)
    margin = (width - 1) // 2
    rows, cols = padded.shape[0] - 2 * margin, padded.shape[1] - 2 * margin
    if not (0 <= row < rows and 0 <= col < cols):
        raise IndexError(f"patch centre ({row}, {col}) outside a {rows}x{cols} image")
    return padded[row:row + width, col:col + width]


def extract_patches(padded, coords, width):
    """Stack of patches for an ``(n, 2)`` array of unpadded coordinates."""
    _check_width(width)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    margin = (width - 1) // 2
    rows, cols = padded.shape[0] - 2 * margin, padded.shape[1] - 2 * margin
    if coords.size and (coords.min() < 0 or coords[:, 0].max() >= rows or coords[:, 1].max() >= cols):
        raise IndexError(f"patch centres outside a {rows}x{cols} image")
    offsets = np.arange(width)
    r = coords[:, 0, None, None] + offsets[None, :, None]
    c = coords[:, 1, None, None] + offsets[None, None, :]
    return padded[r, c]


def one_hot(label, n_classes):
    label = np.asarray(label)
    if np.any(label < 1) or np.any(label > n_classes):
        raise ValueError(f"labels must lie in 1..{n_classes}")
    return np.eye(n_classes, dtype=np.float64)[label - 1]


@dataclass
class SplitSpec:
    """How many labelled pixels per class go to training.

    ``mode`` is ``"count"`` (``count`` per class), ``"fraction"``
    (``floor(fraction * n)``, at least 1) or ``"fixed"`` (``counts[c-1]``
    for class c).
    """

    mode: str = "count"
    count: int = 50
    fraction: float = 0.1
    counts: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("count", "fraction", "fixed"):
            raise ConfigurationError(f"unknown split mode {self.mode!r}")
        if self.mode == "count" and self.count < 1:
            raise ConfigurationError("per-class count must be >= 1")
        if self.mode == "fraction" and not 0.0 < self.fraction < 1.0:
            raise ConfigurationError("split fraction must be in (0, 1)")
        if self.mode == "fixed" and (not self.counts or min(self.counts) < 1):
            raise ConfigurationError("fixed split needs a positive count per class")

    def wanted(self, class_id, population):
        if self.mode == "count":
            return self.count
        if self.mode == "fraction":
            return max(1, int(np.floor(self.fraction * population)))
        if class_id > len(self.counts):
            raise ConfigurationError(f"fixed split lists {len(self.counts)} classes, raster has class {class_id}")
        return self.counts[class_id - 1]


def split(labels, spec):
    """Stratified train/test split of labelled pixel coordinates.

    Returns ``(train, test)`` as ``(n, 2)`` int arrays of (row, col).
    Classes are visited in ascending order with one seeded stream.
    """
    labels = np.asarray(labels)
    classes = np.unique(labels[labels > 0])
    if classes.size == 0:
        raise ValueError("label raster has no labelled pixels")
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for c in classes:
        coords = np.argwhere(labels == c)
        n = len(coords)
        if n < 2:
            raise ValueError(f"class {c} has {n} labelled pixel; at least 2 are needed to split")
        k = spec.wanted(int(c), n)
        if k >= n:
            warnings.warn(f"class {c}: requested {k} of {n} samples, clamped to {n - 1}", RuntimeWarning, stacklevel=2)
            k = n - 1
        order = rng.permutation(n)
        train.append(coords[np.sort(order[:k])])
        test.append(coords[np.sort(order[k:])])
    return np.concatenate(train), np.concatenate(test)


def filter_classes(labels, min_count):
    """Drop classes with fewer than ``min_count`` pixels and renumber the rest 1..C'."""
    if min_count < 1:
        raise ConfigurationError("min_count must be >= 1")
    labels = np.asarray(labels)
    out = np.zeros_like(labels)
    new_id = 0
    for c in np.unique(labels[labels > 0]):
        mask = labels == c
        if mask.sum() >= min_count:
            new_id += 1
            out[mask] = new_id
    if new_id == 0:
        raise ValueError(f"no class has at least {min_count} labelled pixels")
    return out


def class_signatures(n_bands, n_classes):
    """Unit-peak Gaussian bumps centred at band ``c * D / C`` with width ``D / 8``."""
    bands = np.arange(n_bands, dtype=np.float64)
    centres = np.arange(1, n_classes + 1) * n_bands / n_classes
    width = n_bands / 8.0
    return np.exp(-0.5 * ((bands[None, :] - centres[:, None]) / width) ** 2)


def synth_scene(rows=64, cols=64, n_bands=16, n_classes=5, noise=0.05, blob_scale=16.0, seed=0):
    """Seeded synthetic scene of Voronoi class blobs with noisy signatures.

    Returns ``(cube, labels)``. Every class owns at least one Voronoi cell;
    a random 5% of pixels (never a cell seed) are left unlabelled.
    """
    if not 1 <= n_classes <= 32:
        raise ConfigurationError("synthetic scenes support 1..32 classes")
    if n_bands < 4:
        raise ConfigurationError("synthetic scenes need at least 4 bands")
    if rows < 1 or cols < 1 or rows * cols < n_classes:
        raise ConfigurationError(f"a {rows}x{cols} scene cannot hold {n_classes} classes")
    if noise < 0 or blob_scale <= 0:
        raise ConfigurationError("noise must be >= 0 and blob scale > 0")
    rng = np.random.default_rng(seed)
    n_pix = rows * cols
    n_seeds = int(min(n_pix, max(n_classes, round(n_pix / blob_scale**2))))
    seed_idx = rng.choice(n_pix, size=n_seeds, replace=False)
    seed_class = np.concatenate([np.arange(1, n_classes + 1), rng.integers(1, n_classes + 1, n_seeds - n_classes)])
    seed_rc = np.stack(np.divmod(seed_idx, cols), axis=1).astype(np.float64)

    from scipy.spatial import cKDTree

    grid = np.indices((rows, cols)).reshape(2, -1).T
    _, nearest = cKDTree(seed_rc).query(grid)
    labels = seed_class[nearest].reshape(rows, cols)

    sig = class_signatures(n_bands, n_classes)
    cube = sig[labels - 1] + noise * rng.standard_normal((rows, cols, n_bands))

    candidates = np.setdiff1d(np.arange(n_pix), seed_idx[:n_classes])
    n_hidden = min(int(round(0.05 * n_pix)), candidates.size)
    hidden = rng.choice(candidates, size=n_hidden, replace=False)
    labels = labels.reshape(-1).copy()
    labels[hidden] = 0
    return cube, labels.reshape(rows, cols)


def ingest_raw(raw_path, header):
    """Read a headerless binary cube described by a ``key=value`` sidecar.

    Keys: ``rows``, ``cols``, ``bands``; optional ``interleave``
    (bip/bil/bsq, default bip), ``dtype`` (numpy name, default float32)
    and ``byteorder`` (little/big).
    """
    try:
        rows, cols, bands = int(header["rows"]), int(header["cols"]), int(header["bands"])
    except KeyError as exc:
        raise FormatError(f"sidecar header missing key {exc.args[0]!r}") from None
    interleave = header.get("interleave", "bip").lower()
    order = "<" if header.get("byteorder", "little").lower() == "little" else ">"
    try:
        dtype = np.dtype(header.get("dtype", "float32")).newbyteorder(order)
    except TypeError:
        raise FormatError(f"unknown dtype {header.get('dtype')!r}") from None
    buf = Path(raw_path).read_bytes()
    need = rows * cols * bands * dtype.itemsize
    if len(buf) != need:
        raise PairingError(f"raw file has {len(buf)} bytes, header implies {need} ({rows}x{cols}x{bands} {dtype})")
    flat = np.frombuffer(buf, dtype=dtype).astype(np.float64)
    if interleave == "bip":
        cube = flat.reshape(rows, cols, bands)
    elif interleave == "bil":
        cube = flat.reshape(rows, bands, cols).transpose(0, 2, 1)
    elif interleave == "bsq":
        cube = flat.reshape(bands, rows, cols).transpose(1, 2, 0)
    else:
        raise FormatError(f"unknown interleave {interleave!r}")
    if not np.all(np.isfinite(cube)):
        raise FormatError("non-finite value in raw cube")
    return np.ascontiguousarray(cube)


def ingest_raw_labels(raw_path, rows, cols, byteorder="little"):
    buf = Path(raw_path).read_bytes()
    if len(buf) != rows * cols * 2:
        raise PairingError(f"raw label file has {len(buf)} bytes, expected {rows * cols * 2}")
    dtype = np.dtype("<u2" if byteorder == "little" else ">u2")
    return np.frombuffer(buf, dtype=dtype).astype(np.int64).reshape(rows, cols)


def read_sidecar(path):
    header = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"sidecar line {line!r} is not key=value")
        header[key.strip().lower()] = value.strip()
    if "d" in header and "bands" not in header:
        header["bands"] = header.pop("d")
    return header

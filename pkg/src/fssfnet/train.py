"""Two-stage full-batch training: SFE pre-training, then joint fine-tuning."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .data import extract_patches, normalize, one_hot, pad_mirror
from .exceptions import ConfigurationError, NumericalError, PairingError
from .model import backward_full, build_model, forward_full, set_sharing
from .nn import Adam, cross_entropy

logger = logging.getLogger(__name__)

FULL_EPOCHS = (10000, 1000)
DESK_EPOCHS = (2000, 300)


@dataclass
class StageConfig:
    stage: str = "pretrain"
    epochs: int | None = None
    lr: float = 0.001
    decay: float | None = None
    seed: int = 0
    acc_stride: int = 1

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigurationError(f"stage must be 'pretrain' or 'finetune', got {self.stage!r}")
        first = self.stage == "pretrain"
        if self.epochs is None:
            self.epochs = FULL_EPOCHS[0] if first else FULL_EPOCHS[1]
        if self.decay is None:
            self.decay = 0.005 if first else 0.01
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.acc_stride < 1:
            raise ConfigurationError("acc_stride must be >= 1")


@dataclass
class TrainHistory:
    stage: str
    loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    seconds: float = 0.0

    def __len__(self):
        return len(self.loss)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "loss", "train_acc"])
            for i, (loss, acc) in enumerate(zip(self.loss, self.train_acc), start=1):
                writer.writerow([i, repr(loss), "" if math.isnan(acc) else repr(acc)])


def _check_training_set(x, y, n_classes):
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ConfigurationError("empty training set")
    if len(x) != len(y):
        raise PairingError(f"{len(x)} samples but {len(y)} labels")
    return y, one_hot(y, n_classes)


def _record(history, epoch, loss, acc_fn, config):
    if not math.isfinite(loss):
        raise NumericalError(f"{history.stage}: non-finite loss at epoch {epoch}")
    history.loss.append(loss)
    if epoch % config.acc_stride == 0 or epoch == config.epochs:
        history.train_acc.append(acc_fn())
    else:
        history.train_acc.append(float("nan"))


def pretrain(sfe, spectra, y, config, n_classes=None):
    """Train the spectral network alone on centre-pixel spectra.

    One ADAM step per epoch over the whole training set. Returns
    ``(sfe, history, optimizer)``; ``sfe`` is updated in place.
    """
    n_classes = sfe.n_out if n_classes is None else n_classes
    y, target = _check_training_set(spectra, y, n_classes)
    spectra = np.asarray(spectra, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr, config.decay)
    history = TrainHistory("pretrain")
    start = time.perf_counter()

    def accuracy():
        pred = sfe.forward(spectra, training=False)
        return float(np.mean(np.argmax(pred, axis=1) + 1 == y))

    for epoch in range(1, config.epochs + 1):
        probs = sfe.forward(spectra, training=True, rng=rng)
        loss = cross_entropy(probs, target)
        sfe.backward(loss.grad, from_logits=True)
        opt.step(sfe.named_parameters("sfe."))
        _record(history, epoch, loss.value, accuracy, config)
    history.seconds = time.perf_counter() - start
    logger.info("pretrain: %d epochs, final loss %.6f", config.epochs, history.loss[-1])
    return sfe, history, opt


def finetune(model, patches, y, config):
    """Jointly train SFE and PSC on patches labelled by their centre pixel.

    Returns ``(model, history)``; the optimizer is kept on ``model.optimizer``.
    """
    y, target = _check_training_set(patches, y, model.n_classes)
    patches = np.asarray(patches, dtype=np.float64)
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr, config.decay)
    model.optimizer = opt
    history = TrainHistory("finetune")
    start = time.perf_counter()

    def accuracy():
        pred = forward_full(model, patches, training=False)
        return float(np.mean(np.argmax(pred, axis=1) + 1 == y))

    for epoch in range(1, config.epochs + 1):
        probs = forward_full(model, patches, training=True, rng=rng)
        loss = cross_entropy(probs, target)
        backward_full(model, loss.grad)
        opt.step(model.named_parameters())
        _record(history, epoch, loss.value, accuracy, config)
    history.seconds = time.perf_counter() - start
    logger.info("finetune: %d epochs, final loss %.6f", config.epochs, history.loss[-1])
    return model, history


@dataclass
class TrainOptions:
    width: int = 7
    hidden: str = "fcn"
    pretrain: bool = True
    sharing: bool = True
    pretrain_epochs: int = FULL_EPOCHS[0]
    finetune_epochs: int = FULL_EPOCHS[1]
    lr: float = 0.001
    pretrain_decay: float = 0.005
    finetune_decay: float = 0.01
    retain: float = 0.5
    seed: int = 0
    acc_stride: int = 1

    @classmethod
    def desk(cls, **kwargs):
        kwargs.setdefault("pretrain_epochs", DESK_EPOCHS[0])
        kwargs.setdefault("finetune_epochs", DESK_EPOCHS[1])
        return cls(**kwargs)


def _stage_seeds(seed):
    init, pre, fine = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init),
            int(pre.generate_state(1, np.uint64)[0]),
            int(fine.generate_state(1, np.uint64)[0]))


def train_full(patches, y, n_classes, options):
    """Pre-train (optional), clone replicas if sharing is off, then fine-tune.

    Returns ``(model, {"pretrain": history | None, "finetune": history})``.
    """
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 4:
        raise ConfigurationError(f"patches must be (n, W, W, D), got shape {patches.shape}")
    width, n_bands = patches.shape[1], patches.shape[3]
    if width != options.width:
        raise PairingError(f"patches have width {width}, options say {options.width}")
    init_rng, pre_seed, fine_seed = _stage_seeds(options.seed)
    model = build_model(n_bands, n_classes, width, options.hidden, retain=options.retain, rng=init_rng)
    histories = {"pretrain": None, "finetune": None}
    if options.pretrain:
        m = (width - 1) // 2
        config = StageConfig("pretrain", options.pretrain_epochs, options.lr, options.pretrain_decay,
                             pre_seed, options.acc_stride)
        _, histories["pretrain"], _ = pretrain(model.sfe[0], patches[:, m, m, :], y, config, n_classes)
    if not options.sharing:
        model = set_sharing(model, False)
    config = StageConfig("finetune", options.finetune_epochs, options.lr, options.finetune_decay,
                         fine_seed, options.acc_stride)
    model, histories["finetune"] = finetune(model, patches, y, config)
    return model, histories


def prepare_cube(cube, width):
    """Normalize and mirror-pad a cube for patch extraction."""
    return pad_mirror(normalize(cube), (width - 1) // 2)


def predict_proba(model, padded, coords, batch_size=512):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    out = np.empty((len(coords), model.n_classes))
    for start in range(0, len(coords), batch_size):
        chunk = coords[start:start + batch_size]
        out[start:start + len(chunk)] = forward_full(model, extract_patches(padded, chunk, model.width))
    return out


def predict(model, cube, coords=None, batch_size=512):
    """Predicted classes (1..C) for ``coords``, or a full raster when omitted.

    ``cube`` is the raw (unnormalized, unpadded) image. Ties go to the
    lowest class index.
    """
    cube = np.asarray(cube, dtype=np.float64)
    if cube.ndim != 3 or cube.shape[2] != model.n_bands:
        raise PairingError(f"model expects {model.n_bands} bands, cube has shape {cube.shape}")
    padded = prepare_cube(cube, model.width)
    if coords is None:
        rows, cols = cube.shape[:2]
        grid = np.indices((rows, cols)).reshape(2, -1).T
        return (np.argmax(predict_proba(model, padded, grid, batch_size), axis=1) + 1).reshape(rows, cols)
    return np.argmax(predict_proba(model, padded, coords, batch_size), axis=1) + 1


def fit_scene(cube, labels, train_coords, options, n_classes=None):
    """Normalize, pad and cut training patches from a scene, then ``train_full``."""
    coords = np.asarray(train_coords, dtype=np.int64)
    padded = prepare_cube(cube, options.width)
    patches = extract_patches(padded, coords, options.width)
    y = np.asarray(labels)[coords[:, 0], coords[:, 1]]
    n_classes = int(np.max(labels)) if n_classes is None else n_classes
    return train_full(patches, y, n_classes, options)

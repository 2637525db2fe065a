"""SFE-Net / PSC-Net builders and their factorized patch composition.

The spectral network (SFE) maps one pixel spectrum to a class-probability
vector. The spatial network (PSC) classifies the centre pixel from the
row-major concatenation of the SFE outputs of all ``W*W`` patch pixels.
With sharing on, a single SFE serves every patch position and its
parameter gradient is the mean of the per-position gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DimensionError, FormatError, PairingError, StateError
from .nn import (
    Adam,
    BatchNorm,
    Dense,
    Dropout,
    Network,
    Selu,
    Softmax,
    SpectralConv,
)

HIDDEN_KINDS = ("fcn", "lcn", "cnn")
UNITS = 100
RETAIN = 0.5
CONV_CHANNELS = (20, 15)
CONV_KERNEL = 5
CONV_STRIDE = 3


def build_sfe(n_bands, n_classes, hidden="fcn", *, units=UNITS, retain=RETAIN, rng=None):
    """Spectral feature network: D bands -> C softmax probabilities."""
    if hidden not in HIDDEN_KINDS:
        raise ConfigurationError(f"hidden kind must be one of {HIDDEN_KINDS}, got {hidden!r}")
    if n_bands < 1 or n_classes < 1:
        raise ConfigurationError("band and class counts must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    layers = []

    def block(first, n_out):
        layers.extend([first, BatchNorm(n_out), Selu(n_out), Dropout(n_out, retain)])

    if hidden == "fcn":
        block(Dense(n_bands, units, rng), units)
        block(Dense(units, units, rng), units)
        width = units
    else:
        if n_bands < CONV_KERNEL:
            raise ConfigurationError(f"{hidden.upper()} variant needs at least {CONV_KERNEL} bands, got {n_bands}")
        shared = hidden == "cnn"
        c1 = SpectralConv(1, n_bands, CONV_CHANNELS[0], CONV_KERNEL, CONV_STRIDE, shared, rng)
        block(c1, c1.n_out)
        c2 = SpectralConv(CONV_CHANNELS[0], c1.out_length, CONV_CHANNELS[1], CONV_KERNEL, CONV_STRIDE, shared, rng)
        block(c2, c2.n_out)
        width = c2.n_out
    block(Dense(width, units, rng), units)
    layers.extend([Dense(units, n_classes, rng), BatchNorm(n_classes), Softmax(n_classes)])
    return Network(layers)


def build_psc(n_classes, width, *, units=UNITS, retain=RETAIN, rng=None):
    """Patch classifier: ``W*W*C`` concatenated features -> C probabilities."""
    rng = np.random.default_rng() if rng is None else rng
    n_in = width * width * n_classes
    return Network([
        Dense(n_in, units, rng), Selu(units), Dropout(units, retain),
        Dense(units, n_classes, rng), Softmax(n_classes),
    ])


@dataclass
class FssfModel:
    sfe: list
    psc: Network
    width: int
    n_bands: int
    n_classes: int
    hidden: str = "fcn"
    retain: float = RETAIN
    optimizer: Adam | None = field(default=None, repr=False)

    @property
    def sharing(self):
        return len(self.sfe) == 1

    @property
    def n_positions(self):
        return self.width * self.width

    def __post_init__(self):
        if self.width < 1 or self.width % 2 == 0:
            raise ConfigurationError(f"patch width must be odd and >= 1, got {self.width}")
        if len(self.sfe) not in (1, self.n_positions):
            raise ConfigurationError(f"expected 1 or {self.n_positions} SFE networks, got {len(self.sfe)}")
        if self.psc.n_in != self.n_positions * self.n_classes:
            raise DimensionError(f"PSC input {self.psc.n_in} != W*W*C = {self.n_positions * self.n_classes}")
        self._batch = None

    def named_parameters(self):
        yield from self.psc.named_parameters("psc.")
        if self.sharing:
            yield from self.sfe[0].named_parameters("sfe.")
        else:
            for k, net in enumerate(self.sfe):
                yield from net.named_parameters(f"sfe{k}.")


def build_model(n_bands, n_classes, width=7, hidden="fcn", *, sharing=True, units=UNITS, retain=RETAIN, rng=None):
    rng = np.random.default_rng() if rng is None else rng
    sfe = build_sfe(n_bands, n_classes, hidden, units=units, retain=retain, rng=rng)
    psc = build_psc(n_classes, width, units=units, retain=retain, rng=rng)
    model = FssfModel([sfe], psc, width, n_bands, n_classes, hidden, retain)
    return model if sharing else set_sharing(model, False)


def set_sharing(model, on):
    """Switch between one shared SFE and ``W*W`` independent replicas.

    Turning sharing off clones the current SFE into every position.
    Turning it on keeps the first replica.
    """
    if on == model.sharing:
        return model
    if on:
        sfe = [model.sfe[0]]
    else:
        sfe = [model.sfe[0].clone() for _ in range(model.n_positions)]
    return FssfModel(sfe, model.psc, model.width, model.n_bands, model.n_classes, model.hidden, model.retain)


def forward_sfe(sfe, spectra, training=False, rng=None):
    spectra = np.asarray(spectra, dtype=np.float64)
    if spectra.ndim != 2 or spectra.shape[1] != sfe.n_in:
        raise DimensionError(f"SFE expects (batch, {sfe.n_in}) spectra, got {spectra.shape}")
    return sfe.forward(spectra, training=training, rng=rng)


def _check_patches(model, patches):
    patches = np.asarray(patches, dtype=np.float64)
    want = (model.width, model.width, model.n_bands)
    if patches.ndim != 4 or patches.shape[1:] != want:
        raise DimensionError(f"expected patches of shape (n, {want[0]}, {want[1]}, {want[2]}), got {patches.shape}")
    return patches


def spectral_features(model, patches, training=False, rng=None):
    """Row-major concatenation of per-pixel SFE outputs, ``(n, W*W*C)``."""
    patches = _check_patches(model, patches)
    n, p = patches.shape[0], model.n_positions
    if model.sharing:
        # one pooled batch of n*W*W spectra; batch-norm statistics span it
        probs = model.sfe[0].forward(patches.reshape(n * p, model.n_bands), training=training, rng=rng)
        return probs.reshape(n, p * model.n_classes)
    flat = patches.reshape(n, p, model.n_bands)
    return np.concatenate(
        [net.forward(flat[:, k], training=training, rng=rng) for k, net in enumerate(model.sfe)], axis=1
    )


def forward_full(model, patches, training=False, rng=None):
    """Centre-pixel class probabilities for a batch of ``(W, W, D)`` patches."""
    features = spectral_features(model, patches, training=training, rng=rng)
    out = model.psc.forward(features, training=training, rng=rng)
    model._batch = features.shape[0] if training else None
    return out


def backward_full(model, grad_logits):
    """Backpropagate a gradient taken at the PSC logits.

    PSC gradients are left in ``model.psc``; SFE gradients in the SFE
    layers. With sharing on the SFE gradient is averaged over positions.
    """
    if model._batch is None:
        raise StateError("backward_full needs a preceding training-mode forward_full")
    n, p, c = model._batch, model.n_positions, model.n_classes
    grad_features = model.psc.backward(grad_logits, from_logits=True)
    if model.sharing:
        sfe = model.sfe[0]
        sfe.backward(grad_features.reshape(n * p, c))
        # backprop through the pooled batch sums the positions; make it a mean
        sfe.scale_grads(1.0 / p)
    else:
        segments = grad_features.reshape(n, p, c)
        for k, net in enumerate(model.sfe):
            net.backward(segments[:, k])
    return grad_features


def count_params_model(model):
    """``(trainable, total)`` over PSC and every SFE instance."""
    trainable, total = model.psc.count_params()
    for net in model.sfe:
        t, n = net.count_params()
        trainable += t
        total += n
    return trainable, total


def closed_form_total(n_bands, n_classes):
    """Total parameter count of the canonical shared FCN model with W=7."""
    return 100 * n_bands + 5106 * n_classes + 21600


# FSF1 checkpoint layout, all little-endian:
#   "FSF1", u8 version, u32 D, u32 C, u32 W, u8 sharing, u8 hidden tag,
#   f64 retain, u32 network count (PSC first, then SFE instances);
#   per network: u32 layer count; per layer: u8 kind tag, u8 n_shape,
#   n_shape * u32, then f64 arrays in the layer's params/stats order;
#   u8 optimizer flag, and if set: u64 t, 5 * f64 (lr, decay, b1, b2, eps),
#   then m and v for each parameter in named_parameters order.

FSF_MAGIC = b"FSF1"
FSF_VERSION = 1
_KIND_TAGS = {
    "Dense": 1, "BatchNorm": 2, "Selu": 3, "Dropout": 4, "Softmax": 5,
    "SpectralConvShared": 6, "SpectralConvLocal": 7,
}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}
_ARRAYS = {
    "Dense": (("params", "weight"), ("params", "bias")),
    "SpectralConvShared": (("params", "weight"), ("params", "bias")),
    "SpectralConvLocal": (("params", "weight"), ("params", "bias")),
    "BatchNorm": (("params", "gamma"), ("params", "beta"), ("stats", "moving_mean"), ("stats", "moving_var")),
}
_HEAD = struct.Struct("<4sBIIIBBdI")


def _layer_arrays(layer):
    return [getattr(layer, where)[key] for where, key in _ARRAYS.get(layer.kind, ())]


def save_model(model, path, include_optimizer=True):
    """Write an FSF1 checkpoint; returns the number of parameter/statistic values stored."""
    chunks = [_HEAD.pack(FSF_MAGIC, FSF_VERSION, model.n_bands, model.n_classes, model.width,
                         int(model.sharing), HIDDEN_KINDS.index(model.hidden), model.retain, 1 + len(model.sfe))]
    n_values = 0
    for net in [model.psc, *model.sfe]:
        chunks.append(struct.pack("<I", len(net.layers)))
        for layer in net.layers:
            shape = layer.shape_ints()
            chunks.append(struct.pack(f"<BB{len(shape)}I", _KIND_TAGS[layer.kind], len(shape), *shape))
            for arr in _layer_arrays(layer):
                chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
                n_values += arr.size
    opt = model.optimizer if include_optimizer else None
    chunks.append(struct.pack("<B", opt is not None))
    if opt is not None:
        chunks.append(struct.pack("<Q5d", opt.t, opt.lr, opt.decay, opt.beta1, opt.beta2, opt.eps))
        for name, layer, key in model.named_parameters():
            zeros = np.zeros_like(layer.params[key])
            for store in (opt.m, opt.v):
                chunks.append(np.ascontiguousarray(store.get(name, zeros), dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    return n_values


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("checkpoint truncated", self.pos)
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def array(self, shape):
        count = int(np.prod(shape))
        if self.pos + 8 * count > len(self.buf):
            raise FormatError("checkpoint truncated inside a parameter array", self.pos)
        arr = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos += 8 * count
        return arr.reshape(shape)


def _read_layer(reader, retain):
    offset = reader.pos
    tag, n_shape = reader.unpack("<BB")
    if tag not in _TAG_KINDS:
        raise FormatError(f"unknown layer tag {tag}", offset)
    kind = _TAG_KINDS[tag]
    shape = reader.unpack(f"<{n_shape}I")
    try:
        if kind == "Dense":
            layer = Dense(*shape)
        elif kind == "BatchNorm":
            layer = BatchNorm(*shape)
        elif kind == "Selu":
            layer = Selu(*shape)
        elif kind == "Dropout":
            layer = Dropout(*shape, retain=retain)
        elif kind == "Softmax":
            layer = Softmax(*shape)
        else:
            c_in, length, c_out, kernel, stride = shape
            layer = SpectralConv(c_in, length, c_out, kernel, stride, shared=kind == "SpectralConvShared")
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad {kind} layer shape {shape}: {exc}", offset) from None
    for where, key in _ARRAYS.get(kind, ()):
        store = getattr(layer, where)
        store[key] = reader.array(store[key].shape)
    return layer


def load_model(path, n_bands=None):
    """Read an FSF1 checkpoint. ``n_bands`` checks pairing with a cube."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    magic, version, d, c, w, sharing, hidden_tag, retain, n_nets = reader.unpack(_HEAD.format)
    if magic != FSF_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != FSF_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    if hidden_tag >= len(HIDDEN_KINDS):
        raise FormatError(f"unknown hidden-kind tag {hidden_tag}", 18)
    if n_bands is not None and n_bands != d:
        raise PairingError(f"checkpoint expects {d} bands, cube has {n_bands}")
    nets = []
    for _ in range(n_nets):
        (n_layers,) = reader.unpack("<I")
        try:
            nets.append(Network([_read_layer(reader, retain) for _ in range(n_layers)]))
        except (DimensionError, ConfigurationError) as exc:
            raise FormatError(f"inconsistent network in checkpoint: {exc}", reader.pos) from None
    try:
        model = FssfModel(nets[1:], nets[0], w, d, c, HIDDEN_KINDS[hidden_tag], retain)
    except (DimensionError, ConfigurationError) as exc:
        raise FormatError(f"checkpoint shapes disagree with its header: {exc}") from None
    if model.sharing != bool(sharing):
        raise FormatError("sharing flag disagrees with the number of SFE networks", 17)
    (has_opt,) = reader.unpack("<B")
    if has_opt:
        t, lr, decay, b1, b2, eps = reader.unpack("<Q5d")
        opt = Adam(lr, decay, b1, b2, eps)
        opt.t = t
        for name, layer, key in model.named_parameters():
            opt.m[name] = reader.array(layer.params[key].shape)
            opt.v[name] = reader.array(layer.params[key].shape)
        model.optimizer = opt
    if reader.pos != len(reader.buf):
        raise FormatError("trailing bytes after checkpoint", reader.pos)
    return model

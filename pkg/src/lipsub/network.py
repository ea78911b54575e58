"""Encoder/decoder MLPs and their input derivatives.

Weights are stored as ``(out, in)`` matrices. The decoder output layer uses a
row-independent contraction so that evaluating only some output rows (the DOFs
touched by a cubature subset) returns bit-identical values to the full
evaluation.

Parameters may be swapped for tape variables through :meth:`SubspaceModel.bind`,
which is how training losses containing Jacobians and reduced Hessians get
their parameter gradients.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import jet as jt
from . import tape as T
from .errors import ConfigError, FormatError, ModeError
from .jet import Jet, Pairs

SMOOTH = "softplus"
IDENTITY = "identity"
ACTIVATIONS = (SMOOTH, IDENTITY)

CHECKPOINT_FORMAT = "lipsub-checkpoint/1"


def _activate(x, tag):
    if tag == SMOOTH:
        return jt.softplus(x)
    return x


@dataclass
class Layer:
    W: object
    b: object
    activation: str = SMOOTH

    @property
    def shape(self):
        return np.shape(T.value(self.W))


def _check_layers(layers: Sequence[Layer], n_in: int, n_out: int, what: str):
    if not layers:
        raise ConfigError(f"{what} has no layers")
    width = n_in
    for i, layer in enumerate(layers):
        if layer.activation not in ACTIVATIONS:
            raise ConfigError(
                f"{what} layer {i}: activation {layer.activation!r} is not twice differentiable "
                f"(allowed: {', '.join(ACTIVATIONS)})"
            )
        out, inp = layer.shape
        if inp != width or np.shape(T.value(layer.b)) != (out,):
            raise ConfigError(f"{what} layer {i}: shape {layer.shape} does not chain from width {width}")
        width = out
    if width != n_out:
        raise ConfigError(f"{what} ends at width {width}, expected {n_out}")


@dataclass
class SubspaceModel:
    r: int
    n: int
    decoder: List[Layer]
    encoder: Optional[List[Layer]]
    norm_shift: np.ndarray
    norm_scale: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.norm_shift = np.asarray(self.norm_shift, dtype=float).reshape(self.n)
        self.norm_scale = np.asarray(self.norm_scale, dtype=float).reshape(self.n)
        if not np.all(self.norm_scale > 0):
            raise ConfigError("norm_scale entries must be positive")
        _check_layers(self.decoder, self.r, self.n, "decoder")
        if self.encoder is not None:
            _check_layers(self.encoder, self.n, self.r, "encoder")

    @property
    def supervised(self) -> bool:
        return self.encoder is not None

    # -- parameters ---------------------------------------------------------

    def params(self) -> list:
        out = []
        for layer in self.decoder + (self.encoder or []):
            out.extend([layer.W, layer.b])
        return out

    def bind(self, params: Sequence) -> "SubspaceModel":
        """Same architecture with parameters replaced (for example by tape variables)."""
        params = list(params)
        if len(params) != len(self.params()):
            raise ValueError("parameter count mismatch")

        def rebuild(layers, offset):
            new = []
            for i, layer in enumerate(layers):
                new.append(Layer(params[offset + 2 * i], params[offset + 2 * i + 1], layer.activation))
            return new

        dec = rebuild(self.decoder, 0)
        enc = rebuild(self.encoder, 2 * len(self.decoder)) if self.encoder is not None else None
        m = object.__new__(SubspaceModel)
        m.r, m.n, m.decoder, m.encoder = self.r, self.n, dec, enc
        m.norm_shift, m.norm_scale, m.meta = self.norm_shift, self.norm_scale, self.meta
        return m

    def copy(self) -> "SubspaceModel":
        return self.bind([np.array(T.value(p), dtype=float) for p in self.params()])

    def n_decoder_params(self) -> int:
        return 2 * len(self.decoder)


def init_model(
    r: int,
    n: int,
    hidden: Optional[Sequence[int]] = None,
    supervised: bool = True,
    seed: int = 0,
    norm_shift=None,
    norm_scale=None,
    activation: str = SMOOTH,
) -> SubspaceModel:
    """Randomly initialised model; default 5 hidden layers of width ``max(64, 4r)``."""
    if hidden is None:
        hidden = [max(64, 4 * r)] * 5
    hidden = [int(h) for h in hidden]
    rng = np.random.default_rng(seed)

    def mlp(widths):
        layers = []
        for i in range(len(widths) - 1):
            fan_in, fan_out = widths[i], widths[i + 1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
            b = np.zeros(fan_out)
            act = activation if i < len(widths) - 2 else IDENTITY
            layers.append(Layer(W, b, act))
        return layers

    decoder = mlp([r] + hidden + [n])
    encoder = mlp([n] + hidden[::-1] + [r]) if supervised else None
    shift = np.zeros(n) if norm_shift is None else norm_shift
    scale = np.ones(n) if norm_scale is None else norm_scale
    return SubspaceModel(r, n, decoder, encoder, shift, scale,
                         meta={"hidden": hidden, "activation": activation, "seed": int(seed)})


# ---------------------------------------------------------------------------
# forward passes


def _mlp(x, layers: Sequence[Layer], rows=None):
    last = len(layers) - 1
    for i, layer in enumerate(layers):
        W, b = layer.W, layer.b
        if i == last:
            if rows is not None:
                W = T.take(W, rows, 0)
                b = T.take(b, rows, 0)
            x = jt.linear(x, W, b, rowwise=True)
        else:
            x = jt.linear(x, W, b)
        x = _activate(x, layer.activation)
    return x


def _rows(model, rows):
    if rows is None:
        return model.norm_scale, model.norm_shift
    rows = np.asarray(rows, dtype=np.int64)
    return model.norm_scale[rows], model.norm_shift[rows]


def decode_generic(model: SubspaceModel, z, rows=None):
    """Decode an array, ``Var`` or ``Jet`` of latent points ``(..., r)``."""
    scale, shift = _rows(model, rows)
    out = _mlp(z, model.decoder, rows)
    return out * scale + shift


def decode(model: SubspaceModel, z, rows=None) -> np.ndarray:
    out = decode_generic(model, np.asarray(z, dtype=float), rows)
    return np.asarray(T.value(out))


def encode_generic(model: SubspaceModel, q):
    if model.encoder is None:
        raise ModeError("model has no encoder (unsupervised mode)")
    x = (q - model.norm_shift) * (1.0 / model.norm_scale)
    return _mlp(x, model.encoder)


def encode(model: SubspaceModel, q) -> np.ndarray:
    return np.asarray(T.value(encode_generic(model, np.asarray(q, dtype=float))))


def decode_jet(model: SubspaceModel, z, order: int = 2, rows=None, directions=None, pairs=None) -> Jet:
    """Jet of the decoder at ``z`` (shape ``(..., r)``) along the latent axes."""
    z = np.asarray(z, dtype=float) if not isinstance(z, T.Var) else z
    if directions is None:
        directions = np.eye(model.r)
    if order >= 2 and pairs is None:
        pairs = Pairs.upper(len(directions))
    x = Jet.seed(z, directions, pairs if order >= 2 else None)
    return decode_generic(model, x, rows)


def decode_jacobian(model: SubspaceModel, z, rows=None) -> np.ndarray:
    """``(n, r)`` Jacobian, or ``(len(rows), r)`` when restricted to ``rows``."""
    j = decode_jet(model, np.asarray(z, dtype=float), order=1, rows=rows)
    return np.moveaxis(np.asarray(j.d), 0, -1)


def decode_second_directional(model: SubspaceModel, z, u, v, rows=None) -> np.ndarray:
    """``d2 f / dz2 [u, v]``; the single mixed term is shared by both argument orders."""
    dirs = np.stack([np.asarray(u, dtype=float), np.asarray(v, dtype=float)])
    j = decode_jet(model, np.asarray(z, dtype=float), order=2, rows=rows, directions=dirs, pairs=Pairs.single())
    if j.dd is None:  # purely affine decoder
        return np.zeros_like(np.asarray(j.v))
    return np.asarray(j.dd[0])


# ---------------------------------------------------------------------------
# checkpoints


def _layer_specs(layers):
    if layers is None:
        return None
    return [{"out": int(l.shape[0]), "in": int(l.shape[1]), "activation": l.activation} for l in layers]


def checkpoint_bytes(model: SubspaceModel) -> bytes:
    header = {
        "format": CHECKPOINT_FORMAT,
        "r": int(model.r),
        "n": int(model.n),
        "decoder": _layer_specs(model.decoder),
        "encoder": _layer_specs(model.encoder),
        "norm_shift": [float(x) for x in model.norm_shift],
        "norm_scale": [float(x) for x in model.norm_scale],
        "meta": model.meta,
    }
    blobs = [np.ascontiguousarray(T.value(p), dtype="<f8").tobytes() for p in model.params()]
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return head + b"\n" + b"".join(blobs)


def save_checkpoint(model: SubspaceModel, path) -> str:
    """Write a checkpoint; returns its sha256."""
    data = checkpoint_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> SubspaceModel:
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError("missing checkpoint header", path, 1)
    try:
        header = json.loads(data[:nl].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint header: {exc}", path, 1) from None
    if header.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unsupported checkpoint format {header.get('format')!r}", path, 1)
    blob = memoryview(data)[nl + 1:]
    offset = 0

    def read_layers(specs):
        nonlocal offset
        if specs is None:
            return None
        layers = []
        for s in specs:
            arrs = []
            for shape in ((s["out"], s["in"]), (s["out"],)):
                count = int(np.prod(shape))
                nbytes = 8 * count
                if offset + nbytes > len(blob):
                    raise FormatError("checkpoint weight blob is truncated", path)
                arrs.append(np.frombuffer(blob[offset:offset + nbytes], dtype="<f8").reshape(shape).astype(float))
                offset += nbytes
            layers.append(Layer(arrs[0], arrs[1], s["activation"]))
        return layers

    dec = read_layers(header["decoder"])
    enc = read_layers(header["encoder"])
    if offset != len(blob):
        raise FormatError("checkpoint has trailing bytes after the weight blob", path)
    return SubspaceModel(header["r"], header["n"], dec, enc, header["norm_shift"], header["norm_scale"],
                         header.get("meta", {}))


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


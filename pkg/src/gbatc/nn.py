"""Minimal reverse-mode network engine for the compressor's predictors.

Exactly the layer kinds the pipeline needs: fully connected, 3D convolution,
3D transposed convolution, Leaky ReLU, plus reshape glue, MSE loss, and Adam.
All computation is float64; parameter blobs are little-endian float32, so a
deserialize/serialize round trip is bit-exact and the decode path can be
replayed identically from archived bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError, StateError

PARAM_MAGIC = b"NNP1"

Triple = tuple[int, int, int]
PadTriple = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


# ---------------------------------------------------------------------------
# Core 3D convolution arithmetic (shared by Conv3d and its transpose)
# ---------------------------------------------------------------------------

def conv_output_dims(in_dims: Triple, kernel: Triple, stride: Triple, pads: PadTriple) -> Triple:
    out = []
    for n, k, s, (pb, pa) in zip(in_dims, kernel, stride, pads):
        span = n + pb + pa - k
        if span < 0 or span % s:
            raise ShapeError(
                f"conv geometry not divisible: dim {n} kernel {k} stride {s} pads ({pb},{pa})"
            )
        out.append(span // s + 1)
    return tuple(out)


def same_pads(in_dims: Triple, kernel: Triple, stride: Triple) -> PadTriple:
    """Ceil-mode 'same' padding: output dim = ceil(in/stride), extra pad after."""
    pads = []
    for n, k, s in zip(in_dims, kernel, stride):
        out = -(-n // s)
        total = max((out - 1) * s + k - n, 0)
        pads.append((total // 2, total - total // 2))
    return tuple(pads)


def _pad5(x: np.ndarray, pads: PadTriple) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0)) + pads)


def conv3d_forward(x: np.ndarray, w: np.ndarray, stride: Triple, pads: PadTriple) -> np.ndarray:
    """x: (B, C, D, H, W), w: (O, C, kd, kh, kw) -> (B, O, D', H', W')."""
    kd, kh, kw = w.shape[2:]
    do, ho, wo = conv_output_dims(x.shape[2:], (kd, kh, kw), stride, pads)
    sd, sh, sw = stride
    xp = _pad5(x, pads)
    y = np.zeros((x.shape[0], w.shape[0], do, ho, wo))
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                xs = xp[:, :, i:i + sd * do:sd, j:j + sh * ho:sh, k:k + sw * wo:sw]
                y += np.einsum("bcdhw,oc->bodhw", xs, w[:, :, i, j, k])
    return y


def conv3d_backward_data(dy: np.ndarray, w: np.ndarray, stride: Triple, pads: PadTriple,
                         in_dims: Triple) -> np.ndarray:
    """Adjoint of conv3d_forward in the data argument."""
    kd, kh, kw = w.shape[2:]
    do, ho, wo = dy.shape[2:]
    sd, sh, sw = stride
    padded_dims = tuple(n + pb + pa for n, (pb, pa) in zip(in_dims, pads))
    dxp = np.zeros((dy.shape[0], w.shape[1]) + padded_dims)
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                dxp[:, :, i:i + sd * do:sd, j:j + sh * ho:sh, k:k + sw * wo:sw] += \
                    np.einsum("bodhw,oc->bcdhw", dy, w[:, :, i, j, k])
    (pd, _), (ph, _), (pw, _) = pads
    return dxp[:, :, pd:pd + in_dims[0], ph:ph + in_dims[1], pw:pw + in_dims[2]]


def conv3d_backward_weight(x: np.ndarray, dy: np.ndarray, stride: Triple, pads: PadTriple,
                           kernel: Triple) -> np.ndarray:
    """Adjoint of conv3d_forward in the weight argument."""
    kd, kh, kw = kernel
    do, ho, wo = dy.shape[2:]
    sd, sh, sw = stride
    xp = _pad5(x, pads)
    dw = np.zeros((dy.shape[1], x.shape[1], kd, kh, kw))
    for i in range(kd):
        for j in range(kh):
            for k in range(kw):
                xs = xp[:, :, i:i + sd * do:sd, j:j + sh * ho:sh, k:k + sw * wo:sw]
                dw[:, :, i, j, k] = np.einsum("bodhw,bcdhw->oc", dy, xs)
    return dw


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Common layer interface: forward caches what backward needs."""

    kind: str = ""

    def params(self) -> list[np.ndarray]:
        return []

    def grads(self) -> list[np.ndarray]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def config(self) -> tuple:
        """Kind-specific configuration used to rebuild the layer."""
        return ()


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    kind = "fc"

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            self.w = np.zeros((out_features, in_features))
        else:
            self.w = glorot_uniform(rng, (out_features, in_features), in_features, out_features)
        self.b = np.zeros(out_features)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def forward(self, x):
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(f"fc expects {self.in_features} features, got {flat.shape[1]}")
        self._x_shape = x.shape
        self._x = flat
        return flat @ self.w.T + self.b

    def backward(self, dy):
        if self._x is None:
            raise StateError("backward before forward")
        self.dw = dy.T @ self._x
        self.db = dy.sum(axis=0)
        return (dy @ self.w).reshape(self._x_shape)

    def config(self):
        return (self.in_features, self.out_features)


class LeakyReLU(Layer):
    kind = "leaky-relu"

    def __init__(self, slope: float = 0.01):
        self.slope = slope
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, self.slope * x)

    def backward(self, dy):
        if self._mask is None:
            raise StateError("backward before forward")
        return np.where(self._mask, dy, self.slope * dy)

    def config(self):
        return (self.slope,)


class Reshape(Layer):
    """Glue between conv stacks and fc layers; no parameters."""

    kind = "reshape"

    def __init__(self, target: tuple[int, ...]):
        self.target = tuple(int(t) for t in target)
        self._in_shape = None

    def forward(self, x):
        if int(np.prod(x.shape[1:])) != int(np.prod(self.target)):
            raise ShapeError(f"cannot reshape {x.shape[1:]} to {self.target}")
        self._in_shape = x.shape
        return x.reshape((x.shape[0],) + self.target)

    def backward(self, dy):
        if self._in_shape is None:
            raise StateError("backward before forward")
        return dy.reshape(self._in_shape)

    def config(self):
        return (self.target,)


class Conv3d(Layer):
    kind = "conv3d"

    def __init__(self, in_channels: int, out_channels: int, kernel: Triple,
                 stride: Triple = (1, 1, 1), pads: PadTriple = ((0, 0), (0, 0), (0, 0)),
                 rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.pads = tuple(tuple(p) for p in pads)
        ksize = int(np.prod(self.kernel))
        shape = (out_channels, in_channels) + self.kernel
        if rng is None:
            self.w = np.zeros(shape)
        else:
            self.w = glorot_uniform(rng, shape, in_channels * ksize, out_channels * ksize)
        self.b = np.zeros(out_channels)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv3d expects (B,{self.in_channels},D,H,W), got {x.shape}")
        self._x = x
        y = conv3d_forward(x, self.w, self.stride, self.pads)
        return y + self.b[None, :, None, None, None]

    def backward(self, dy):
        if self._x is None:
            raise StateError("backward before forward")
        self.dw = conv3d_backward_weight(self._x, dy, self.stride, self.pads, self.kernel)
        self.db = dy.sum(axis=(0, 2, 3, 4))
        return conv3d_backward_data(dy, self.w, self.stride, self.pads, self._x.shape[2:])

    def config(self):
        return (self.in_channels, self.out_channels, self.kernel, self.stride, self.pads)


class ConvTranspose3d(Layer):
    """Transposed 3D convolution: the exact adjoint of a Conv3d with the same
    geometry, so output dim = (in-1)*stride + kernel - pad_total."""

    kind = "conv3d-transpose"

    def __init__(self, in_channels: int, out_channels: int, kernel: Triple,
                 stride: Triple = (1, 1, 1), pads: PadTriple = ((0, 0), (0, 0), (0, 0)),
                 rng: np.random.Generator | None = None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.pads = tuple(tuple(p) for p in pads)
        ksize = int(np.prod(self.kernel))
        # Stored as the matching forward-conv weight: (in_c, out_c, k...)
        shape = (in_channels, out_channels) + self.kernel
        if rng is None:
            self.w = np.zeros(shape)
        else:
            self.w = glorot_uniform(rng, shape, in_channels * ksize, out_channels * ksize)
        self.b = np.zeros(out_channels)
        self.dw = np.zeros_like(self.w)
        self.db = np.zeros_like(self.b)
        self._x = None

    def params(self):
        return [self.w, self.b]

    def grads(self):
        return [self.dw, self.db]

    def output_dims(self, in_dims: Triple) -> Triple:
        out = []
        for n, k, s, (pb, pa) in zip(in_dims, self.kernel, self.stride, self.pads):
            m = (n - 1) * s + k - pb - pa
            if m < 1:
                raise ShapeError(f"transpose conv output dim {m} < 1")
            out.append(m)
        return tuple(out)

    def forward(self, x):
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv3d-transpose expects (B,{self.in_channels},D,H,W), got {x.shape}"
            )
        self._x = x
        y = conv3d_backward_data(x, self.w, self.stride, self.pads, self.output_dims(x.shape[2:]))
        return y + self.b[None, :, None, None, None]

    def backward(self, dy):
        if self._x is None:
            raise StateError("backward before forward")
        self.dw = conv3d_backward_weight(dy, self._x, self.stride, self.pads, self.kernel)
        self.db = dy.sum(axis=(0, 2, 3, 4))
        return conv3d_forward(dy, self.w, self.stride, self.pads)

    def config(self):
        return (self.in_channels, self.out_channels, self.kernel, self.stride, self.pads)


class Sequential:
    """Ordered layer stack with shape errors annotated by layer index."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers
        self._ran_forward = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        for i, layer in enumerate(self.layers):
            try:
                x = layer.forward(x)
            except ShapeError as exc:
                raise ShapeError(f"layer {i} ({layer.kind}): {exc}") from None
        self._ran_forward = True
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if not self._ran_forward:
            raise StateError("backward before forward")
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads()]

    @property
    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    # -- serialization ------------------------------------------------------

    def serialize(self) -> bytes:
        """Parameter blob: magic, layer table, f32 little-endian parameters."""
        out = [PARAM_MAGIC, struct.pack("<H", len(self.layers))]
        for layer in self.layers:
            out.append(_pack_layer_header(layer))
        for layer in self.layers:
            for p in layer.params():
                out.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
        return b"".join(out)

    @classmethod
    def deserialize(cls, blob: bytes) -> "Sequential":
        if blob[:4] != PARAM_MAGIC:
            raise ConfigError("bad parameter blob magic")
        (n_layers,) = struct.unpack_from("<H", blob, 4)
        offset = 6
        layers: list[Layer] = []
        for _ in range(n_layers):
            layer, offset = _unpack_layer_header(blob, offset)
            layers.append(layer)
        for layer in layers:
            for p in layer.params():
                nbytes = p.size * 4
                if offset + nbytes > len(blob):
                    raise ConfigError("parameter blob truncated")
                vals = np.frombuffer(blob, dtype="<f4", count=p.size, offset=offset)
                p[...] = vals.astype(np.float64).reshape(p.shape)
                offset += nbytes
        if offset != len(blob):
            raise ConfigError("trailing bytes in parameter blob")
        return cls(layers)

    def frozen(self) -> "Sequential":
        """Round-trip through the f32 blob so in-memory parameters equal the
        bytes a decompressor will read."""
        return Sequential.deserialize(self.serialize())


_KIND_CODES = {"fc": 0, "conv3d": 1, "conv3d-transpose": 2, "leaky-relu": 3, "reshape": 4}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


def _pack_layer_header(layer: Layer) -> bytes:
    code = _KIND_CODES[layer.kind]
    head = struct.pack("<B", code)
    if layer.kind == "fc":
        return head + struct.pack("<II", layer.in_features, layer.out_features)
    if layer.kind in ("conv3d", "conv3d-transpose"):
        flat_pads = [p for pair in layer.pads for p in pair]
        return head + struct.pack(
            "<II3B3B6H", layer.in_channels, layer.out_channels,
            *layer.kernel, *layer.stride, *flat_pads,
        )
    if layer.kind == "leaky-relu":
        return head + struct.pack("<d", layer.slope)
    if layer.kind == "reshape":
        return head + struct.pack("<B", len(layer.target)) + struct.pack(
            f"<{len(layer.target)}I", *layer.target)
    raise ConfigError(f"unknown layer kind {layer.kind}")


def _unpack_layer_header(blob: bytes, offset: int) -> tuple[Layer, int]:
    (code,) = struct.unpack_from("<B", blob, offset)
    offset += 1
    kind = _CODE_KINDS.get(code)
    if kind == "fc":
        fin, fout = struct.unpack_from("<II", blob, offset)
        return Dense(fin, fout), offset + 8
    if kind in ("conv3d", "conv3d-transpose"):
        vals = struct.unpack_from("<II3B3B6H", blob, offset)
        offset += 8 + 6 + 12
        in_c, out_c = vals[0], vals[1]
        kernel = vals[2:5]
        stride = vals[5:8]
        pads = ((vals[8], vals[9]), (vals[10], vals[11]), (vals[12], vals[13]))
        ctor = Conv3d if kind == "conv3d" else ConvTranspose3d
        return ctor(in_c, out_c, kernel, stride, pads), offset
    if kind == "leaky-relu":
        (slope,) = struct.unpack_from("<d", blob, offset)
        return LeakyReLU(slope), offset + 8
    if kind == "reshape":
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        target = struct.unpack_from(f"<{ndim}I", blob, offset)
        return Reshape(target), offset + 4 * ndim
    raise ConfigError(f"unknown layer code {code}")


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements and its gradient wrt pred."""
    if pred.shape != target.shape:
        raise ShapeError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, (2.0 / diff.size) * diff


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Adam with bias correction; state advances deterministically."""

    def __init__(self, params: list[np.ndarray], config: AdamConfig | None = None):
        self.params = params
        self.config = config or AdamConfig()
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError("gradient list length does not match parameters")
        c = self.config
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} vs parameter {p.shape}")
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * (g * g)
            p -= c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)

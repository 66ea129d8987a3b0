"""Lossy reconstruction stage.

A common predictor contract with four implementations: a zero predictor (for
stress-testing the guarantee), a deterministic per-species PCA baseline, a 3D
convolutional autoencoder over species-as-channels blocks, and the autoencoder
composed with a pointwise tensor-correction network.

Predictors operate on normalized block arrays shaped (B, S, K, N1, N2) and
exchange fixed-length latent vectors. Parameter blobs are float32 and are the
bytes counted against the compression ratio.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, RankError, ShapeError, StateError
from .fields import BlockGeometry
from .guarantee import principal_axes

PREDICTOR_KINDS = ("zero", "pca", "gba", "gbatc")


@dataclass(frozen=True)
class TrainConfig:
    """Shared knobs for autoencoder and correction-network training."""

    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


class Predictor:
    """encode maps blocks to latents, decode maps latents back to blocks.

    decode depends only on the latent and stored parameters, never on the
    original data, so the decompressor can replay it from the archive.
    """

    kind: str = ""
    deterministic: bool = True

    species: int
    geometry: BlockGeometry
    latent_length: int

    def require_fitted(self) -> None:
        pass

    def encode(self, blocks: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def decode(self, latents: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def serialize_payload(self) -> bytes:
        raise NotImplementedError

    def _check_blocks(self, blocks: np.ndarray) -> None:
        g = self.geometry
        expect = (self.species, g.K, g.N1, g.N2)
        if blocks.ndim != 5 or blocks.shape[1:] != expect:
            raise ShapeError(f"blocks shaped {blocks.shape}, expected (B,) + {expect}")

    def _check_latents(self, latents: np.ndarray) -> None:
        if latents.ndim != 2 or latents.shape[1] != self.latent_length:
            raise ShapeError(
                f"latents shaped {latents.shape}, expected (B, {self.latent_length})"
            )

    def frozen(self) -> "Predictor":
        """Round-trip parameters through their f32 serialized form so the
        compress side predicts with exactly the bytes the archive stores."""
        return deserialize_predictor(serialize_predictor(self))


def predict(predictor: Predictor, blocks: np.ndarray) -> np.ndarray:
    """Full lossy reconstruction: decode(encode(blocks))."""
    predictor.require_fitted()
    return predictor.decode(predictor.encode(blocks))


# ---------------------------------------------------------------------------
# Zero predictor
# ---------------------------------------------------------------------------

class ZeroPredictor(Predictor):
    """Predicts all zeros; every bit of fidelity must come from the
    correction stage. Exists to stress the guarantee, not to compress well."""

    kind = "zero"
    deterministic = True

    def __init__(self, species: int, geometry: BlockGeometry):
        self.species = species
        self.geometry = geometry
        self.latent_length = 0

    def encode(self, blocks):
        self._check_blocks(blocks)
        return np.zeros((blocks.shape[0], 0))

    def decode(self, latents):
        self._check_latents(latents)
        g = self.geometry
        return np.zeros((latents.shape[0], self.species, g.K, g.N1, g.N2))

    def serialize_payload(self) -> bytes:
        return _pack_common(self)


# ---------------------------------------------------------------------------
# PCA baseline
# ---------------------------------------------------------------------------

class PCAPredictor(Predictor):
    """Per-species mean plus top-r principal directions of the vectorized
    patches. Latent = concatenated per-species coefficients, length S*r."""

    kind = "pca"
    deterministic = True

    def __init__(self, species: int, geometry: BlockGeometry, rank: int,
                 means: np.ndarray | None = None, bases: np.ndarray | None = None):
        d = geometry.patch_dim
        if rank < 0 or rank > d:
            raise RankError(f"rank {rank} outside [0, {d}]")
        self.species = species
        self.geometry = geometry
        self.rank = rank
        self.latent_length = species * rank
        self.means = means        # (S, D)
        self.bases = bases        # (S, D, rank), orthonormal columns
        if means is not None:
            self._check_param_shapes()

    def _check_param_shapes(self):
        d = self.geometry.patch_dim
        if self.means.shape != (self.species, d):
            raise ShapeError(f"means shaped {self.means.shape}")
        if self.bases.shape != (self.species, d, self.rank):
            raise ShapeError(f"bases shaped {self.bases.shape}")

    def require_fitted(self):
        if self.means is None:
            raise StateError("PCA predictor not fitted")

    def fit(self, blocks: np.ndarray) -> "PCAPredictor":
        self._check_blocks(blocks)
        n, s = blocks.shape[0], self.species
        if self.rank > 0 and n < self.rank:
            raise RankError(f"{n} blocks cannot support rank {self.rank}")
        d = self.geometry.patch_dim
        vectors = blocks.reshape(n, s, d)
        self.means = vectors.mean(axis=0)
        bases = np.empty((s, d, self.rank))
        for i in range(s):
            _, axes, _ = principal_axes(vectors[:, i, :], center=True)
            bases[i] = axes[:, :self.rank]
        self.bases = bases
        return self

    def encode(self, blocks):
        self.require_fitted()
        self._check_blocks(blocks)
        n, s, d = blocks.shape[0], self.species, self.geometry.patch_dim
        vectors = blocks.reshape(n, s, d)
        coeffs = np.einsum("nsd,sdr->nsr", vectors - self.means[None], self.bases)
        return coeffs.reshape(n, s * self.rank)

    def decode(self, latents):
        self.require_fitted()
        self._check_latents(latents)
        n, s = latents.shape[0], self.species
        g = self.geometry
        coeffs = latents.reshape(n, s, self.rank)
        vectors = self.means[None] + np.einsum("nsr,sdr->nsd", coeffs, self.bases)
        return vectors.reshape(n, s, g.K, g.N1, g.N2)

    def serialize_payload(self) -> bytes:
        self.require_fitted()
        return (_pack_common(self) + struct.pack("<H", self.rank)
                + _f32_bytes(self.means) + _f32_bytes(self.bases))


def fit_pca_predictor(blocks: np.ndarray, geometry: BlockGeometry, rank: int) -> PCAPredictor:
    species = blocks.shape[1]
    return PCAPredictor(species, geometry, rank).fit(blocks)


# ---------------------------------------------------------------------------
# Autoencoder (GBA)
# ---------------------------------------------------------------------------

DEFAULT_LATENT = 36
_KERNEL = (3, 3, 3)
_DOWN_STRIDE = (1, 2, 2)


def build_autoencoder(species: int, geometry: BlockGeometry, latent: int,
                      rng: np.random.Generator | None = None,
                      ) -> tuple[nn.Sequential, nn.Sequential]:
    """Two conv3d layers (species as channels, S -> S -> 2S, second strided
    (1,2,2)) into one fc producing the latent; decoder mirrors with transposed
    convolutions. Geometry problems surface here, not mid-training."""
    if latent < 1:
        raise ConfigError(f"latent size {latent} < 1")
    if species < 1:
        raise ConfigError("species count < 1")
    dims = (geometry.K, geometry.N1, geometry.N2)
    pads1 = nn.same_pads(dims, _KERNEL, (1, 1, 1))
    pads2 = nn.same_pads(dims, _KERNEL, _DOWN_STRIDE)
    half = tuple(-(-n // s) for n, s in zip(dims, _DOWN_STRIDE))
    flat = 2 * species * int(np.prod(half))
    encoder = nn.Sequential([
        nn.Conv3d(species, species, _KERNEL, (1, 1, 1), pads1, rng),
        nn.LeakyReLU(),
        nn.Conv3d(species, 2 * species, _KERNEL, _DOWN_STRIDE, pads2, rng),
        nn.LeakyReLU(),
        nn.Dense(flat, latent, rng),
    ])
    decoder = nn.Sequential([
        nn.Dense(latent, flat, rng),
        nn.LeakyReLU(),
        nn.Reshape((2 * species,) + half),
        nn.ConvTranspose3d(2 * species, species, _KERNEL, _DOWN_STRIDE, pads2, rng),
        nn.LeakyReLU(),
        nn.ConvTranspose3d(species, species, _KERNEL, (1, 1, 1), pads1, rng),
    ])
    try:
        probe = np.zeros((1, species) + dims)
        out = decoder.forward(encoder.forward(probe).reshape(1, latent))
    except ShapeError as exc:
        raise ConfigError(f"autoencoder geometry invalid for {dims}: {exc}") from None
    if out.shape != probe.shape:
        raise ConfigError(f"decoder yields {out.shape[1:]}, expected {probe.shape[1:]}")
    return encoder, decoder


class GBAPredictor(Predictor):
    kind = "gba"
    deterministic = False

    def __init__(self, species: int, geometry: BlockGeometry, latent: int,
                 encoder: nn.Sequential, decoder: nn.Sequential):
        self.species = species
        self.geometry = geometry
        self.latent_length = latent
        self.encoder = encoder
        self.decoder = decoder

    def encode(self, blocks):
        self._check_blocks(blocks)
        return self.encoder.forward(blocks)

    def decode(self, latents):
        self._check_latents(latents)
        return self.decoder.forward(latents)

    @property
    def param_count(self) -> int:
        return self.encoder.param_count + self.decoder.param_count

    def serialize_payload(self) -> bytes:
        enc = self.encoder.serialize()
        dec = self.decoder.serialize()
        return (_pack_common(self) + struct.pack("<H", self.latent_length)
                + struct.pack("<I", len(enc)) + enc
                + struct.pack("<I", len(dec)) + dec)


def ae_train(blocks: np.ndarray, geometry: BlockGeometry, latent: int = DEFAULT_LATENT,
             config: TrainConfig = TrainConfig()) -> tuple[GBAPredictor, dict]:
    """Minimize MSE reconstruction of the (normalized) blocks. Deterministic
    for a fixed seed: identical seeds give identical parameter blobs."""
    if blocks.ndim != 5:
        raise ShapeError(f"blocks must be (B,S,K,N1,N2), got {blocks.shape}")
    species = blocks.shape[1]
    rng = np.random.default_rng(config.seed)
    encoder, decoder = build_autoencoder(species, geometry, latent, rng)
    predictor = GBAPredictor(species, geometry, latent, encoder, decoder)

    def full_mse():
        out = decoder.forward(encoder.forward(blocks))
        return float(np.mean((out - blocks) ** 2))

    params = encoder.params() + decoder.params()
    adam = nn.Adam(params, nn.AdamConfig(lr=config.lr))
    n = blocks.shape[0]
    history = {"initial_mse": full_mse(), "loss": []}
    for _ in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x = blocks[idx]
            y = decoder.forward(encoder.forward(x))
            loss, dy = nn.mse_loss(y, x)
            encoder.backward(decoder.backward(dy))
            adam.step(encoder.grads() + decoder.grads())
            total += loss * len(idx)
        history["loss"].append(total / n)
    history["final_mse"] = full_mse()
    return predictor, history


# ---------------------------------------------------------------------------
# Tensor correction network (GBATC = GBA + correction)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorrectionNetSpec:
    """Pointwise S-vector to S-vector map; hidden widths must not shrink
    below S (overcompleteness)."""

    widths: tuple[int, ...]
    slope: float = 0.01

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ConfigError("correction net needs at least input and output widths")
        if any(w < 1 for w in self.widths):
            raise ConfigError("non-positive layer width")

    @property
    def species(self) -> int:
        return self.widths[0]

    @classmethod
    def default_for(cls, species: int) -> "CorrectionNetSpec":
        return cls((species, 4 * species, 8 * species, 4 * species, species))

    def validate(self, species: int) -> None:
        if self.widths[0] != species or self.widths[-1] != species:
            raise ConfigError(
                f"correction widths {self.widths} do not start/end at S={species}"
            )
        for w in self.widths[1:-1]:
            if w < species:
                raise ConfigError(f"hidden width {w} < S={species} breaks overcompleteness")


def correction_network(spec: CorrectionNetSpec) -> nn.Sequential:
    layers: list[nn.Layer] = []
    for i in range(len(spec.widths) - 1):
        layers.append(nn.Dense(spec.widths[i], spec.widths[i + 1]))
        if i < len(spec.widths) - 2:
            layers.append(nn.LeakyReLU(spec.slope))
    return nn.Sequential(layers)


def _identity_init(net: nn.Sequential, spec: CorrectionNetSpec) -> bool:
    """Initialize to (near-exact) identity via paired +x/-x channels:
    leaky(x) - leaky(-x) = (1+slope)x recovers x after every activation.
    Needs every hidden width >= 2S; returns False (leaving zeros) otherwise."""
    s = spec.widths[0]
    if any(w < 2 * s for w in spec.widths[1:-1]):
        return False
    q = 1.0 / (1.0 + spec.slope)
    eye = np.eye(s)
    dense = [layer for layer in net.layers if isinstance(layer, nn.Dense)]
    first, last = dense[0], dense[-1]
    first.w[:] = 0.0
    first.w[0:s, 0:s] = eye
    first.w[s:2 * s, 0:s] = -eye
    for mid in dense[1:-1]:
        mid.w[:] = 0.0
        mid.w[0:s, 0:s] = q * eye
        mid.w[0:s, s:2 * s] = -q * eye
        mid.w[s:2 * s, 0:s] = -q * eye
        mid.w[s:2 * s, s:2 * s] = q * eye
    last.w[:] = 0.0
    last.w[0:s, 0:s] = q * eye
    last.w[0:s, s:2 * s] = -q * eye
    return True


def pointwise_pairs(original: np.ndarray, reconstructed: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flatten (B,S,K,N1,N2) block arrays into paired (P,S) pointwise vectors."""
    if original.shape != reconstructed.shape:
        raise ShapeError(f"shapes differ: {original.shape} vs {reconstructed.shape}")
    s = original.shape[1]

    def flat(a):
        return np.moveaxis(a, 1, -1).reshape(-1, s)

    return flat(original), flat(reconstructed)


def apply_pointwise(net: nn.Sequential, blocks: np.ndarray) -> np.ndarray:
    """Apply an S-to-S map at every (t,i,j) point of every block."""
    s = blocks.shape[1]
    moved = np.moveaxis(blocks, 1, -1)
    out = net.forward(moved.reshape(-1, s)).reshape(moved.shape)
    return np.moveaxis(out, -1, 1)


def correction_train(original: np.ndarray, reconstructed: np.ndarray,
                     spec: CorrectionNetSpec, config: TrainConfig = TrainConfig(),
                     noise: float = 1e-3) -> tuple[nn.Sequential, dict]:
    """Train the pointwise map reconstructed -> original.

    Starts at identity (plus tiny symmetry-breaking noise) and keeps the best
    parameters seen across {identity start, every epoch}, so the returned net
    never does worse on the training pairs than leaving the input alone.
    """
    if original.ndim != 2 or original.shape != reconstructed.shape:
        raise ShapeError(
            f"paired (P,S) arrays required, got {original.shape} vs {reconstructed.shape}"
        )
    s = original.shape[1]
    spec.validate(s)
    net = correction_network(spec)
    params = net.params()

    def full_mse():
        return float(np.mean((net.forward(reconstructed) - original) ** 2))

    exact = _identity_init(net, spec)
    history = {"identity_init": exact, "baseline_mse": float(np.mean((reconstructed - original) ** 2))}
    best_loss = full_mse()
    best = [p.copy() for p in params]
    history["identity_mse" if exact else "zero_mse"] = best_loss

    rng = np.random.default_rng(config.seed)
    for layer in net.layers:
        if isinstance(layer, nn.Dense):
            if not exact:
                limit = np.sqrt(6.0 / (layer.in_features + layer.out_features))
                layer.w[...] = rng.uniform(-limit, limit, layer.w.shape)
            else:
                layer.w += noise * rng.standard_normal(layer.w.shape)
    start_loss = full_mse()
    history["start_mse"] = start_loss
    if start_loss < best_loss:
        best_loss = start_loss
        best = [p.copy() for p in params]

    adam = nn.Adam(params, nn.AdamConfig(lr=config.lr))
    n = original.shape[0]
    history["loss"] = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            y = net.forward(reconstructed[idx])
            _, dy = nn.mse_loss(y, original[idx])
            net.backward(dy)
            adam.step(net.grads())
        epoch_loss = full_mse()
        history["loss"].append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best = [p.copy() for p in params]
    for p, src in zip(params, best):
        p[...] = src
    history["final_mse"] = best_loss
    return net, history


class GBATCPredictor(Predictor):
    """Autoencoder decode followed by the pointwise correction network."""

    kind = "gbatc"
    deterministic = False

    def __init__(self, gba: GBAPredictor, correction: nn.Sequential):
        self.gba = gba
        self.correction = correction
        self.species = gba.species
        self.geometry = gba.geometry
        self.latent_length = gba.latent_length
        widths = [layer.in_features for layer in correction.layers
                  if isinstance(layer, nn.Dense)]
        out_widths = [layer.out_features for layer in correction.layers
                      if isinstance(layer, nn.Dense)]
        if not widths or widths[0] != self.species or out_widths[-1] != self.species:
            raise ConfigError("correction network does not map S-vectors to S-vectors")

    def encode(self, blocks):
        return self.gba.encode(blocks)

    def decode(self, latents):
        return apply_pointwise(self.correction, self.gba.decode(latents))

    @property
    def param_count(self) -> int:
        return self.gba.param_count + self.correction.param_count

    def serialize_payload(self) -> bytes:
        corr = self.correction.serialize()
        return self.gba.serialize_payload() + struct.pack("<I", len(corr)) + corr


# ---------------------------------------------------------------------------
# Tagged-union serialization
# ---------------------------------------------------------------------------

_KIND_TAGS = {"zero": 0, "pca": 1, "gba": 2, "gbatc": 3}
_TAG_KINDS = {v: k for k, v in _KIND_TAGS.items()}


def _pack_common(pred: Predictor) -> bytes:
    g = pred.geometry
    return struct.pack("<HHHH", pred.species, g.K, g.N1, g.N2)


def _unpack_common(blob: bytes, offset: int) -> tuple[int, BlockGeometry, int]:
    species, k, n1, n2 = struct.unpack_from("<HHHH", blob, offset)
    return species, BlockGeometry(k, n1, n2), offset + 8


def _f32_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def serialize_predictor(pred: Predictor) -> bytes:
    return struct.pack("<B", _KIND_TAGS[pred.kind]) + pred.serialize_payload()


def deserialize_predictor(blob: bytes) -> Predictor:
    if not blob:
        raise ConfigError("empty predictor blob")
    kind = _TAG_KINDS.get(blob[0])
    if kind is None:
        raise ConfigError(f"unknown predictor tag {blob[0]}")
    species, geometry, offset = _unpack_common(blob, 1)
    if kind == "zero":
        return ZeroPredictor(species, geometry)
    if kind == "pca":
        (rank,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        d = geometry.patch_dim
        means = _read_f32(blob, offset, (species, d))
        offset += species * d * 4
        bases = _read_f32(blob, offset, (species, d, rank))
        return PCAPredictor(species, geometry, rank, means, bases)
    # gba / gbatc share the autoencoder payload
    (latent,) = struct.unpack_from("<H", blob, offset)
    offset += 2
    enc_blob, offset = _read_sized(blob, offset)
    dec_blob, offset = _read_sized(blob, offset)
    gba = GBAPredictor(species, geometry, latent,
                       nn.Sequential.deserialize(enc_blob),
                       nn.Sequential.deserialize(dec_blob))
    if kind == "gba":
        return gba
    corr_blob, offset = _read_sized(blob, offset)
    return GBATCPredictor(gba, nn.Sequential.deserialize(corr_blob))


def _read_f32(blob: bytes, offset: int, shape: tuple[int, ...]) -> np.ndarray:
    count = int(np.prod(shape))
    if offset + count * 4 > len(blob):
        raise ConfigError("predictor blob truncated")
    vals = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return vals.astype(np.float64).reshape(shape)


def _read_sized(blob: bytes, offset: int) -> tuple[bytes, int]:
    (size,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if offset + size > len(blob):
        raise ConfigError("predictor blob truncated")
    return blob[offset:offset + size], offset + size

"""Multi-species spatiotemporal fields: blocking, reassembly, synthesis, raw I/O.

A dataset is an S x T x H x W array of scalars (species, timesteps, rows,
cols), held in float64 during computation and stored on disk as little-endian
float32 plus a small text sidecar.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CoverageError, InvalidGeometryError, InvalidSpecError


@dataclass
class FieldDataset:
    """Multi-species field: values shaped (S, T, H, W), float64."""

    values: np.ndarray
    species_names: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise InvalidSpecError(f"expected 4-d values, got {self.values.ndim}-d")
        if any(n < 1 for n in self.values.shape):
            raise InvalidSpecError(f"all dims must be >= 1, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidSpecError("dataset contains non-finite values")
        if len(self.species_names) != self.values.shape[0]:
            raise InvalidSpecError("species_names length must equal species count")
        # Per-species range cache, used for normalization and NRMSE targets.
        self._mins = self.values.min(axis=(1, 2, 3))
        self._maxs = self.values.max(axis=(1, 2, 3))

    @property
    def species_count(self) -> int:
        return self.values.shape[0]

    @property
    def timesteps(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    def species_range(self, s: int) -> tuple[float, float]:
        return float(self._mins[s]), float(self._maxs[s])

    def raw_nbytes(self) -> int:
        """On-disk size of the primary data at its 32-bit storage precision."""
        return int(self.values.size) * 4


@dataclass(frozen=True)
class BlockGeometry:
    """Spatiotemporal tile: K timesteps by N1 x N2 cells."""

    K: int
    N1: int
    N2: int
    remainder_policy: str = "drop"  # "drop" | "pad-replicate"

    def __post_init__(self):
        if min(self.K, self.N1, self.N2) < 1:
            raise InvalidGeometryError(f"block dims must be >= 1, got {self}")
        if self.remainder_policy not in ("drop", "pad-replicate"):
            raise InvalidGeometryError(f"unknown remainder policy {self.remainder_policy!r}")

    @property
    def patch_dim(self) -> int:
        """Vectorized per-species patch length D = K*N1*N2."""
        return self.K * self.N1 * self.N2

    def validate_for(self, dataset: FieldDataset) -> None:
        if self.K > dataset.timesteps or self.N1 > dataset.height or self.N2 > dataset.width:
            raise InvalidGeometryError(
                f"geometry ({self.K},{self.N1},{self.N2}) exceeds dataset dims "
                f"(T={dataset.timesteps}, H={dataset.height}, W={dataset.width})"
            )

    def grid_shape(self, T: int, H: int, W: int) -> tuple[int, int, int]:
        """Number of blocks along (t, row, col) under this remainder policy."""
        if self.remainder_policy == "drop":
            return T // self.K, H // self.N1, W // self.N2
        return -(-T // self.K), -(-H // self.N1), -(-W // self.N2)


@dataclass
class BlockInstance:
    """One spatiotemporal block spanning all species: values (S, K, N1, N2)."""

    block_index: tuple[int, int, int]
    values: np.ndarray

    def species_vector(self, s: int) -> np.ndarray:
        """Vectorize species s of the block to a length-D vector (C order)."""
        return self.values[s].ravel()


DEFAULT_GEOMETRY = BlockGeometry(K=5, N1=4, N2=4)


def _pad_to_multiple(values: np.ndarray, geom: BlockGeometry) -> np.ndarray:
    _, T, H, W = values.shape
    tb, hb, wb = geom.grid_shape(T, H, W)
    pad = ((0, 0), (0, tb * geom.K - T), (0, hb * geom.N1 - H), (0, wb * geom.N2 - W))
    if any(p[1] for p in pad):
        values = np.pad(values, pad, mode="edge")
    return values


def partition(dataset: FieldDataset, geom: BlockGeometry) -> list[BlockInstance]:
    """Split the dataset into non-overlapping blocks.

    Iteration order is row-major over (t-block, row-block, col-block); under
    the drop policy, trailing remainders in any dimension are discarded.
    """
    geom.validate_for(dataset)
    values = dataset.values
    if geom.remainder_policy == "pad-replicate":
        values = _pad_to_multiple(values, geom)
    S = values.shape[0]
    tb, hb, wb = geom.grid_shape(dataset.timesteps, dataset.height, dataset.width)
    blocks = []
    for bt in range(tb):
        for bi in range(hb):
            for bj in range(wb):
                chunk = values[
                    :,
                    bt * geom.K:(bt + 1) * geom.K,
                    bi * geom.N1:(bi + 1) * geom.N1,
                    bj * geom.N2:(bj + 1) * geom.N2,
                ]
                blocks.append(BlockInstance((bt, bi, bj), chunk.copy()))
    return blocks


def block_array(blocks: list[BlockInstance]) -> np.ndarray:
    """Stack block values into a (B, S, K, N1, N2) array in list order."""
    return np.stack([b.values for b in blocks], axis=0)


def blocks_from_array(arr: np.ndarray, index_order: list[tuple[int, int, int]]) -> list[BlockInstance]:
    return [BlockInstance(idx, arr[i]) for i, idx in enumerate(index_order)]


def reassemble(
    blocks: list[BlockInstance],
    geom: BlockGeometry,
    shape: tuple[int, int, int, int],
    species_names: list[str],
) -> FieldDataset:
    """Inverse of :func:`partition` on the tiled region.

    Under the drop policy any uncovered remainder is filled by replicating
    the nearest covered frame/row/col and flagged in the dataset metadata.
    """
    S, T, H, W = shape
    tb, hb, wb = geom.grid_shape(T, H, W)
    expected = {(bt, bi, bj) for bt in range(tb) for bi in range(hb) for bj in range(wb)}
    seen = set()
    for b in blocks:
        if b.block_index in seen:
            raise CoverageError(f"duplicate block index {b.block_index}")
        seen.add(b.block_index)
    if seen != expected:
        missing = sorted(expected - seen)[:3]
        extra = sorted(seen - expected)[:3]
        raise CoverageError(f"bad block coverage: missing={missing} extra={extra}")

    full = np.zeros((S, tb * geom.K, hb * geom.N1, wb * geom.N2), dtype=np.float64)
    for b in blocks:
        bt, bi, bj = b.block_index
        full[
            :,
            bt * geom.K:(bt + 1) * geom.K,
            bi * geom.N1:(bi + 1) * geom.N1,
            bj * geom.N2:(bj + 1) * geom.N2,
        ] = b.values

    meta: dict = {}
    if geom.remainder_policy == "pad-replicate":
        full = full[:, :T, :H, :W]
    else:
        covered = full.shape[1:]
        if covered != (T, H, W):
            pad = ((0, 0), (0, T - covered[0]), (0, H - covered[1]), (0, W - covered[2]))
            full = np.pad(full, pad, mode="edge")
            meta["remainder_filled"] = True
    return FieldDataset(full, list(species_names), meta)


# ---------------------------------------------------------------------------
# Synthetic CFD-like data
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Recipe for synthetic multi-species fields.

    ``mode="smooth"`` builds drifting Gaussian kernels into one or more base
    fields; species couple to the first base field as
    ``scale_s * (exp(alpha_s * base) - 1)`` so their magnitudes grow or decay
    exponentially with the underlying field, plus optional linear mixing of
    the remaining base fields.

    ``mode="block-rank"`` builds fields whose per-species block matrix has
    numerical rank <= ``rank`` for the given geometry: each base field is a
    smooth per-block amplitude times a fixed intra-block pattern, and species
    are linear mixtures of the base fields.
    """

    species: int
    timesteps: int
    height: int
    width: int
    mode: str = "smooth"
    kernels: int = 6
    base_fields: int = 1
    drift: float = 1.5           # cells per timestep, kernel center speed scale
    amp_exponents: tuple[float, ...] | None = None  # alpha_s; drawn if None
    rank: int = 2                # block-rank mode only
    geometry: BlockGeometry = DEFAULT_GEOMETRY  # block-rank mode only

    def __post_init__(self):
        if min(self.species, self.timesteps, self.height, self.width) < 1:
            raise InvalidSpecError("all dataset dims must be positive")
        if self.mode not in ("smooth", "block-rank"):
            raise InvalidSpecError(f"unknown synthesis mode {self.mode!r}")
        if self.kernels < 0:
            raise InvalidSpecError("kernel count must be >= 0")
        if self.mode == "block-rank" and self.rank < 1:
            raise InvalidSpecError("rank must be >= 1")


def _gaussian_base_field(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Sum of drifting Gaussian bumps, shaped (T, H, W), roughly in [0, 1]."""
    T, H, W = spec.timesteps, spec.height, spec.width
    base = np.zeros((T, H, W))
    if spec.kernels == 0:
        return base
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    centers = rng.uniform([0, 0], [H, W], size=(spec.kernels, 2))
    sigmas = rng.uniform(0.06, 0.22, size=spec.kernels) * min(H, W)
    amps = rng.uniform(0.4, 1.0, size=spec.kernels)
    vels = rng.uniform(-1.0, 1.0, size=(spec.kernels, 2)) * spec.drift
    phases = rng.uniform(0, 2 * np.pi, size=spec.kernels)
    for t in range(T):
        frame = np.zeros((H, W))
        for k in range(spec.kernels):
            ci = centers[k, 0] + vels[k, 0] * t
            cj = centers[k, 1] + vels[k, 1] * t
            a = amps[k] * (0.75 + 0.25 * np.sin(phases[k] + 2 * np.pi * t / max(T, 2)))
            frame += a * np.exp(-(((ii - ci) ** 2) + ((jj - cj) ** 2)) / (2 * sigmas[k] ** 2))
        base[t] = frame
    peak = np.abs(base).max()
    if peak > 0:
        base /= peak
    return base


def _synth_smooth(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    S = spec.species
    bases = [_gaussian_base_field(spec, rng) for _ in range(max(spec.base_fields, 1))]
    if spec.amp_exponents is not None:
        if len(spec.amp_exponents) != S:
            raise InvalidSpecError("amp_exponents length must equal species count")
        alphas = np.asarray(spec.amp_exponents, dtype=np.float64)
    else:
        alphas = rng.uniform(-2.5, 2.5, size=S)
        alphas[np.abs(alphas) < 0.3] = 0.8  # keep every species coupled
    scales = rng.uniform(0.5, 2.0, size=S)
    values = np.empty((S, spec.timesteps, spec.height, spec.width))
    for s in range(S):
        values[s] = scales[s] * (np.exp(alphas[s] * bases[0]) - 1.0)
        for extra in bases[1:]:
            values[s] += rng.uniform(-0.3, 0.3) * extra
    return values


def _synth_block_rank(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    geom = spec.geometry
    T, H, W = spec.timesteps, spec.height, spec.width
    if T % geom.K or H % geom.N1 or W % geom.N2:
        raise InvalidSpecError("block-rank synthesis needs dims divisible by the geometry")
    tb, hb, wb = T // geom.K, H // geom.N1, W // geom.N2
    amp_spec = SynthSpec(1, tb, hb, wb, kernels=max(spec.kernels, 1), drift=0.5)
    values = np.zeros((spec.species, T, H, W))
    mix = rng.uniform(-1.0, 1.0, size=(spec.species, spec.rank))
    for r in range(spec.rank):
        amp = _gaussian_base_field(amp_spec, rng) + 0.2       # (tb, hb, wb)
        pattern = rng.uniform(0.3, 1.0, size=(geom.K, geom.N1, geom.N2))
        base = np.einsum("abc,kmn->akbmcn", amp, pattern).reshape(T, H, W)
        values += mix[:, r, None, None, None] * base[None]
    return values


def synthesize(spec: SynthSpec, seed: int) -> FieldDataset:
    """Deterministically generate a dataset from a synthesis spec and seed."""
    rng = np.random.default_rng(seed)
    if spec.mode == "smooth":
        values = _synth_smooth(spec, rng)
    else:
        values = _synth_block_rank(spec, rng)
    names = [f"s{idx:02d}" for idx in range(spec.species)]
    return FieldDataset(values, names, meta={"synth_mode": spec.mode, "seed": seed})


# ---------------------------------------------------------------------------
# Raw field I/O: flat little-endian f32 + text sidecar
# ---------------------------------------------------------------------------

SIDECAR_SUFFIX = ".meta"


def write_raw(dataset: FieldDataset, path: str | Path) -> None:
    """Write values as flat little-endian float32 plus a ``.meta`` sidecar."""
    path = Path(path)
    data = dataset.values.astype("<f4").tobytes()
    path.write_bytes(data)
    names = dataset.species_names
    if any("," in n or "\n" in n for n in names):
        raise InvalidSpecError("species names may not contain commas or newlines")
    sidecar = (
        f"species_count: {dataset.species_count}\n"
        f"timesteps: {dataset.timesteps}\n"
        f"height: {dataset.height}\n"
        f"width: {dataset.width}\n"
        f"species_names: {','.join(names)}\n"
    )
    Path(str(path) + SIDECAR_SUFFIX).write_text(sidecar)


def read_raw(path: str | Path) -> FieldDataset:
    """Read a dataset written by :func:`write_raw`."""
    path = Path(path)
    sidecar = Path(str(path) + SIDECAR_SUFFIX)
    if not sidecar.exists():
        raise InvalidSpecError(f"missing sidecar header {sidecar}")
    fields: dict[str, str] = {}
    for line in sidecar.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition(":")
            fields[key.strip()] = value.strip()
    try:
        S = int(fields["species_count"])
        T = int(fields["timesteps"])
        H = int(fields["height"])
        W = int(fields["width"])
        names = fields["species_names"].split(",")
    except KeyError as exc:
        raise InvalidSpecError(f"sidecar missing field {exc}") from None
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != S * T * H * W:
        raise InvalidSpecError(
            f"data file holds {raw.size} scalars, header implies {S * T * H * W}"
        )
    values = raw.astype(np.float64).reshape(S, T, H, W)
    return FieldDataset(values, names)

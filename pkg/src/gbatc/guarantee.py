"""Hard l2 error bounds on top of any predictor.

Per species, a PCA basis is fitted to the prediction residuals (about zero,
no mean removal). Per block, a greedy loop projects the residual onto that
basis and keeps adding the largest-magnitude quantized coefficients until the
corrected reconstruction lands within tau of the original. The decompressor
replays the correction from the stored coefficient bins alone.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .codec import dequantize, quantize
from .errors import (ConfigError, CorruptArchiveError, GuaranteeError,
                     InvalidSpecError, ShapeError)

SCHEDULES = ("paper", "fast")

_SIGN_TOL = 1e-12
_ORTHO_TOL = 1e-4  # loose enough to accept f32 round-tripped bases


def principal_axes(rows: np.ndarray, center: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigendecomposition of the second-moment matrix of `rows`.

    Returns (mean, axes, eigenvalues) with eigenvalues descending and a
    deterministic sign convention: the first entry of each axis larger than
    1e-12 in magnitude is made positive.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise ShapeError(f"need a (n, d) sample matrix, got {rows.shape}")
    mean = rows.mean(axis=0) if center else np.zeros(rows.shape[1])
    x = rows - mean
    moment = (x.T @ x) / rows.shape[0]
    evals, evecs = np.linalg.eigh(moment)
    evals = evals[::-1].copy()
    evecs = evecs[:, ::-1].copy()
    for col in range(evecs.shape[1]):
        nz = np.flatnonzero(np.abs(evecs[:, col]) > _SIGN_TOL)
        if nz.size and evecs[nz[0], col] < 0:
            evecs[:, col] = -evecs[:, col]
    return mean, evecs, evals


@dataclass
class ResidualBasis:
    """Per-species residual basis: columns are eigenvectors of the residual
    second moment, sorted by descending eigenvalue."""

    species: int
    matrix: np.ndarray
    eigenvalues: np.ndarray | None = None
    degenerate: bool = False

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise ShapeError(f"basis must be square, got {self.matrix.shape}")
        gram_err = np.abs(self.matrix.T @ self.matrix - np.eye(self.dim)).max()
        if gram_err > _ORTHO_TOL:
            raise InvalidSpecError(f"basis columns not orthonormal (err {gram_err:.2e})")
        if self.eigenvalues is not None:
            self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64)
            if self.eigenvalues.shape != (self.dim,):
                raise ShapeError("eigenvalue count must equal basis dimension")
            if np.any(np.diff(self.eigenvalues) > 1e-9):
                raise InvalidSpecError("eigenvalues must be non-increasing")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def fit_residual_basis(residuals: np.ndarray, species: int) -> ResidualBasis:
    """PCA of raw residual vectors about zero (no mean subtraction).

    All-zero residuals are degenerate (no directions to rank); the identity
    basis is returned and flagged.
    """
    residuals = np.asarray(residuals, dtype=np.float64)
    if residuals.ndim != 2 or residuals.shape[0] < 1:
        raise ShapeError(f"need (B, D) residuals, got {residuals.shape}")
    d = residuals.shape[1]
    if not np.any(residuals):
        return ResidualBasis(species, np.eye(d), np.zeros(d), degenerate=True)
    _, axes, evals = principal_axes(residuals, center=False)
    return ResidualBasis(species, axes, np.maximum(evals, 0.0))


# ---------------------------------------------------------------------------
# Error-bound specification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ErrorBoundSpec:
    """Per-block l2 bound: either absolute tau, or derived from a global
    NRMSE target as tau_s = eps * range_s * sqrt(D) (a sufficient, slightly
    conservative blockwise condition for species NRMSE <= eps)."""

    mode: str
    value: float

    def __post_init__(self):
        if self.mode not in ("absolute", "nrmse"):
            raise InvalidSpecError(f"unknown bound mode {self.mode!r}")
        if not np.isfinite(self.value) or self.value <= 0:
            raise InvalidSpecError(f"bound value must be positive, got {self.value}")

    def tau_for(self, species_range: float, patch_dim: int) -> float:
        if self.mode == "absolute":
            return self.value
        # A constant species reconstructs exactly after denormalization;
        # any positive tau works, so fall back to unit range.
        rng = species_range if species_range > 0 else 1.0
        return self.value * rng * float(np.sqrt(patch_dim))

    def to_dict(self) -> dict:
        return {"mode": self.mode, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorBoundSpec":
        return cls(d["mode"], float(d["value"]))


def default_bin_size(tau: float, patch_dim: int) -> float:
    """Coefficient bin size tau/(2 sqrt(D)): guarantees the full-coefficient
    fallback is pure quantization noise <= tau/2, so the loop terminates."""
    return tau / (2.0 * float(np.sqrt(patch_dim)))


# ---------------------------------------------------------------------------
# Correction records
# ---------------------------------------------------------------------------

@dataclass
class CorrectionRecord:
    """Quantized residual coefficients for one (block, species) pair.

    `indices` and `bins` are ordered by descending |coefficient| (ties: lower
    index first), mirroring the greedy selection order. Empty when the
    uncorrected residual already satisfied tau.
    """

    species: int
    indices: np.ndarray
    bins: np.ndarray
    d_c: float
    block_id: int = -1

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.bins = np.asarray(self.bins, dtype=np.int64)
        if self.indices.shape != self.bins.shape or self.indices.ndim != 1:
            raise ShapeError("indices and bins must be matching 1-d arrays")
        if self.indices.size and (self.indices.min() < 0
                                  or np.unique(self.indices).size != self.indices.size):
            raise InvalidSpecError("basis indices must be unique and non-negative")
        if self.d_c <= 0:
            raise InvalidSpecError("coefficient bin size must be positive")

    @property
    def coefficients(self) -> np.ndarray:
        return dequantize(self.bins, self.d_c)

    @property
    def is_empty(self) -> bool:
        return self.indices.size == 0

    @property
    def m(self) -> int:
        return int(self.indices.size)


def apply_correction(xR: np.ndarray, basis: ResidualBasis, record: CorrectionRecord) -> np.ndarray:
    """x^G = x^R + U_I c_q. The decompression-side counterpart of
    correct_block; both sides sum selected columns in ascending index order,
    so the result is bit-identical between them."""
    if record.is_empty:
        return np.array(xR, dtype=np.float64, copy=True)
    idx = record.indices
    if idx.max() >= basis.dim:
        raise CorruptArchiveError(
            f"record references basis column {int(idx.max())} of {basis.dim}"
        )
    order = np.argsort(idx, kind="stable")
    vals = dequantize(record.bins[order], record.d_c)
    return xR + basis.matrix[:, idx[order]] @ vals


# ---------------------------------------------------------------------------
# The greedy bounding loop
# ---------------------------------------------------------------------------

def correct_block(x: np.ndarray, xR: np.ndarray, basis: ResidualBasis, tau: float,
                  d_c: float | None = None, schedule: str = "paper",
                  species: int | None = None, block_id: int = -1,
                  ) -> tuple[np.ndarray, CorrectionRecord]:
    """Force ||x - x^G||_2 <= tau by storing quantized residual coefficients.

    Coefficients c = U^T (x - x^R) are ranked by c^2 (descending, ties to the
    lower index); the top M are quantized with bin size d_c and applied, M
    growing until the bound holds. Every M is evaluated fresh, exactly as the
    increment-by-one loop would. The "fast" schedule (doubling then binary
    search) finds the same M whenever delta(M) is monotone, which exact
    arithmetic guarantees and quantization can only disturb marginally.
    """
    x = np.asarray(x, dtype=np.float64)
    xR = np.asarray(xR, dtype=np.float64)
    d = basis.dim
    if x.shape != (d,) or xR.shape != (d,):
        raise ShapeError(f"expected length-{d} vectors, got {x.shape} and {xR.shape}")
    if not np.isfinite(tau) or tau <= 0:
        raise InvalidSpecError(f"tau must be positive, got {tau}")
    if schedule not in SCHEDULES:
        raise InvalidSpecError(f"unknown schedule {schedule!r}")
    if d_c is None:
        d_c = default_bin_size(tau, d)
    if d_c > tau / np.sqrt(d):
        raise ConfigError(
            f"bin size {d_c:.3e} > tau/sqrt(D) = {tau / np.sqrt(d):.3e}: "
            "termination not guaranteed"
        )
    sp = basis.species if species is None else species

    empty = CorrectionRecord(sp, np.empty(0, np.int64), np.empty(0, np.int64), d_c, block_id)
    if float(np.linalg.norm(x - xR)) <= tau:
        return apply_correction(xR, basis, empty), empty

    c = basis.matrix.T @ (x - xR)
    order = np.argsort(-(c * c), kind="stable")

    # Same arithmetic as apply_correction (ascending-index summation), without
    # building a record per candidate M.
    def attempt(m: int) -> tuple[np.ndarray, float]:
        asc = np.sort(order[:m])
        xG = xR + basis.matrix[:, asc] @ dequantize(quantize(c[asc], d_c), d_c)
        return xG, float(np.linalg.norm(x - xG))

    def within(m: int) -> bool:
        return attempt(m)[1] <= tau

    m = _search_m(within, d, schedule)
    if m is None:
        raise GuaranteeError(
            f"block {block_id} species {sp}: bound {tau:.3e} unreachable at M={d}"
        )
    chosen = order[:m]
    rec = CorrectionRecord(sp, chosen, quantize(c[chosen], d_c), d_c, block_id)
    return attempt(m)[0], rec


def _search_m(within, d: int, schedule: str) -> int | None:
    if schedule == "paper":
        for m in range(1, d + 1):
            if within(m):
                return m
        return None
    lo, hi = 1, 1
    while not within(hi):
        if hi == d:
            return None
        lo = hi + 1
        hi = min(2 * hi, d)
    while lo < hi:
        mid = (lo + hi) // 2
        if within(mid):
            hi = mid
        else:
            lo = mid + 1
    return lo


# ---------------------------------------------------------------------------
# Basis serialization (little-endian f32, optionally truncated to the
# columns any record selected)
# ---------------------------------------------------------------------------

_FULL, _TRUNCATED = 0, 1


def serialize_basis(basis: ResidualBasis, keep: np.ndarray | None = None) -> bytes:
    """f32 bytes for the archive. With `keep` (sorted column ids), only those
    columns are stored; unreferenced columns decode as zeros."""
    head = struct.pack("<BH", _TRUNCATED if keep is not None else _FULL, basis.dim)
    flag = struct.pack("<B", int(basis.degenerate))
    if keep is None:
        return head + flag + np.ascontiguousarray(basis.matrix, dtype="<f4").tobytes()
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size and (keep.min() < 0 or keep.max() >= basis.dim):
        raise InvalidSpecError("kept column ids out of range")
    cols = np.ascontiguousarray(basis.matrix[:, keep], dtype="<f4")
    return (head + flag + struct.pack("<H", keep.size)
            + keep.astype("<u2").tobytes() + cols.tobytes())


def deserialize_basis(blob: bytes, species: int) -> ResidualBasis:
    try:
        mode, d = struct.unpack_from("<BH", blob, 0)
        (degenerate,) = struct.unpack_from("<B", blob, 3)
        offset = 4
        if mode == _FULL:
            count = d * d
            vals = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            if vals.size != count:
                raise CorruptArchiveError("basis blob truncated")
            matrix = vals.astype(np.float64).reshape(d, d)
        elif mode == _TRUNCATED:
            (ncols,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            keep = np.frombuffer(blob, dtype="<u2", count=ncols, offset=offset)
            offset += 2 * ncols
            vals = np.frombuffer(blob, dtype="<f4", count=d * ncols, offset=offset)
            if vals.size != d * ncols:
                raise CorruptArchiveError("basis blob truncated")
            matrix = np.zeros((d, d))
            matrix[:, keep.astype(np.int64)] = vals.astype(np.float64).reshape(d, ncols)
        else:
            raise CorruptArchiveError(f"unknown basis mode {mode}")
    except struct.error:
        raise CorruptArchiveError("basis blob truncated") from None
    return _basis_unchecked(species, matrix, bool(degenerate))


def _basis_unchecked(species: int, matrix: np.ndarray, degenerate: bool) -> ResidualBasis:
    # Truncated bases have zero columns, so skip the orthonormality check.
    basis = ResidualBasis.__new__(ResidualBasis)
    basis.species = species
    basis.matrix = matrix
    basis.eigenvalues = None
    basis.degenerate = degenerate
    return basis


def frozen_basis(basis: ResidualBasis, keep: np.ndarray | None = None) -> ResidualBasis:
    """Round-trip through f32 so compression verifies against the exact bytes
    the decompressor will read."""
    return deserialize_basis(serialize_basis(basis, keep), basis.species)

"""Fidelity evaluation.

NRMSE normalized by the original species range, per-frame PSNR and SSIM, an
Arrhenius-style pointwise QoI probe for error-propagation studies, and
per-timestep species statistics. Reports emit as line text and a plot-ready
CSV.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidSpecError, ShapeError
from .fields import FieldDataset

log = logging.getLogger("gbatc.metrics")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")


def nrmse(original: np.ndarray, reconstructed: np.ndarray) -> float:
    """RMSE over all entries divided by (max - min) of the original.

    Identical zero-range data scores 0; non-identical zero-range data is
    undefined and reported as NaN with a log diagnostic.
    """
    original = np.asarray(original, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    _check_pair(original, reconstructed)
    rng = float(original.max() - original.min())
    if rng == 0.0:
        if np.array_equal(original, reconstructed):
            return 0.0
        log.warning("nrmse undefined: original has zero range but data differ")
        return math.nan
    rmse = float(np.sqrt(np.mean((original - reconstructed) ** 2)))
    return rmse / rng


def psnr(original: np.ndarray, reconstructed: np.ndarray,
         data_range: float | None = None) -> float:
    """20 log10(range / RMSE) in dB; identical inputs give +inf."""
    original = np.asarray(original, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    _check_pair(original, reconstructed)
    rng = float(original.max() - original.min()) if data_range is None else float(data_range)
    rmse = float(np.sqrt(np.mean((original - reconstructed) ** 2)))
    if rmse == 0.0:
        return math.inf
    if rng == 0.0:
        log.warning("psnr undefined: zero range with nonzero error")
        return math.nan
    return 20.0 * math.log10(rng / rmse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(frame_a: np.ndarray, frame_b: np.ndarray, data_range: float | None = None,
         window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean local SSIM over Gaussian-weighted sliding windows (valid mode)."""
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    _check_pair(a, b)
    if a.ndim != 2:
        raise ShapeError(f"ssim expects 2-d frames, got {a.ndim}-d")
    if min(a.shape) < window:
        raise ShapeError(f"frame {a.shape} smaller than {window}x{window} window")
    rng = float(a.max() - a.min()) if data_range is None else float(data_range)
    if rng == 0.0:
        rng = 1.0
    c1 = (SSIM_K1 * rng) ** 2
    c2 = (SSIM_K2 * rng) ** 2
    w = _gaussian_window(window, sigma)
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = np.einsum("ijkl,kl->ij", wa, w)
    mu_b = np.einsum("ijkl,kl->ij", wb, w)
    e_aa = np.einsum("ijkl,kl->ij", wa * wa, w)
    e_bb = np.einsum("ijkl,kl->ij", wb * wb, w)
    e_ab = np.einsum("ijkl,kl->ij", wa * wb, w)
    var_a = e_aa - mu_a * mu_a
    var_b = e_bb - mu_b * mu_b
    cov = e_ab - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Arrhenius-style QoI probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QoiSpec:
    """rate_i = A_i * u^{b_i} * exp(-E_i/u) * prod_j x_j^{nu_ij}, with the
    temperature surrogate u = offset + scale * x[temp_channel]."""

    prefactors: tuple[float, ...]
    temp_exponents: tuple[float, ...]
    activations: tuple[float, ...]
    stoich: tuple[tuple[float, ...], ...]
    temp_channel: int = 0
    temp_offset: float = 1.0
    temp_scale: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        n = len(self.prefactors)
        if not (len(self.temp_exponents) == len(self.activations) == len(self.stoich) == n):
            raise InvalidSpecError("QoI parameter lists must share one length")
        flat = (list(self.prefactors) + list(self.temp_exponents) + list(self.activations)
                + [v for row in self.stoich for v in row]
                + [self.temp_offset, self.temp_scale])
        if not np.all(np.isfinite(flat)):
            raise InvalidSpecError("QoI parameters must be finite")

    @property
    def outputs(self) -> int:
        return len(self.prefactors)

    @property
    def species(self) -> int:
        return len(self.stoich[0]) if self.stoich else 0


def qoi_preset(name: str, species: int, temp_range: tuple[float, float]) -> QoiSpec:
    """Presets contrasting low and high activation energy.

    Channel 0 is read as a consumed-reactant proxy: the temperature surrogate
    u runs from 2 where the channel sits at its minimum (burnt, hot) down to
    1 at its maximum (unburnt, cold), the usual linear progress-variable map.
    "minor-like" uses a large activation energy so exp(-E/u) amplifies
    reconstruction errors near the hot end; "major-like" keeps the rate
    nearly proportional to the species value. Stoichiometric exponents stay
    integral, so legitimately negative field values never hit the
    fractional-power clamp.
    """
    lo, hi = temp_range
    spread = hi - lo
    scale = -1.0 / spread if spread > 0 else 0.0
    offset = 2.0 - lo * scale if spread > 0 else 1.5
    eye = tuple(tuple(1.0 if j == i else 0.0 for j in range(species)) for i in range(species))
    if name == "minor-like":
        return QoiSpec(
            prefactors=(1.0,) * species,
            temp_exponents=(1.0,) * species,
            activations=(8.0,) * species,
            stoich=eye,
            temp_offset=offset, temp_scale=scale, name=name,
        )
    if name == "major-like":
        return QoiSpec(
            prefactors=(1.0,) * species,
            temp_exponents=(0.0,) * species,
            activations=(0.3,) * species,
            stoich=eye,
            temp_offset=offset, temp_scale=scale, name=name,
        )
    raise InvalidSpecError(f"unknown QoI preset {name!r}")


def qoi_rates(values: np.ndarray, spec: QoiSpec) -> tuple[np.ndarray, int]:
    """Evaluate the rate law pointwise.

    `values` has species on the first axis; returns (rates, clamped) where
    rates has one output per spec entry on the first axis and `clamped` counts
    points where a negative base met a fractional exponent and the factor was
    clamped to zero.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim < 1 or values.shape[0] != spec.species:
        raise ShapeError(f"values first axis {values.shape} must be {spec.species} species")
    if not 0 <= spec.temp_channel < spec.species:
        raise InvalidSpecError(f"temperature channel {spec.temp_channel} out of range")
    u = spec.temp_offset + spec.temp_scale * values[spec.temp_channel]
    if np.any(u <= 0):
        raise InvalidSpecError("temperature surrogate must stay positive")
    clamped = 0
    rates = np.empty((spec.outputs,) + values.shape[1:])
    for i in range(spec.outputs):
        rate = spec.prefactors[i] * np.power(u, spec.temp_exponents[i])
        rate = rate * np.exp(-spec.activations[i] / u)
        for j, nu in enumerate(spec.stoich[i]):
            if nu == 0.0:
                continue
            base = values[j]
            if float(nu).is_integer():
                rate = rate * np.power(base, nu)
            else:
                neg = base < 0
                clamped += int(np.count_nonzero(neg))
                rate = rate * np.where(neg, 0.0, np.power(np.where(neg, 0.0, base), nu))
        rates[i] = rate
    if clamped:
        log.warning("qoi_rates clamped %d negative bases to zero", clamped)
    return rates, clamped


def qoi_nrmse(original: np.ndarray, reconstructed: np.ndarray, spec: QoiSpec,
              ) -> tuple[np.ndarray, int]:
    """Per-output NRMSE between rates on original and reconstructed data."""
    ra, ca = qoi_rates(original, spec)
    rb, cb = qoi_rates(reconstructed, spec)
    out = np.array([nrmse(ra[i], rb[i]) for i in range(spec.outputs)])
    return out, ca + cb


def species_statistics(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Spatial mean and (population) standard deviation per (species, timestep)."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 4:
        raise ShapeError(f"expected (S,T,H,W), got {values.shape}")
    return values.mean(axis=(2, 3)), values.std(axis=(2, 3))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class FidelityReport:
    species_names: list[str]
    nrmse_per_species: np.ndarray          # (S,)
    psnr_frames: np.ndarray                # (S, T)
    ssim_frames: np.ndarray                # (S, T)
    qoi_name: str | None = None
    qoi_nrmse_per_output: np.ndarray | None = None
    qoi_clamped: int = 0
    ssim_window: int = SSIM_WINDOW
    ssim_sigma: float = SSIM_SIGMA
    meta: dict = field(default_factory=dict)

    @property
    def mean_nrmse(self) -> float:
        return float(np.mean(self.nrmse_per_species))

    @property
    def mean_qoi_nrmse(self) -> float | None:
        if self.qoi_nrmse_per_output is None:
            return None
        return float(np.mean(self.qoi_nrmse_per_output))


def evaluate(original: FieldDataset, reconstructed: FieldDataset,
             qoi: QoiSpec | None = None) -> FidelityReport:
    """Full fidelity report. PSNR/SSIM are per frame, normalized by each
    species' global range in the original data."""
    if original.shape != reconstructed.shape:
        raise ShapeError(f"dataset shapes differ: {original.shape} vs {reconstructed.shape}")
    s, t = original.species_count, original.timesteps
    nr = np.empty(s)
    ps = np.empty((s, t))
    ss = np.empty((s, t))
    for i in range(s):
        a, b = original.values[i], reconstructed.values[i]
        nr[i] = nrmse(a, b)
        lo, hi = original.species_range(i)
        rng = hi - lo
        for j in range(t):
            ps[i, j] = psnr(a[j], b[j], data_range=rng)
            ss[i, j] = ssim(a[j], b[j], data_range=rng)
    report = FidelityReport(list(original.species_names), nr, ps, ss)
    if qoi is not None:
        q, clamped = qoi_nrmse(original.values, reconstructed.values, qoi)
        report.qoi_name = qoi.name
        report.qoi_nrmse_per_output = q
        report.qoi_clamped = clamped
    return report


def report_lines(report: FidelityReport) -> list[str]:
    lines = []
    for i, name in enumerate(report.species_names):
        lines.append(f"species={name} nrmse={report.nrmse_per_species[i]:.6e} "
                     f"psnr_mean={np.mean(report.psnr_frames[i]):.3f} "
                     f"ssim_mean={np.mean(report.ssim_frames[i]):.6f}")
    lines.append(f"mean_nrmse={report.mean_nrmse:.6e}")
    if report.qoi_nrmse_per_output is not None:
        for i, v in enumerate(report.qoi_nrmse_per_output):
            lines.append(f"qoi={report.qoi_name} output={i} nrmse={v:.6e}")
        lines.append(f"mean_qoi_nrmse={report.mean_qoi_nrmse:.6e} "
                     f"clamped={report.qoi_clamped}")
    lines.append(f"ssim_params window={report.ssim_window} sigma={report.ssim_sigma} "
                 f"k1={SSIM_K1} k2={SSIM_K2}")
    return lines


def report_csv(report: FidelityReport) -> str:
    """Plot-ready CSV with columns species,metric,value,timestep."""
    rows = ["species,metric,value,timestep"]
    for i, name in enumerate(report.species_names):
        rows.append(f"{name},nrmse,{report.nrmse_per_species[i]:.10e},")
        for j in range(report.psnr_frames.shape[1]):
            rows.append(f"{name},psnr,{report.psnr_frames[i, j]:.10e},{j}")
            rows.append(f"{name},ssim,{report.ssim_frames[i, j]:.10e},{j}")
    if report.qoi_nrmse_per_output is not None:
        for i, v in enumerate(report.qoi_nrmse_per_output):
            rows.append(f"qoi_{i},qoi_nrmse,{v:.10e},")
    return "\n".join(rows) + "\n"

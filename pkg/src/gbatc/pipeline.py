"""End-to-end compression pipeline.

compress: partition, normalize per species, predict, quantize and entropy-code
latents, fit per-species residual bases, bound every block's l2 error with
quantized residual coefficients, assemble the archive, and verify the bound
against the archive's own bytes before returning.

decompress replays the decode path from the archive alone. Both sides share
one block-decoding routine, so reconstruction is bit-exact between the
compress-time verification and a later decompression in the same environment.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import archive as arc
from . import codec
from .errors import (CorruptArchiveError, GuaranteeError, InvalidSpecError,
                     ShapeError)
from .fields import BlockGeometry, DEFAULT_GEOMETRY, FieldDataset, partition, \
    block_array, blocks_from_array, reassemble
from .guarantee import (CorrectionRecord, ErrorBoundSpec, ResidualBasis,
                        apply_correction, correct_block, default_bin_size,
                        deserialize_basis, fit_residual_basis, frozen_basis,
                        serialize_basis)
from .predictors import (CorrectionNetSpec, GBATCPredictor, Predictor,
                         TrainConfig, ZeroPredictor, ae_train,
                         correction_train, deserialize_predictor,
                         fit_pca_predictor, pointwise_pairs,
                         serialize_predictor, DEFAULT_LATENT)

DEFAULT_LATENT_BINS = 4096


def parse_predictor_spec(text: str) -> tuple[str, int | None]:
    """"zero" | "pca:R" | "gba" | "gbatc" -> (kind, rank-or-None)."""
    if text == "zero":
        return "zero", None
    if text in ("gba", "gbatc"):
        return text, None
    if text.startswith("pca:"):
        try:
            rank = int(text.split(":", 1)[1])
        except ValueError:
            raise InvalidSpecError(f"bad PCA rank in predictor spec {text!r}") from None
        if rank < 0:
            raise InvalidSpecError(f"PCA rank must be >= 0, got {rank}")
        return "pca", rank
    raise InvalidSpecError(f"unknown predictor spec {text!r}")


@dataclass(frozen=True)
class CompressConfig:
    predictor: str = "pca:8"
    geometry: BlockGeometry = DEFAULT_GEOMETRY
    bound: ErrorBoundSpec = ErrorBoundSpec("nrmse", 1e-3)
    latent: int = DEFAULT_LATENT
    latent_bins: int = DEFAULT_LATENT_BINS
    seed: int = 0
    schedule: str = "paper"
    workers: int = 1
    train: TrainConfig = TrainConfig()
    correction_epochs: int = 30
    truncate_bases: bool = False

    def __post_init__(self):
        parse_predictor_spec(self.predictor)
        if self.latent_bins < 1:
            raise InvalidSpecError("latent_bins must be >= 1")
        if self.workers < 1:
            raise InvalidSpecError("workers must be >= 1")
        if self.schedule not in ("paper", "fast"):
            raise InvalidSpecError(f"unknown schedule {self.schedule!r}")


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize_blocks(blocks: np.ndarray, mins: np.ndarray, maxs: np.ndarray) -> np.ndarray:
    """Min-max scale each species to [0,1]; constant species map to 0."""
    spans = maxs - mins
    safe = np.where(spans > 0, spans, 1.0)
    return (blocks - mins[None, :, None, None, None]) / safe[None, :, None, None, None]


def denormalize_blocks(blocks: np.ndarray, mins: np.ndarray, maxs: np.ndarray) -> np.ndarray:
    spans = maxs - mins
    safe = np.where(spans > 0, spans, 1.0)
    return blocks * safe[None, :, None, None, None] + mins[None, :, None, None, None]


# ---------------------------------------------------------------------------
# Predictor fitting
# ---------------------------------------------------------------------------

def fit_predictor(normalized_blocks: np.ndarray, config: CompressConfig,
                  ) -> tuple[Predictor, dict]:
    """Fit/train the configured predictor on normalized blocks and freeze it
    to its f32 stored form. Returns (frozen predictor, training info)."""
    kind, rank = parse_predictor_spec(config.predictor)
    species = normalized_blocks.shape[1]
    geometry = config.geometry
    info: dict = {"kind": kind}
    if kind == "zero":
        return ZeroPredictor(species, geometry), info
    if kind == "pca":
        pred = fit_pca_predictor(normalized_blocks, geometry, rank)
        return pred.frozen(), info
    train = replace(config.train, seed=config.seed)
    gba, history = ae_train(normalized_blocks, geometry, config.latent, train)
    info["ae"] = {"initial_mse": history["initial_mse"], "final_mse": history["final_mse"]}
    frozen_gba = gba.frozen()
    if kind == "gba":
        return frozen_gba, info
    # GBATC: train the pointwise correction on exactly what the decoder will
    # see, i.e. the frozen AE decoding quantized latents.
    latents = frozen_gba.encode(normalized_blocks)
    d_latent = _latent_bin_size(latents, config.latent_bins)
    recon = frozen_gba.decode(codec.dequantize(codec.quantize(latents, d_latent), d_latent))
    orig_pts, recon_pts = pointwise_pairs(normalized_blocks, recon)
    spec = CorrectionNetSpec.default_for(species)
    corr_cfg = TrainConfig(epochs=config.correction_epochs,
                           batch_size=4096, lr=1e-3, seed=config.seed)
    net, chist = correction_train(orig_pts, recon_pts, spec, corr_cfg)
    info["correction"] = {"baseline_mse": chist["baseline_mse"],
                          "final_mse": chist["final_mse"]}
    return GBATCPredictor(frozen_gba, net).frozen(), info


def _latent_bin_size(latents: np.ndarray, bins: int) -> float:
    if latents.size == 0:
        return 1.0
    span = float(latents.max() - latents.min())
    return span / bins if span > 0 else 1.0


# ---------------------------------------------------------------------------
# Section payloads
# ---------------------------------------------------------------------------

def _encode_latents(bins: np.ndarray) -> bytes:
    b, l = bins.shape
    head = struct.pack("<IH", b, l)
    if l == 0 or bins.size == 0:
        return head
    symbols, counts = np.unique(bins, return_counts=True)
    book = codec.huffman_build({int(s): int(c) for s, c in zip(symbols, counts)})
    stream = codec.encode_stream([int(v) for v in bins.ravel()], book)
    return head + book.serialize() + stream.to_bytes()


def _decode_latents(payload: bytes) -> np.ndarray:
    try:
        b, l = struct.unpack_from("<IH", payload, 0)
    except struct.error:
        raise CorruptArchiveError("latent section truncated", section="latents") from None
    if l == 0:
        return np.zeros((b, 0), dtype=np.int64)
    book, offset = codec.Codebook.deserialize(payload, 6)
    stream, _ = codec.BitStream.from_bytes(payload, offset)
    values = codec.decode_stream(stream, book, b * l)
    return np.asarray(values, dtype=np.int64).reshape(b, l)


def _encode_bases(bases: list[ResidualBasis], keep: list[np.ndarray] | None) -> bytes:
    out = [struct.pack("<H", len(bases))]
    for i, basis in enumerate(bases):
        blob = serialize_basis(basis, None if keep is None else keep[i])
        out.append(struct.pack("<I", len(blob)))
        out.append(blob)
    return b"".join(out)


def _decode_bases(payload: bytes) -> list[ResidualBasis]:
    try:
        (count,) = struct.unpack_from("<H", payload, 0)
        offset = 2
        bases = []
        for s in range(count):
            (size,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            bases.append(deserialize_basis(payload[offset:offset + size], s))
            offset += size
    except struct.error:
        raise CorruptArchiveError("basis section truncated", section="bases") from None
    return bases


def _encode_records(records: list[list[CorrectionRecord]], patch_dim: int) -> bytes:
    """Row-major (block, species) bitmaps, then one Huffman stream holding all
    coefficient bins in ascending-basis-index order within each record."""
    b = len(records)
    s = len(records[0]) if b else 0
    writer = codec.BitWriter()
    all_bins: list[int] = []
    for per_block in records:
        for rec in per_block:
            order = np.argsort(rec.indices, kind="stable")
            codec.encode_indices([int(i) for i in rec.indices[order]], patch_dim, writer)
            all_bins.extend(int(v) for v in rec.bins[order])
    bitmap = writer.finish()
    head = struct.pack("<IHI", b, s, len(all_bins))
    body = bitmap.to_bytes()
    if all_bins:
        symbols, counts = np.unique(np.asarray(all_bins, dtype=np.int64), return_counts=True)
        book = codec.huffman_build({int(x): int(c) for x, c in zip(symbols, counts)})
        body += book.serialize() + codec.encode_stream(all_bins, book).to_bytes()
    return head + body


def _decode_records(payload: bytes, d_c: list[float], patch_dim: int,
                    ) -> list[list[CorrectionRecord]]:
    try:
        b, s, total = struct.unpack_from("<IHI", payload, 0)
    except struct.error:
        raise CorruptArchiveError("record section truncated", section="records") from None
    offset = 10
    bitmap, offset = codec.BitStream.from_bytes(payload, offset)
    reader = codec.BitReader(bitmap)
    index_sets: list[list[int]] = []
    for _ in range(b * s):
        idx = codec.decode_indices(reader)
        if idx and idx[-1] >= patch_dim:
            raise CorruptArchiveError(
                f"record index {idx[-1]} exceeds patch dimension {patch_dim}",
                section="records",
            )
        index_sets.append(idx)
    declared = sum(len(ix) for ix in index_sets)
    if declared != total:
        raise CorruptArchiveError(
            f"record coefficient count {declared} != declared {total}", section="records"
        )
    if total:
        book, offset = codec.Codebook.deserialize(payload, offset)
        stream, _ = codec.BitStream.from_bytes(payload, offset)
        bins = codec.decode_stream(stream, book, total)
    else:
        bins = []
    records: list[list[CorrectionRecord]] = []
    pos = 0
    it = iter(index_sets)
    for block_id in range(b):
        row = []
        for sp in range(s):
            idx = next(it)
            vals = bins[pos:pos + len(idx)]
            pos += len(idx)
            row.append(CorrectionRecord(sp, np.asarray(idx, np.int64),
                                        np.asarray(vals, np.int64), d_c[sp], block_id))
        records.append(row)
    return records


# ---------------------------------------------------------------------------
# Compression
# ---------------------------------------------------------------------------

@dataclass
class CompressResult:
    archive: bytes
    header: dict
    report: arc.SizeReport
    stats: dict = field(default_factory=dict)


def compress(dataset: FieldDataset, config: CompressConfig,
             predictor: Predictor | None = None) -> CompressResult:
    """Compress a dataset. `predictor` may supply a pre-fitted (frozen)
    predictor, e.g. to reuse one training run across several bounds."""
    geometry = config.geometry
    geometry.validate_for(dataset)
    phys = block_array(partition(dataset, geometry))
    nb = phys.shape[0]
    species = dataset.species_count
    d = geometry.patch_dim

    mins = np.array([dataset.species_range(s)[0] for s in range(species)])
    maxs = np.array([dataset.species_range(s)[1] for s in range(species)])
    norm = normalize_blocks(phys, mins, maxs)

    info: dict
    if predictor is None:
        predictor, info = fit_predictor(norm, config)
    else:
        info = {"kind": predictor.kind, "prefitted": True}
        if predictor.species != species or predictor.geometry.patch_dim != d:
            raise ShapeError("pre-fitted predictor does not match dataset/geometry")

    latents = predictor.encode(norm)
    d_latent = _latent_bin_size(latents, config.latent_bins)
    latent_bins = codec.quantize(latents, d_latent)
    recon_norm = predictor.decode(codec.dequantize(latent_bins, d_latent))
    recon_phys = denormalize_blocks(recon_norm, mins, maxs)

    taus = [config.bound.tau_for(maxs[s] - mins[s], d) for s in range(species)]
    d_cs = [default_bin_size(t, d) for t in taus]

    resid = (phys - recon_phys).reshape(nb, species, d)
    bases = []
    for s in range(species):
        bases.append(frozen_basis(fit_residual_basis(resid[:, s, :], s)))

    x_vecs = phys.reshape(nb, species, d)
    r_vecs = recon_phys.reshape(nb, species, d)

    def correct_one(block_id: int) -> list[CorrectionRecord]:
        row = []
        for s in range(species):
            _, rec = correct_block(x_vecs[block_id, s], r_vecs[block_id, s], bases[s],
                                   taus[s], d_cs[s], config.schedule,
                                   species=s, block_id=block_id)
            row.append(rec)
        return row

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            records = list(pool.map(correct_one, range(nb)))
    else:
        records = [correct_one(i) for i in range(nb)]

    keep = None
    if config.truncate_bases:
        keep = []
        for s in range(species):
            used = sorted({int(i) for row in records for i in row[s].indices})
            keep.append(np.asarray(used, dtype=np.int64))

    header = {
        "species": species,
        "timesteps": dataset.timesteps,
        "height": dataset.height,
        "width": dataset.width,
        "species_names": list(dataset.species_names),
        "geometry": {"K": geometry.K, "N1": geometry.N1, "N2": geometry.N2,
                     "remainder_policy": geometry.remainder_policy},
        "predictor": config.predictor,
        "latent_length": int(predictor.latent_length),
        "d_latent": d_latent,
        "bound": config.bound.to_dict(),
        "tau": taus,
        "d_c": d_cs,
        "normalization": {"mins": mins.tolist(), "maxs": maxs.tolist()},
        "schedule": config.schedule,
        "seed": config.seed,
        "train": {"epochs": config.train.epochs, "batch_size": config.train.batch_size,
                  "lr": config.train.lr},
        "correction_epochs": config.correction_epochs,
        "truncated_bases": bool(config.truncate_bases),
        "latent_bins": config.latent_bins,
    }

    sections = {
        arc.SECTION_HEADER: arc.encode_header(header),
        arc.SECTION_PREDICTOR: serialize_predictor(predictor),
        arc.SECTION_LATENTS: _encode_latents(latent_bins),
        arc.SECTION_BASES: _encode_bases(bases, keep),
        arc.SECTION_RECORDS: _encode_records(records, d),
    }
    blob = arc.write_archive(sections)

    # Mandatory self-check: decode from the archive bytes just written and
    # re-measure every block against tau.
    decoded_header, corrected = _decode_blocks(arc.read_archive(blob))
    violations = _bound_violations(x_vecs, corrected.reshape(nb, species, d),
                                   decoded_header["tau"])
    if violations:
        b0, s0, delta = violations[0]
        raise GuaranteeError(
            f"verification against archive bytes failed at block {b0} species {s0}: "
            f"delta {delta:.3e} > tau {decoded_header['tau'][s0]:.3e} "
            f"({len(violations)} violations)"
        )

    nonempty = sum(1 for row in records for rec in row if not rec.is_empty)
    stats = {
        "blocks": nb,
        "records_nonempty": nonempty,
        "coefficients": int(sum(rec.m for row in records for rec in row)),
        "predictor_info": info,
        "mean_m": float(np.mean([rec.m for row in records for rec in row])),
    }
    report = arc.size_report(dataset.raw_nbytes(), sections)
    return CompressResult(blob, header, report, stats)


def _bound_violations(x_vecs: np.ndarray, g_vecs: np.ndarray, taus: list[float],
                      ) -> list[tuple[int, int, float]]:
    out = []
    nb, species, _ = x_vecs.shape
    for b in range(nb):
        for s in range(species):
            delta = float(np.linalg.norm(x_vecs[b, s] - g_vecs[b, s]))
            if delta > taus[s]:
                out.append((b, s, delta))
    return out


# ---------------------------------------------------------------------------
# Decompression
# ---------------------------------------------------------------------------

_REQUIRED_SECTIONS = (arc.SECTION_HEADER, arc.SECTION_PREDICTOR, arc.SECTION_LATENTS,
                      arc.SECTION_BASES, arc.SECTION_RECORDS)


def _decode_blocks(sections: dict[int, bytes]) -> tuple[dict, np.ndarray]:
    """Shared decode path: archive sections -> corrected physical blocks."""
    for sid in _REQUIRED_SECTIONS:
        if sid not in sections:
            raise CorruptArchiveError("required section missing",
                                      section=arc.SECTION_NAMES[sid])
    header = arc.decode_header(sections[arc.SECTION_HEADER])
    g = header["geometry"]
    geometry = BlockGeometry(g["K"], g["N1"], g["N2"], g["remainder_policy"])
    species = header["species"]
    d = geometry.patch_dim

    predictor = deserialize_predictor(sections[arc.SECTION_PREDICTOR])
    if predictor.species != species or predictor.geometry.patch_dim != d:
        raise CorruptArchiveError("predictor does not match header geometry",
                                  section="predictor")
    latent_bins = _decode_latents(sections[arc.SECTION_LATENTS])
    if latent_bins.shape[1] != predictor.latent_length:
        raise CorruptArchiveError("latent length mismatch", section="latents")
    tb, hb, wb = geometry.grid_shape(header["timesteps"], header["height"], header["width"])
    nb = tb * hb * wb
    if latent_bins.shape[0] != nb:
        raise CorruptArchiveError(
            f"latent count {latent_bins.shape[0]} != block count {nb}", section="latents"
        )

    latents = codec.dequantize(latent_bins, float(header["d_latent"]))
    recon_norm = predictor.decode(latents)
    mins = np.asarray(header["normalization"]["mins"], dtype=np.float64)
    maxs = np.asarray(header["normalization"]["maxs"], dtype=np.float64)
    recon_phys = denormalize_blocks(recon_norm, mins, maxs)

    bases = _decode_bases(sections[arc.SECTION_BASES])
    if len(bases) != species or any(basis.dim != d for basis in bases):
        raise CorruptArchiveError("basis table does not match header", section="bases")
    records = _decode_records(sections[arc.SECTION_RECORDS],
                              [float(v) for v in header["d_c"]], d)
    if len(records) != nb:
        raise CorruptArchiveError(
            f"record rows {len(records)} != block count {nb}", section="records"
        )

    r_vecs = recon_phys.reshape(nb, species, d)
    corrected = np.empty_like(r_vecs)
    for b in range(nb):
        for s in range(species):
            corrected[b, s] = apply_correction(r_vecs[b, s], bases[s], records[b][s])
    return header, corrected.reshape(recon_phys.shape)


def decompress(blob: bytes) -> tuple[FieldDataset, dict]:
    sections = arc.read_archive(blob)
    header, corrected = _decode_blocks(sections)
    g = header["geometry"]
    geometry = BlockGeometry(g["K"], g["N1"], g["N2"], g["remainder_policy"])
    tb, hb, wb = geometry.grid_shape(header["timesteps"], header["height"], header["width"])
    order = [(bt, bi, bj) for bt in range(tb) for bi in range(hb) for bj in range(wb)]
    blocks = blocks_from_array(corrected, order)
    shape = (header["species"], header["timesteps"], header["height"], header["width"])
    dataset = reassemble(blocks, geometry, shape, header["species_names"])
    dataset.meta["predictor"] = header["predictor"]
    dataset.meta["schedule"] = header["schedule"]
    return dataset, header


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------

@dataclass
class VerifyResult:
    ok: bool
    blocks_checked: int
    violations: list[tuple[int, int, float]]
    max_ratio: float            # worst delta / tau over all (block, species)

    def lines(self) -> list[str]:
        status = "PASS" if self.ok else "FAIL"
        out = [f"verify={status} blocks={self.blocks_checked} "
               f"violations={len(self.violations)} max_delta_over_tau={self.max_ratio:.6f}"]
        for b, s, delta in self.violations[:10]:
            out.append(f"violation block={b} species={s} delta={delta:.6e}")
        return out


def verify_bound(original: FieldDataset, reconstructed: FieldDataset,
                 header: dict) -> VerifyResult:
    """Re-measure the per-block l2 bound of a decompressed dataset against
    the original, using the tau values stamped in the archive header."""
    if original.shape != reconstructed.shape:
        raise ShapeError(f"shape mismatch {original.shape} vs {reconstructed.shape}")
    g = header["geometry"]
    geometry = BlockGeometry(g["K"], g["N1"], g["N2"], g["remainder_policy"])
    taus = [float(t) for t in header["tau"]]
    orig_blocks = block_array(partition(original, geometry))
    reco_blocks = block_array(partition(reconstructed, geometry))
    nb, species = orig_blocks.shape[0], orig_blocks.shape[1]
    d = geometry.patch_dim
    xv = orig_blocks.reshape(nb, species, d)
    gv = reco_blocks.reshape(nb, species, d)
    violations = []
    max_ratio = 0.0
    for b in range(nb):
        for s in range(species):
            delta = float(np.linalg.norm(xv[b, s] - gv[b, s]))
            max_ratio = max(max_ratio, delta / taus[s])
            if delta > taus[s]:
                violations.append((b, s, delta))
    return VerifyResult(not violations, nb * species, violations, max_ratio)

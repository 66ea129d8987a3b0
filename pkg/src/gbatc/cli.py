"""Command-line interface: synth, train, compress, decompress, verify, bench.

All outputs are written atomically (temp file + rename), so failures never
leave partial files. The GBATC_LOG environment variable sets the log level.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline
from .errors import GbatcError
from .fields import (BlockGeometry, DEFAULT_GEOMETRY, FieldDataset, SynthSpec,
                     block_array, partition, read_raw, synthesize, write_raw,
                     SIDECAR_SUFFIX)
from .guarantee import ErrorBoundSpec
from .metrics import evaluate, qoi_nrmse, qoi_preset, report_csv, report_lines
from .predictors import TrainConfig, deserialize_predictor, serialize_predictor


def _setup_logging() -> None:
    level = os.environ.get("GBATC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _geometry_arg(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"geometry must be K,N1,N2 not {text!r}")
    try:
        k, n1, n2 = (int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"geometry parts must be integers: {text!r}")
    return k, n1, n2


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = Path(f"{path}.tmp.{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = Path(f"{path}.tmp.{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_write_dataset(dataset: FieldDataset, path: Path) -> None:
    tmp = Path(f"{path}.tmp.{os.getpid()}")
    write_raw(dataset, tmp)
    os.replace(f"{tmp}{SIDECAR_SUFFIX}", f"{path}{SIDECAR_SUFFIX}")
    os.replace(tmp, path)


def _geometry_from(args) -> BlockGeometry:
    k, n1, n2 = args.geometry
    return BlockGeometry(k, n1, n2, args.remainder)


def _bound_from(args) -> ErrorBoundSpec:
    if args.nrmse is not None:
        return ErrorBoundSpec("nrmse", args.nrmse)
    return ErrorBoundSpec("absolute", args.tau)


def _compress_config(args, geometry: BlockGeometry) -> pipeline.CompressConfig:
    return pipeline.CompressConfig(
        predictor=args.predictor,
        geometry=geometry,
        bound=_bound_from(args),
        latent=args.latent,
        latent_bins=args.latent_bins,
        seed=args.seed,
        schedule=args.schedule,
        workers=args.workers,
        train=TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                          lr=args.lr, seed=args.seed),
        correction_epochs=args.correction_epochs,
        truncate_bases=args.truncate_bases,
    )


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    geometry = BlockGeometry(*args.geometry)
    spec = SynthSpec(
        species=args.species, timesteps=args.timesteps,
        height=args.height, width=args.width,
        mode=args.mode, kernels=args.kernels, base_fields=args.base_fields,
        rank=args.rank, geometry=geometry,
    )
    dataset = synthesize(spec, args.seed)
    _atomic_write_dataset(dataset, Path(args.output))
    print(f"wrote {args.output} shape={dataset.shape} mode={args.mode} seed={args.seed}")
    return 0


def cmd_train(args) -> int:
    dataset = read_raw(args.data)
    geometry = _geometry_from(args)
    geometry.validate_for(dataset)
    blocks = block_array(partition(dataset, geometry))
    mins = np.array([dataset.species_range(s)[0] for s in range(dataset.species_count)])
    maxs = np.array([dataset.species_range(s)[1] for s in range(dataset.species_count)])
    norm = pipeline.normalize_blocks(blocks, mins, maxs)
    config = pipeline.CompressConfig(
        predictor=args.predictor, geometry=geometry, latent=args.latent,
        seed=args.seed,
        train=TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                          lr=args.lr, seed=args.seed),
        correction_epochs=args.correction_epochs,
    )
    predictor, info = pipeline.fit_predictor(norm, config)
    blob = serialize_predictor(predictor)
    _atomic_write_bytes(Path(args.output), blob)
    print(f"wrote {args.output} kind={predictor.kind} bytes={len(blob)}")
    for key, value in info.items():
        if key != "kind":
            print(f"train {key}={value}")
    return 0


def _predictor_spec_of(predictor) -> str:
    if predictor.kind == "pca":
        return f"pca:{predictor.rank}"
    return predictor.kind


def cmd_compress(args) -> int:
    dataset = read_raw(args.data)
    geometry = _geometry_from(args)
    predictor = None
    if args.predictor_file:
        predictor = deserialize_predictor(Path(args.predictor_file).read_bytes())
        args.predictor = _predictor_spec_of(predictor)
    config = _compress_config(args, geometry)
    result = pipeline.compress(dataset, config, predictor=predictor)
    _atomic_write_bytes(Path(args.output), result.archive)
    print(f"wrote {args.output}")
    for line in result.report.lines():
        print(line)
    stats = result.stats
    print(f"blocks={stats['blocks']} records_nonempty={stats['records_nonempty']} "
          f"coefficients={stats['coefficients']} mean_m={stats['mean_m']:.3f}")
    print("guarantee=verified-against-archive-bytes")
    return 0


def cmd_decompress(args) -> int:
    blob = Path(args.archive).read_bytes()
    dataset, header = pipeline.decompress(blob)
    _atomic_write_dataset(dataset, Path(args.output))
    print(f"wrote {args.output} shape={dataset.shape} predictor={header['predictor']}")
    return 0


def cmd_verify(args) -> int:
    original = read_raw(args.data)
    blob = Path(args.archive).read_bytes()
    reconstructed, header = pipeline.decompress(blob)
    result = pipeline.verify_bound(original, reconstructed, header)
    for line in result.lines():
        print(line)
    report = evaluate(original, reconstructed)
    print(f"mean_nrmse={report.mean_nrmse:.6e}")
    return 0 if result.ok else 1


def cmd_bench(args) -> int:
    dataset = read_raw(args.data)
    geometry = _geometry_from(args)
    predictors = [p.strip() for p in args.predictors.split(",") if p.strip()]
    eps_values = [float(e) for e in args.nrmse_list.split(",")]
    qoi_names = [q.strip() for q in args.qoi.split(",")] if args.qoi else []
    temp_range = dataset.species_range(0)
    qoi_specs = [qoi_preset(name, dataset.species_count, temp_range) for name in qoi_names]

    mins = np.array([dataset.species_range(s)[0] for s in range(dataset.species_count)])
    maxs = np.array([dataset.species_range(s)[1] for s in range(dataset.species_count)])
    norm = pipeline.normalize_blocks(block_array(partition(dataset, geometry)), mins, maxs)

    cols = ["predictor", "epsilon", "mean_nrmse", "ratio"]
    cols += [f"qoi_{name}_nrmse" for name in qoi_names]
    cols.append("status")
    rows = [",".join(cols)]
    for pred_spec in predictors:
        base = pipeline.CompressConfig(
            predictor=pred_spec, geometry=geometry,
            bound=ErrorBoundSpec("nrmse", eps_values[0]),
            latent=args.latent, latent_bins=args.latent_bins, seed=args.seed,
            schedule=args.schedule, workers=args.workers,
            train=TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                              lr=args.lr, seed=args.seed),
            correction_epochs=args.correction_epochs,
        )
        try:
            frozen, _ = pipeline.fit_predictor(norm, base)
        except GbatcError as exc:
            for eps in eps_values:
                rows.append(f"{pred_spec},{eps:g}," + "," * (len(qoi_names) + 1)
                            + f"error:{exc.__class__.__name__}")
            continue
        for eps in eps_values:
            config = replace(base, bound=ErrorBoundSpec("nrmse", eps))
            try:
                result = pipeline.compress(dataset, config, predictor=frozen)
                recon, _header = pipeline.decompress(result.archive)
                report = evaluate(dataset, recon)
                cells = [pred_spec, f"{eps:g}", f"{report.mean_nrmse:.6e}",
                         f"{result.report.ratio:.4f}"]
                for spec in qoi_specs:
                    q, _ = qoi_nrmse(dataset.values, recon.values, spec)
                    cells.append(f"{float(np.mean(q)):.6e}")
                cells.append("ok")
                rows.append(",".join(cells))
            except GbatcError as exc:
                rows.append(f"{pred_spec},{eps:g}," + "," * (len(qoi_names) + 1)
                            + f"error:{exc.__class__.__name__}")
    text = "\n".join(rows) + "\n"
    if args.output:
        _atomic_write_text(Path(args.output), text)
        print(f"wrote {args.output} rows={len(rows) - 1}")
    else:
        print(text, end="")
    return 0


def cmd_metrics(args) -> int:
    original = read_raw(args.data)
    reconstructed = read_raw(args.reconstructed)
    qoi = None
    if args.qoi:
        qoi = qoi_preset(args.qoi, original.species_count, original.species_range(0))
    report = evaluate(original, reconstructed, qoi)
    for line in report_lines(report):
        print(line)
    if args.output:
        _atomic_write_text(Path(args.output), report_csv(report))
        print(f"wrote {args.output}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_geometry(p: argparse.ArgumentParser) -> None:
    p.add_argument("--geometry", type=_geometry_arg, default=(DEFAULT_GEOMETRY.K,
                   DEFAULT_GEOMETRY.N1, DEFAULT_GEOMETRY.N2),
                   help="block dims K,N1,N2 (default 5,4,4)")
    p.add_argument("--remainder", choices=("drop", "pad-replicate"), default="drop",
                   help="handling of dims not divisible by the geometry")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--latent", type=int, default=36, help="autoencoder latent size")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--correction-epochs", type=int, default=30)


def _add_compress_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--predictor", default="pca:8",
                   help="zero | pca:R | gba | gbatc")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--nrmse", type=float, help="target NRMSE per species")
    target.add_argument("--tau", type=float, help="absolute per-block l2 bound")
    p.add_argument("--latent-bins", type=int, default=pipeline.DEFAULT_LATENT_BINS,
                   help="latent quantizer bin count over the latent range")
    p.add_argument("--schedule", choices=("paper", "fast"), default="paper",
                   help="coefficient search schedule")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--truncate-bases", action="store_true",
                   help="store only basis columns referenced by some record")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gbatc",
        description="Error-bounded lossy compressor for multi-species field data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("output")
    p.add_argument("--species", type=int, default=4)
    p.add_argument("--timesteps", type=int, default=10)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--mode", choices=("smooth", "block-rank"), default="smooth")
    p.add_argument("--kernels", type=int, default=6)
    p.add_argument("--base-fields", type=int, default=1)
    p.add_argument("--rank", type=int, default=2, help="block-rank mode only")
    p.add_argument("--geometry", type=_geometry_arg, default=(5, 4, 4))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a predictor and store its parameter blob")
    p.add_argument("data")
    p.add_argument("output")
    p.add_argument("--predictor", default="gba")
    p.add_argument("--seed", type=int, default=0)
    _add_geometry(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="compress a dataset into an archive")
    p.add_argument("data")
    p.add_argument("output")
    p.add_argument("--predictor-file", help="reuse a trained predictor blob")
    p.add_argument("--seed", type=int, default=0)
    _add_geometry(p)
    _add_train_flags(p)
    _add_compress_flags(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="reconstruct a dataset from an archive")
    p.add_argument("archive")
    p.add_argument("output")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("verify", help="re-check the per-block bound of an archive")
    p.add_argument("data", help="original dataset")
    p.add_argument("archive")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="rate/distortion matrix over predictors and targets")
    p.add_argument("data")
    p.add_argument("--predictors", default="pca:8,gba,gbatc")
    p.add_argument("--nrmse-list", default="1e-2,1e-3",
                   help="comma-separated target NRMSE values")
    p.add_argument("--qoi", default="", help="comma-separated QoI preset names")
    p.add_argument("--output", help="CSV path (stdout when omitted)")
    p.add_argument("--seed", type=int, default=0)
    _add_geometry(p)
    _add_train_flags(p)
    p.add_argument("--latent-bins", type=int, default=pipeline.DEFAULT_LATENT_BINS)
    p.add_argument("--schedule", choices=("paper", "fast"), default="paper")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="fidelity report between two datasets")
    p.add_argument("data")
    p.add_argument("reconstructed")
    p.add_argument("--qoi", default="", help="QoI preset name")
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GbatcError as exc:
        print(f"error[{exc.__class__.__name__}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Error-bounded lossy compression for multi-species spatiotemporal fields.

The pipeline: partition into S x K x N1 x N2 blocks, predict each block with
a PCA baseline or a (corrected) convolutional autoencoder, then force every
block's l2 reconstruction error under a per-species bound by storing quantized
residual-PCA coefficients, all entropy-coded into a self-describing archive.
"""

__version__ = "0.1.0"

from .errors import GbatcError
from .fields import (BlockGeometry, DEFAULT_GEOMETRY, FieldDataset, SynthSpec,
                     partition, reassemble, read_raw, synthesize, write_raw)
from .guarantee import ErrorBoundSpec
from .metrics import FidelityReport, QoiSpec, evaluate, nrmse, psnr, qoi_preset, ssim
from .pipeline import (CompressConfig, CompressResult, compress, decompress,
                       verify_bound)
from .predictors import TrainConfig

__all__ = [
    "GbatcError", "BlockGeometry", "DEFAULT_GEOMETRY", "FieldDataset",
    "SynthSpec", "partition", "reassemble", "read_raw", "synthesize",
    "write_raw", "ErrorBoundSpec", "FidelityReport", "QoiSpec", "evaluate",
    "nrmse", "psnr", "qoi_preset", "ssim", "CompressConfig", "CompressResult",
    "compress", "decompress", "verify_bound", "TrainConfig", "__version__",
]

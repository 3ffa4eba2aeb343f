"""RGB to hyperspectral reconstruction with a frozen mixture of spectral codebooks."""

from .codebook import Codebook, init_codebook, mix_codebook_sets, mix_codebooks, quantize, select_topk
from .data import PairedSample, gamma_perturb, make_pairs, metrics, mrae, patch_shuffle, psnr, rmse, synth_hsi
from .errors import (
    ArgumentError,
    BadMagicError,
    ConfigurationError,
    DimensionError,
    DimensionOverflowError,
    DomainError,
    IngestionError,
    ParseError,
    TrainingError,
    TruncatedError,
    UnsupportedVersionError,
    UsageError,
)
from .formats import read_codebooks, read_cube, read_stage1, read_stage2, write_codebooks, write_cube, write_stage1, write_stage2
from .ganet import GanetConfig, Mcga, build_pipeline, predict, train_stage2
from .msvqvae import StageOneConfig, StageOneModel, train_stage1
from .tensor import Tensor
from .tta import TtaConfig, adapt

__version__ = "0.1.0"

"""Learned video-diffusion noise initialization at desk scale.

Tensor algebra and Tucker factorization, spectral noise recombination, an
iterative refinement oracle, the PND1 pair dataset, a small noise-prior
network with its own reverse-mode autodiff, and a training loop.
"""
from .kernels import BACKEND
from .pndata import (
    DatasetHeader,
    NoisePairRecord,
    PndChecksumError,
    PndError,
    dataset_stats,
    generate_pndata,
    read_dataset,
    write_dataset,
)
from .prompts import PromptEmbedding, embed_prompt
from .refine import RefineConfig, SyntheticDenoiser, refine_iterative, renoise
from .spectral import (
    fft3,
    freq_recombine,
    gaussian_lowpass_mask,
    ifft3,
    low_freq_energy_ratio,
    temporal_correlation,
)
from .tensor import fold, mode_product, sample_gaussian, svd, unfold
from .train import TrainConfig, grad_check, train, train_samples
from .tucker import TuckerFactorization, compression_ratio, hosvd, reconstruct
from .vnpnet import FilterVariant, GcrmConfig, VnpnetConfig, init_params, vnpnet_forward

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DatasetHeader",
    "FilterVariant",
    "GcrmConfig",
    "NoisePairRecord",
    "PndChecksumError",
    "PndError",
    "PromptEmbedding",
    "RefineConfig",
    "SyntheticDenoiser",
    "TrainConfig",
    "TuckerFactorization",
    "VnpnetConfig",
    "compression_ratio",
    "dataset_stats",
    "embed_prompt",
    "fft3",
    "fold",
    "freq_recombine",
    "gaussian_lowpass_mask",
    "generate_pndata",
    "grad_check",
    "hosvd",
    "ifft3",
    "init_params",
    "low_freq_energy_ratio",
    "mode_product",
    "read_dataset",
    "reconstruct",
    "refine_iterative",
    "renoise",
    "sample_gaussian",
    "svd",
    "temporal_correlation",
    "train",
    "train_samples",
    "unfold",
    "vnpnet_forward",
    "write_dataset",
]

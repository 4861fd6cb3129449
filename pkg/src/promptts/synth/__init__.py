"""Synthetic series generators."""

from .kernelsynth import KernelSpec, kernelsynth, random_kernel, sample_kernelsynth
from .mixup import MixupConfig, tsmixup
from .multivariate import MultivarSystem, build_multivariate

__all__ = [
    "KernelSpec",
    "MixupConfig",
    "MultivarSystem",
    "build_multivariate",
    "kernelsynth",
    "random_kernel",
    "sample_kernelsynth",
    "tsmixup",
]

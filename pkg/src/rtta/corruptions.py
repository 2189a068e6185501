"""Compound target-domain corruption: Gaussian noise -> Gaussian blur -> color jitter.

Images are channel-first float arrays in [0, 1]. Each stage draws from its
own generator derived from the image seed, so stages are reproducible on
their own and in composition.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels

# severity -> (noise sigma, blur kernel size, jitter strength)
SEVERITY_TABLE = {
    0: (0.0, 1, 0.0),
    1: (0.03, 3, 0.1),
    2: (0.06, 5, 0.2),
}
LUMA = np.array([0.299, 0.587, 0.114])
_NOISE, _JITTER = 0, 1


@dataclass(frozen=True)
class CorruptionSpec:
    severity: int
    noise_sigma: float
    blur_kernel: int
    jitter_strength: float
    hue: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.severity not in SEVERITY_TABLE:
            raise ValueError(f"severity must be 0, 1 or 2, got {self.severity}")
        if (self.noise_sigma, self.blur_kernel, self.jitter_strength) != SEVERITY_TABLE[self.severity]:
            raise ValueError(f"parameters do not match severity {self.severity}")
        if self.hue != 0:
            raise ValueError("hue jitter is fixed to 0")

    @classmethod
    def for_severity(cls, severity, seed=0):
        if severity not in SEVERITY_TABLE:
            raise ValueError(f"severity must be 0, 1 or 2, got {severity}")
        sigma, k, a = SEVERITY_TABLE[severity]
        return cls(severity, sigma, k, a, 0.0, seed)


def _stage_rng(seed, stage):
    return np.random.default_rng([int(seed), stage])


def sample_noise(shape, sigma, seed):
    """The additive noise field used by :func:`gaussian_noise` (before clamping)."""
    return _stage_rng(seed, _NOISE).normal(0.0, sigma, size=shape)


def gaussian_noise(x, sigma, seed):
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    return np.clip(x + sample_noise(x.shape, sigma, seed), 0.0, 1.0)


def blur_sigma(kernel_size):
    return 0.3 * ((kernel_size - 1) / 2 - 1) + 0.8


def gaussian_kernel1d(kernel_size):
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"blur kernel size must be odd and >= 1, got {kernel_size}")
    half = kernel_size // 2
    t = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / blur_sigma(kernel_size)) ** 2)
    return k / k.sum()


def gaussian_blur(x, kernel_size):
    """Separable normalized Gaussian blur per channel with reflect padding."""
    kern = gaussian_kernel1d(kernel_size)
    x = np.asarray(x, dtype=np.float64)
    if kernel_size == 1:
        return x.copy()
    half = kernel_size // 2
    xp = np.pad(x, ((0, 0), (half, half), (half, half)), mode="reflect")
    return kernels.blur_separable(np.ascontiguousarray(xp), kern)


def _luminance(x):
    if x.shape[0] == 3:
        return np.tensordot(LUMA, x, axes=1)
    return x.mean(axis=0)


def adjust_brightness(x, factor):
    return np.clip(x * factor, 0.0, 1.0)


def adjust_contrast(x, factor):
    pivot = _luminance(x).mean()
    return np.clip(factor * x + (1 - factor) * pivot, 0.0, 1.0)


def adjust_saturation(x, factor):
    gray = _luminance(x)[None]
    return np.clip(factor * x + (1 - factor) * gray, 0.0, 1.0)


def jitter_factors(strength, seed):
    """Brightness, contrast and saturation factors, drawn in that order."""
    if not 0 <= strength < 1:
        raise ValueError("jitter strength must lie in [0, 1)")
    return _stage_rng(seed, _JITTER).uniform(1 - strength, 1 + strength, size=3)


def color_jitter(x, strength, seed, factors=None):
    x = np.asarray(x, dtype=np.float64)
    if strength == 0 and factors is None:
        return x.copy()
    b, c, s = jitter_factors(strength, seed) if factors is None else factors
    return adjust_saturation(adjust_contrast(adjust_brightness(x, b), c), s)


def apply_corruption(x, spec):
    """jitter(blur(noise(x))) for one (C, H, W) image."""
    x = np.asarray(x, dtype=np.float64)
    if spec.severity == 0:
        return x.copy()
    out = gaussian_noise(x, spec.noise_sigma, spec.seed)
    out = gaussian_blur(out, spec.blur_kernel)
    return color_jitter(out, spec.jitter_strength, spec.seed)


def image_seed(seed, index):
    """Per-image seed derived from a dataset seed and the image position."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def corrupt_batch(images, severity, seed):
    return np.stack([
        apply_corruption(img, CorruptionSpec.for_severity(severity, image_seed(seed, i)))
        for i, img in enumerate(images)
    ]) if len(images) else np.asarray(images, dtype=np.float64).copy()

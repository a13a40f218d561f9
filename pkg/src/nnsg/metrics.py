"""Identity similarity, PSNR and SSIM."""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParseError, ValidationError
from .morphable import N_ID
from .protodb import cosine_similarity
from .validation import check_same_shape, check_vector


def id_similarity(alpha_a, alpha_b):
    """Cosine of two identity vectors."""
    return cosine_similarity(
        check_vector(alpha_a, N_ID, "alpha_a"), check_vector(alpha_b, N_ID, "alpha_b")
    )


def default_data_range(arr):
    """Integer images use their dtype span; float images are taken as [0, 1]."""
    arr = np.asarray(arr)
    if np.issubdtype(arr.dtype, np.integer):
        info = np.iinfo(arr.dtype)
        return float(info.max) - float(info.min)
    return 1.0


def psnr(a, b, max_value=None):
    """Peak signal-to-noise ratio in dB; identical images give ``inf``."""
    check_same_shape([a, b], ["a", "b"])
    if max_value is None:
        max_value = default_data_range(a)
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_value * max_value / mse)


@dataclass(frozen=True)
class SSIMConfig:
    win_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = None

    def __post_init__(self):
        if self.win_size < 1 or self.win_size % 2 == 0:
            raise ValidationError("SSIM window size must be a positive odd integer")
        if not self.sigma > 0:
            raise ValidationError("SSIM sigma must be positive")


def gaussian_window(win_size, sigma):
    r = (win_size - 1) // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _local_mean(img, kernel):
    """Gaussian-weighted mean over fully contained windows only."""
    out = ndimage.correlate1d(img, kernel, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, kernel, axis=1, mode="reflect")
    r = (kernel.size - 1) // 2
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_map(a, b, cfg=None):
    cfg = cfg if cfg is not None else SSIMConfig()
    check_same_shape([a, b], ["a", "b"])
    a_arr, b_arr = np.asarray(a), np.asarray(b)
    if a_arr.ndim != 2:
        raise ValidationError(f"SSIM expects grayscale 2-D images, got shape {a_arr.shape}")
    if min(a_arr.shape) < cfg.win_size:
        raise ValidationError(
            f"image {a_arr.shape} is smaller than the {cfg.win_size}x{cfg.win_size} window"
        )
    L = cfg.data_range if cfg.data_range is not None else default_data_range(a_arr)
    c1, c2 = (cfg.k1 * L) ** 2, (cfg.k2 * L) ** 2

    x, y = a_arr.astype(np.float64), b_arr.astype(np.float64)
    kernel = gaussian_window(cfg.win_size, cfg.sigma)
    mu_x, mu_y = _local_mean(x, kernel), _local_mean(y, kernel)
    var_x = _local_mean(x * x, kernel) - mu_x * mu_x
    var_y = _local_mean(y * y, kernel) - mu_y * mu_y
    cov = _local_mean(x * y, kernel) - mu_x * mu_y

    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim(a, b, cfg=None):
    """Mean structural similarity with a Gaussian window (11 taps, sigma 1.5)."""
    return float(np.clip(ssim_map(a, b, cfg).mean(), -1.0, 1.0))


@dataclass(frozen=True)
class MetricReport:
    id_similarity: float = None
    psnr_db: float = None
    ssim: float = None

    def __post_init__(self):
        for name in ("id_similarity", "ssim"):
            value = getattr(self, name)
            if value is not None and not -1.0 <= value <= 1.0:
                raise ValidationError(f"{name}={value} outside [-1, 1]")

    def to_text(self):
        """``key=value`` lines for present fields; infinite PSNR prints ``inf``."""
        lines = []
        for name in ("id_similarity", "psnr_db", "ssim"):
            value = getattr(self, name)
            if value is None:
                continue
            lines.append(f"{name}={'inf' if math.isinf(value) else f'{value:.6f}'}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        values = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            key, sep, raw = line.partition("=")
            if not sep or key not in cls.__dataclass_fields__:
                raise ParseError(f"unexpected report line {line!r}", line=lineno)
            values[key] = float(raw)
        return cls(**values)

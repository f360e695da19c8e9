"""Per-channel normalization of sequence vectors."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateScaleError, InputError

METHODS = ("robust", "zscore", "none")

# IQR of the standard normal distribution.
_IQR_NORMAL = 1.3489795003921634


@dataclass(frozen=True)
class NormStats:
    """Affine per-channel map ``u = (x - center) / scale``."""

    center: np.ndarray
    scale: np.ndarray
    method: str = "none"

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(-1)
        scale = np.asarray(self.scale, dtype=np.float64).reshape(-1)
        if center.shape != scale.shape:
            raise ValueError("center and scale must have the same length")
        if np.any(~np.isfinite(scale)) or np.any(scale <= 0):
            raise DegenerateScaleError("normalization scales must be finite and > 0")
        if self.method not in METHODS:
            raise ValueError(f"unknown normalization method {self.method!r}")
        center.setflags(write=False)
        scale.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "scale", scale)

    @property
    def d(self) -> int:
        return self.center.shape[0]

    @classmethod
    def identity(cls, d: int) -> "NormStats":
        return cls(np.zeros(d), np.ones(d), "none")

    def apply(self, x):
        return (np.asarray(x, dtype=np.float64) - self.center) / self.scale

    def invert(self, u):
        return np.asarray(u, dtype=np.float64) * self.scale + self.center

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "per_channel_center": self.center.tolist(),
            "per_channel_scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "NormStats":
        return cls(
            np.array(obj["per_channel_center"], dtype=np.float64),
            np.array(obj["per_channel_scale"], dtype=np.float64),
            obj["method"],
        )


def compute_norm_stats(values, method: str = "robust", channels=None) -> NormStats:
    """Estimate per-channel center and scale from an ``(N, d)`` array.

    ``robust`` uses (median, IQR / 1.349), ``zscore`` uses (mean, sample std with ddof=1)
    and ``none`` returns the identity map.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2:
        raise InputError("expected an (N, d) array")
    n, d = x.shape
    if method == "none":
        return NormStats.identity(d)
    if method not in METHODS:
        raise ConfigurationError(f"unknown normalization method {method!r}")
    if n < 2:
        raise InputError("need at least 2 rows to estimate normalization")
    if method == "robust":
        q25, center, q75 = np.percentile(x, [25.0, 50.0, 75.0], axis=0)
        scale = (q75 - q25) / _IQR_NORMAL
    else:
        center = x.mean(axis=0)
        scale = x.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(scale > 0))
    if bad.size:
        names = channels if channels is not None else [f"channel {i}" for i in range(d)]
        raise DegenerateScaleError(
            f"degenerate scale for {', '.join(str(names[i]) for i in bad)} ({method})"
        )
    return NormStats(center, scale, method)

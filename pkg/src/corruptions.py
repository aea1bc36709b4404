"""
Noise Corruptions

Seeded generators for four digital-noise corruption families at five
severity levels, applied to evaluation images only. Every output is clamped
to [0, 1].
"""

from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.rng import NoiseStream

# Severity-indexed parameters, severity 1 first
SEVERITY_TABLES: Dict[str, Tuple[float, ...]] = {
    "gaussian": (0.04, 0.08, 0.12, 0.18, 0.26),
    "shot": (60.0, 25.0, 12.0, 5.0, 3.0),
    "impulse": (0.03, 0.06, 0.09, 0.17, 0.27),
    "speckle": (0.06, 0.12, 0.20, 0.35, 0.50),
}
CORRUPTION_KINDS = tuple(SEVERITY_TABLES)
NOISE_KINDS = ("shot", "impulse", "speckle")

# Poisson means above this use the rounded normal approximation
POISSON_INVERSION_LIMIT = 10.0


class CorruptionError(Exception):
    """Raised on an invalid corruption spec, table, or input image."""

    pass


@dataclass(frozen=True)
class CorruptionSpec:
    """One (kind, severity) cell."""

    kind: str
    severity: int

    def validate(self) -> None:
        if self.kind not in SEVERITY_TABLES:
            raise CorruptionError(
                f"Unknown corruption kind '{self.kind}'. Available: {list(CORRUPTION_KINDS)}"
            )
        if not isinstance(self.severity, (int, np.integer)) or not 1 <= self.severity <= 5:
            raise CorruptionError(f"Severity must be an integer in 1..5, got {self.severity}")

    def __str__(self) -> str:
        return f"{self.kind}-{self.severity}"


def severity_table(
    kind: str, overrides: Optional[Mapping[str, Sequence[float]]] = None
) -> Tuple[float, ...]:
    """The five parameters of ``kind``, from ``overrides`` when it has an entry."""
    if kind not in SEVERITY_TABLES:
        raise CorruptionError(
            f"Unknown corruption kind '{kind}'. Available: {list(CORRUPTION_KINDS)}"
        )
    table = tuple(float(v) for v in (overrides or {}).get(kind, SEVERITY_TABLES[kind]))
    if len(table) != 5:
        raise CorruptionError(f"Severity table for '{kind}' needs 5 values, got {len(table)}")
    return table


def poisson(means: np.ndarray, stream: NoiseStream) -> np.ndarray:
    """
    Poisson draws by inversion for means <= 10 and round(N(mu, mu)) clamped
    at 0 above that. Consumes one uniform and one normal per element.
    """
    means = np.asarray(means, dtype=np.float64)
    u = stream.uniform(means.shape)
    z = stream.normal(means.shape)

    counts = np.zeros(means.shape)
    small = means <= POISSON_INVERSION_LIMIT
    if np.any(small):
        mu = means[small]
        target = u[small]
        k = np.zeros(mu.shape)
        pmf = np.exp(-mu)
        cdf = pmf.copy()
        # cdf at k = 60 exceeds 1 - 1e-16 for mu <= 10
        for step in range(1, 60):
            below = target > cdf
            if not np.any(below):
                break
            k = np.where(below, k + 1, k)
            pmf = pmf * mu / step
            cdf = cdf + pmf
        counts[small] = k
    large = ~small
    if np.any(large):
        mu = means[large]
        counts[large] = np.maximum(0.0, np.rint(mu + np.sqrt(mu) * z[large]))
    return counts


def apply_corruption(
    images: np.ndarray,
    spec: CorruptionSpec,
    stream: NoiseStream,
    overrides: Optional[Mapping[str, Sequence[float]]] = None,
) -> np.ndarray:
    """
    Corrupt a batch of images in [0, 1].

    gaussian: x + N(0, s^2); shot: Poisson(x c) / c; impulse: each pixel
    becomes 0 or 1 (equal odds) with probability p; speckle: x + x N(0, s^2).

    Raises:
        CorruptionError: On pixels outside [0, 1] or an invalid spec
    """
    spec.validate()
    images = np.asarray(images, dtype=np.float64)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise CorruptionError("Input pixels must lie in [0, 1]")
    param = severity_table(spec.kind, overrides)[spec.severity - 1]

    if spec.kind == "gaussian":
        out = images + param * stream.normal(images.shape)
    elif spec.kind == "shot":
        if param <= 0:
            raise CorruptionError(f"Shot-noise photon count must be > 0, got {param}")
        out = poisson(images * param, stream) / param
    elif spec.kind == "impulse":
        hit = stream.uniform(images.shape) < param
        salt = stream.uniform(images.shape) < 0.5
        out = np.where(hit, np.where(salt, 1.0, 0.0), images)
    else:
        out = images + images * (param * stream.normal(images.shape))
    return np.clip(out, 0.0, 1.0)

"""Low-dimensional similarity kernels with adjustable tail heaviness.

The embedding-space kernel family is

    k(d) = (1 + d^2 / alpha)^(-alpha)

where ``alpha > 0`` controls how heavy the tails are: ``alpha = 1`` is the
Cauchy kernel of standard t-SNE, ``alpha -> inf`` approaches the Gaussian
kernel exp(-d^2) of SNE, and ``alpha < 1`` gives tails heavier than any
t-distribution.  A "classic" variant parameterised by the t-distribution
degrees of freedom ``nu = 2*alpha - 1``,

    k(d) = (1 + d^2 / nu)^(-(nu + 1) / 2),

produces the same embeddings up to a global rescaling of the coordinates
by sqrt(2*nu / (nu + 1)); the optimizer therefore always runs on the
simplified form and applies the scale factor at the end.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "KernelVariant",
    "KernelParams",
    "kernel_value",
    "log_kernel_value",
    "attraction_weight",
    "repulsion_weight",
]

# Below this alpha the direct power (1 + d^2/alpha)**(-alpha) is evaluated in
# log space; fractional powers of denormal bases otherwise lose accuracy far
# from the origin.
_LOG_SPACE_ALPHA = 0.3


class KernelVariant(Enum):
    SIMPLIFIED = "simplified"
    CLASSIC = "classic"


@dataclass(frozen=True)
class KernelParams:
    """Tail-heaviness parameter and kernel variant selector.

    Parameters
    ----------
    alpha : float
        Tail parameter, must be positive.  Small alpha means heavy tails.
    variant : KernelVariant
        SIMPLIFIED uses (1 + d^2/alpha)^(-alpha); CLASSIC uses the
        t-distribution form with nu = 2*alpha - 1 degrees of freedom and
        therefore requires alpha > 1/2.
    """

    alpha: float
    variant: KernelVariant = KernelVariant.SIMPLIFIED

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha <= 0:
            raise ValueError(f"alpha must be a positive finite real, got {self.alpha}")
        if self.variant is KernelVariant.CLASSIC and self.alpha <= 0.5:
            raise ValueError(
                "classic variant needs nu = 2*alpha - 1 > 0, i.e. alpha > 0.5; "
                f"got alpha={self.alpha}"
            )

    @property
    def nu(self) -> float:
        """Degrees of freedom of the equivalent scaled t-distribution."""
        return 2.0 * self.alpha - 1.0

    def to_simplified(self) -> tuple["KernelParams", float]:
        """Return equivalent simplified-kernel parameters and the coordinate scale.

        A classic-variant embedding equals the simplified-variant embedding
        with every coordinate multiplied by ``sqrt(2*nu/(nu+1))``.  For the
        simplified variant the scale is 1.
        """
        if self.variant is KernelVariant.SIMPLIFIED:
            return self, 1.0
        nu = self.nu
        scale = float(np.sqrt(2.0 * nu / (nu + 1.0)))
        return KernelParams(self.alpha, KernelVariant.SIMPLIFIED), scale


def _check_d_squared(d_squared):
    d2 = np.asarray(d_squared, dtype=np.float64)
    if not np.all(np.isfinite(d2)):
        raise ValueError("squared distances must be finite")
    if np.any(d2 < 0):
        raise ValueError("squared distances must be nonnegative")
    return d2


def kernel_value(d_squared, params: KernelParams):
    """Kernel weight w = k(d) for squared distance(s) ``d_squared``.

    Returns values in (0, 1], with k(0) = 1.  Accepts scalars or arrays.
    """
    d2 = _check_d_squared(d_squared)
    alpha = params.alpha
    if params.variant is KernelVariant.CLASSIC:
        # (1 + d^2/nu)^(-(nu+1)/2); the exponent (nu+1)/2 equals alpha.
        return np.power(1.0 + d2 / params.nu, -alpha)
    if alpha < _LOG_SPACE_ALPHA:
        return np.exp(-alpha * np.log1p(d2 / alpha))
    return np.power(1.0 + d2 / alpha, -alpha)


def log_kernel_value(d_squared, params: KernelParams):
    """log k(d), computed without forming k(d) (stable for large distances)."""
    d2 = _check_d_squared(d_squared)
    if params.variant is KernelVariant.CLASSIC:
        return -params.alpha * np.log1p(d2 / params.nu)
    return -params.alpha * np.log1p(d2 / params.alpha)


def _require_simplified(params: KernelParams, who: str):
    if params.variant is not KernelVariant.CLASSIC:
        return
    raise ValueError(
        f"{who} is defined for the simplified variant; convert classic "
        "parameters with KernelParams.to_simplified() first"
    )


def attraction_weight(d_squared, params: KernelParams):
    """w^(1/alpha) = 1/(1 + d^2/alpha), the attractive-force weight.

    The 1/alpha power cancels the fractional exponent of the kernel, so this
    is a plain rational function whatever alpha is.
    """
    _require_simplified(params, "attraction_weight")
    d2 = _check_d_squared(d_squared)
    return 1.0 / (1.0 + d2 / params.alpha)


def repulsion_weight(d_squared, params: KernelParams):
    """w^((alpha+1)/alpha) = (1 + d^2/alpha)^(-(alpha+1)), the repulsive weight."""
    _require_simplified(params, "repulsion_weight")
    d2 = _check_d_squared(d_squared)
    base = 1.0 + d2 / params.alpha
    expo = params.alpha + 1.0
    if expo == 2.0:
        b = 1.0 / base
        return b * b
    if params.alpha < _LOG_SPACE_ALPHA:
        return np.exp(-expo * np.log1p(d2 / params.alpha))
    return np.power(base, -expo)

"""Embedding-space loss and gradient.

The KL objective splits into an attractive term, summed only over the
sparse affinity pattern, and a repulsive term involving every pair through
the normalization constant Z = sum_{k != l} w_kl.  Point i feels

    F_att_i = 4 * sum_j p_ij * w_ij^(1/alpha) * (y_i - y_j)
    F_rep_i = -4/Z * sum_j w_ij^((alpha+1)/alpha) * (y_i - y_j)

and F_att + F_rep equals the direct gradient 4 * sum_j (p_ij - q_ij) *
w_ij^(1/alpha) * (y_i - y_j).  The exact repulsion is a chunked O(n^2)
scan; the accelerated version lives in `interpolation`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affinity import SparseAffinity
from .kernels import (
    KernelParams,
    attraction_weight,
    kernel_value,
    log_kernel_value,
    repulsion_weight,
)

__all__ = [
    "Embedding",
    "ForceField",
    "attractive_forces",
    "repulsive_forces_exact",
    "kl_divergence",
    "force_field",
]


@dataclass
class Embedding:
    """2-D coordinates of the embedded points plus an iteration counter."""

    coords: np.ndarray
    generation: int = 0

    def __post_init__(self):
        self.coords = np.ascontiguousarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 2:
            raise ValueError(f"coords must be (n, 2), got {self.coords.shape}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("coords must be finite")

    @property
    def n(self) -> int:
        return self.coords.shape[0]


@dataclass
class ForceField:
    """Gradient decomposition at one embedding state."""

    attractive: np.ndarray
    repulsive: np.ndarray
    z: float
    loss: float | None = None

    @property
    def total(self) -> np.ndarray:
        return self.attractive + self.repulsive


def _coords(emb) -> np.ndarray:
    y = np.ascontiguousarray(getattr(emb, "coords", emb), dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError(f"embedding coordinates must be (n, 2), got {y.shape}")
    return y


def _pattern_d2(y, P: SparseAffinity):
    rows = P.row_indices
    cols = P.matrix.indices
    diff = y[rows] - y[cols]
    return rows, cols, diff, np.einsum("ij,ij->i", diff, diff)


def attractive_forces(emb, P: SparseAffinity, params: KernelParams) -> np.ndarray:
    """Attractive gradient term, summed over the affinity sparsity pattern."""
    y = _coords(emb)
    if P.n != y.shape[0]:
        raise ValueError(f"affinity has n={P.n} but embedding has n={y.shape[0]}")
    rows, _, diff, d2 = _pattern_d2(y, P)
    vals = P.matrix.data * attraction_weight(d2, params)
    n = y.shape[0]
    fx = np.bincount(rows, weights=vals * diff[:, 0], minlength=n)
    fy = np.bincount(rows, weights=vals * diff[:, 1], minlength=n)
    return 4.0 * np.column_stack([fx, fy])


def repulsive_forces_exact(emb, params: KernelParams, chunk_bytes: int = 256 * 2**20):
    """Repulsive gradient term and normalization Z by a chunked all-pairs scan.

    Returns (forces (n, 2), z).  Memory use is bounded by ``chunk_bytes``.
    """
    y = _coords(emb)
    n = y.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    sq = np.einsum("ij,ij->i", y, y)
    rep_sum = np.empty(n)
    rep_y = np.empty((n, 2))
    z = 0.0
    step = int(max(1, min(n, chunk_bytes // (8 * n))))
    for start in range(0, n, step):
        stop = min(start + step, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (y[start:stop] @ y.T)
        np.maximum(d2, 0.0, out=d2)
        local = np.arange(stop - start)
        w = kernel_value(d2, params)
        w[local, local + start] = 0.0
        z += float(w.sum())
        rw = repulsion_weight(d2, params)
        rw[local, local + start] = 0.0
        rep_sum[start:stop] = rw.sum(axis=1)
        rep_y[start:stop] = rw @ y
    forces = (-4.0 / z) * (rep_sum[:, None] * y - rep_y)
    return forces, z


def normalization_exact(emb, params: KernelParams, chunk_bytes: int = 256 * 2**20) -> float:
    """Z = sum_{k != l} w_kl without forming the full pairwise matrix."""
    y = _coords(emb)
    n = y.shape[0]
    sq = np.einsum("ij,ij->i", y, y)
    z = 0.0
    step = int(max(1, min(n, chunk_bytes // (8 * n))))
    for start in range(0, n, step):
        stop = min(start + step, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (y[start:stop] @ y.T)
        np.maximum(d2, 0.0, out=d2)
        w = kernel_value(d2, params)
        w[np.arange(stop - start), np.arange(start, stop)] = 0.0
        z += float(w.sum())
    return z


def kl_divergence(emb, P: SparseAffinity, params: KernelParams, z_mode: str = "exact",
                  z: float | None = None, interp_config=None) -> float:
    """KL divergence sum_ij p_ij log(p_ij / q_ij) with q_ij = w_ij / Z.

    The p-dependent part is summed over the sparsity pattern only, but the
    constant sum p log p is included so reported values are comparable
    across affinity constructions.  ``z`` may be supplied to reuse a value
    from a force evaluation; otherwise it is computed per ``z_mode``
    ("exact" or "interp").
    """
    y = _coords(emb)
    if P.n != y.shape[0]:
        raise ValueError(f"affinity has n={P.n} but embedding has n={y.shape[0]}")
    if z is None:
        if z_mode == "exact":
            z = normalization_exact(y, params)
        elif z_mode == "interp":
            from .interpolation import InterpConfig, normalization_interp

            z = normalization_interp(y, params, interp_config or InterpConfig())
        else:
            raise ValueError(f"z_mode must be 'exact' or 'interp', got {z_mode!r}")
    _, _, _, d2 = _pattern_d2(y, P)
    p = P.matrix.data
    pos = p > 0.0
    p_log_p = float(np.dot(p[pos], np.log(p[pos])))
    p_log_w = float(np.dot(p[pos], log_kernel_value(d2[pos], params)))
    return p_log_p - p_log_w + float(np.log(z))


def force_field(emb, P: SparseAffinity, params: KernelParams, solver: str = "exact",
                interp_config=None, with_loss: bool = False) -> ForceField:
    """Evaluate both force components (and optionally the loss) in one call."""
    y = _coords(emb)
    att = attractive_forces(y, P, params)
    if solver == "exact":
        rep, z = repulsive_forces_exact(y, params)
    elif solver == "accelerated":
        from .interpolation import InterpConfig, repulsive_forces_interp

        rep, z = repulsive_forces_interp(y, params, interp_config or InterpConfig())
    else:
        raise ValueError(f"solver must be 'exact' or 'accelerated', got {solver!r}")
    loss = kl_divergence(y, P, params, z=z) if with_loss else None
    return ForceField(att, rep, z, loss)

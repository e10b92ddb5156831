"""High-dimensional affinity construction.

Pipeline: find K = 3*ceil(perplexity) nearest neighbors per point (exact
brute force or a randomized projection forest), calibrate each point's
Gaussian bandwidth so the conditional distribution over its neighbors has
the requested perplexity, then symmetrize and normalize into a sparse
matrix of pairwise affinities summing to one.  Affinities outside the
neighborhood graph are exactly zero by construction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

__all__ = [
    "NeighborGraph",
    "ConditionalAffinity",
    "SparseAffinity",
    "CalibrationWarning",
    "find_neighbors",
    "calibrate_bandwidth",
    "conditional_affinities",
    "symmetrize",
    "build_affinities",
]


class CalibrationWarning(UserWarning):
    """Bandwidth calibration could not reach the requested perplexity."""


# ---------------------------------------------------------------------------
# neighbor graphs


@dataclass
class NeighborGraph:
    """K nearest neighbors per point: ids (n, K) and ascending distances (n, K)."""

    indices: np.ndarray
    distances: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.intp)
        self.distances = np.asarray(self.distances, dtype=np.float64)
        n, k = self.indices.shape
        if self.distances.shape != (n, k):
            raise ValueError("indices and distances must have identical shapes")
        if np.any(self.indices == np.arange(n)[:, None]):
            raise ValueError("neighbor graph contains self-edges")
        if np.any(np.diff(self.distances, axis=1) < 0):
            raise ValueError("neighbor distances must be sorted ascending")

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[1]


def find_neighbors(data, k: int, mode: str = "exact", seed: int = 0) -> NeighborGraph:
    """K nearest neighbors of every point by Euclidean distance.

    Parameters
    ----------
    data : (n, D) array
    k : int
        Neighbors per point, 0 < k < n.
    mode : {"exact", "approximate"}
        "exact" is a chunked brute-force scan; "approximate" queries a
        randomized projection forest (recall >= ~0.9 against exact).
    seed : int
        Seed for the approximate index; ignored in exact mode.
    """
    x = np.ascontiguousarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("data must be a 2-D matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("data must be finite")
    n = x.shape[0]
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < n={n}, got {k}")
    if mode == "exact":
        idx, dist = _exact_neighbors(x, k)
    elif mode == "approximate":
        idx, dist = _forest_neighbors(x, k, seed)
    else:
        raise ValueError(f"mode must be 'exact' or 'approximate', got {mode!r}")
    return NeighborGraph(idx, dist)


def _chunk_rows(n: int, budget_bytes: int = 256 * 2**20) -> int:
    return int(max(1, min(n, budget_bytes // (8 * max(n, 1)))))


def _exact_neighbors(x, k):
    n = x.shape[0]
    sq = np.einsum("ij,ij->i", x, x)
    idx = np.empty((n, k), dtype=np.intp)
    dist = np.empty((n, k), dtype=np.float64)
    step = _chunk_rows(n)
    for start in range(0, n, step):
        stop = min(start + step, n)
        d2 = sq[start:stop, None] + sq[None, :] - 2.0 * (x[start:stop] @ x.T)
        d2[np.arange(start, stop) - start, np.arange(start, stop)] = np.inf
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        pd = np.take_along_axis(d2, part, axis=1)
        order = np.argsort(pd, axis=1, kind="stable")
        idx[start:stop] = np.take_along_axis(part, order, axis=1)
        dist[start:stop] = np.sqrt(np.maximum(np.take_along_axis(pd, order, axis=1), 0.0))
    return idx, dist


# ---------------------------------------------------------------------------
# randomized projection forest

_MISSING = -1


def _forest_neighbors(x, k, seed, n_trees=10, leaf_size=None, refine_rounds=2):
    n = x.shape[0]
    if leaf_size is None:
        leaf_size = max(32, (3 * k) // 2)
    rng = np.random.default_rng(seed)
    best_d = np.full((n, k), np.inf)
    best_i = np.full((n, k), _MISSING, dtype=np.intp)
    for _ in range(n_trees):
        for leaf in _tree_leaves(x, leaf_size, rng):
            _merge_leaf(x, leaf, best_d, best_i)
    for _ in range(refine_rounds):
        _expand_neighbors(x, best_d, best_i)
    order = np.argsort(best_d, axis=1, kind="stable")
    best_d = np.take_along_axis(best_d, order, axis=1)
    best_i = np.take_along_axis(best_i, order, axis=1)
    if np.any(best_i == _MISSING):
        raise RuntimeError("projection forest left unfilled neighbor slots")
    return best_i, np.sqrt(np.maximum(best_d, 0.0))


def _tree_leaves(x, leaf_size, rng):
    """Split points by random hyperplanes (perpendicular bisector of two
    random members, median threshold) until every cell holds <= leaf_size."""
    leaves = []
    stack = [np.arange(x.shape[0])]
    while stack:
        idxs = stack.pop()
        if idxs.size <= leaf_size:
            leaves.append(idxs)
            continue
        a, b = rng.choice(idxs.size, size=2, replace=False)
        normal = x[idxs[a]] - x[idxs[b]]
        if not np.any(normal):
            normal = rng.standard_normal(x.shape[1])
        proj = x[idxs] @ normal
        left = proj < np.median(proj)
        if not left.any() or left.all():
            perm = rng.permutation(idxs.size)
            left = np.zeros(idxs.size, dtype=bool)
            left[perm[: idxs.size // 2]] = True
        stack.append(idxs[left])
        stack.append(idxs[~left])
    return leaves


def _merge_candidates(rows, cand_i, cand_d, best_d, best_i):
    """Fold per-row candidate lists into the running top-k, dropping
    duplicate ids and self-edges."""
    k = best_d.shape[1]
    all_i = np.concatenate([best_i[rows], cand_i], axis=1)
    all_d = np.concatenate([best_d[rows], cand_d], axis=1)
    all_d[all_i == _MISSING] = np.inf
    all_d[all_i == rows[:, None]] = np.inf
    m = all_i.shape[1]
    # id-major, distance-minor order makes duplicates adjacent with the
    # closest copy first
    rank = np.argsort(np.argsort(all_d, axis=1, kind="stable"), axis=1, kind="stable")
    key = (all_i - _MISSING).astype(np.int64) * m + rank
    order = np.argsort(key, axis=1, kind="stable")
    si = np.take_along_axis(all_i, order, axis=1)
    sd = np.take_along_axis(all_d, order, axis=1)
    sd[:, 1:][si[:, 1:] == si[:, :-1]] = np.inf
    keep = np.argsort(sd, axis=1, kind="stable")[:, :k]
    best_i[rows] = np.take_along_axis(si, keep, axis=1)
    best_d[rows] = np.take_along_axis(sd, keep, axis=1)


def _merge_leaf(x, leaf, best_d, best_i):
    l = leaf.size
    if l < 2:
        return
    pts = x[leaf]
    sq = np.einsum("ij,ij->i", pts, pts)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.fill_diagonal(d2, np.inf)
    kk = min(best_d.shape[1], l - 1)
    part = np.argpartition(d2, kk - 1, axis=1)[:, :kk]
    cand_d = np.take_along_axis(d2, part, axis=1)
    _merge_candidates(leaf, leaf[part], cand_d, best_d, best_i)


def _expand_neighbors(x, best_d, best_i, span=32, chunk=128):
    """One neighbors-of-neighbors refinement pass over the current graph."""
    n = x.shape[0]
    s = min(span, best_i.shape[1])
    sq = np.einsum("ij,ij->i", x, x)
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        hop = best_i[best_i[rows, :s], :s].reshape(len(rows), s * s)
        dots = np.einsum("cd,ckd->ck", x[rows], x[hop])
        cand_d = sq[rows][:, None] + sq[hop] - 2.0 * dots
        _merge_candidates(rows, hop, cand_d, best_d, best_i)


# ---------------------------------------------------------------------------
# bandwidth calibration

_SIGMA_LO_FACTOR = 1e-10
_SIGMA_HI_FACTOR = 1e4
_MAX_BISECT = 200
_PERP_RTOL = 1e-5


@dataclass
class CalibrationResult:
    sigma: float
    row: np.ndarray
    warning: str | None = None


def calibrate_bandwidth(distances, perplexity: float, *, tol: float = _PERP_RTOL,
                        max_iter: int = _MAX_BISECT) -> CalibrationResult:
    """Find the Gaussian bandwidth whose conditional row has the target perplexity.

    Bisects on log(sigma) until |Perp(row) - perplexity| < tol * perplexity.
    When the target is unattainable (tied or all-zero distances) the nearest
    boundary bandwidth is returned with a warning message instead of an error.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 1 or d.size == 0:
        raise ValueError("distances must be a nonempty 1-D array")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite and nonnegative")
    if not 0 < perplexity:
        raise ValueError(f"perplexity must be positive, got {perplexity}")
    sigmas, rows, flags = _calibrate_rows(d[None, :], perplexity, tol, max_iter)
    return CalibrationResult(float(sigmas[0]), rows[0], flags[0])


def _rows_perplexity(d2, log_sigma):
    beta = 0.5 * np.exp(-2.0 * log_sigma)
    e = np.exp(-(d2 - d2.min(axis=1, keepdims=True)) * beta[:, None])
    p = e / e.sum(axis=1, keepdims=True)
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return np.exp(-plogp.sum(axis=1)), p


def _calibrate_rows(distances, perplexity, tol=_PERP_RTOL, max_iter=_MAX_BISECT):
    """Vectorized bisection over all rows at once.

    Returns (sigmas (m,), rows (m, K), flags list of m warning strings/None).
    """
    d2 = distances.astype(np.float64) ** 2
    m, k = d2.shape
    flags: list[str | None] = [None] * m
    d_max = distances.max(axis=1)
    degenerate = d_max <= 0.0
    d_max_safe = np.where(degenerate, 1.0, d_max)
    lo = np.log(_SIGMA_LO_FACTOR * d_max_safe)
    hi = np.log(_SIGMA_HI_FACTOR * d_max_safe)

    perp_lo, _ = _rows_perplexity(d2, lo)
    perp_hi, _ = _rows_perplexity(d2, hi)
    at_lo = perplexity <= perp_lo
    at_hi = perplexity >= perp_hi

    log_sigma = 0.5 * (lo + hi)
    active = ~(at_lo | at_hi | degenerate)
    for _ in range(max_iter):
        if not active.any():
            break
        perp, _ = _rows_perplexity(d2[active], log_sigma[active])
        done = np.abs(perp - perplexity) < tol * perplexity
        too_small = perp < perplexity
        lo_a, hi_a = lo[active], hi[active]
        lo[active] = np.where(too_small, log_sigma[active], lo_a)
        hi[active] = np.where(too_small, hi_a, log_sigma[active])
        still = np.flatnonzero(active)[~done]
        active = np.zeros(m, dtype=bool)
        active[still] = True
        log_sigma[active] = 0.5 * (lo[active] + hi[active])

    log_sigma[at_lo] = np.log(_SIGMA_LO_FACTOR * d_max_safe[at_lo])
    log_sigma[at_hi] = np.log(_SIGMA_HI_FACTOR * d_max_safe[at_hi])
    log_sigma[degenerate] = 0.0

    perp, rows = _rows_perplexity(d2, log_sigma)
    rows[degenerate] = 1.0 / k
    for i in np.flatnonzero(degenerate):
        flags[i] = "all neighbor distances are zero; emitting a uniform row"
    reached = np.abs(perp - perplexity) < tol * perplexity
    for i in np.flatnonzero(~reached & ~degenerate):
        flags[i] = (
            f"perplexity {perplexity:g} unattainable (closest {perp[i]:.6g}); "
            "using boundary bandwidth"
        )
    return np.exp(log_sigma), rows, flags


# ---------------------------------------------------------------------------
# conditional and symmetrized affinities


@dataclass
class ConditionalAffinity:
    """Directional affinities p_{j|i} on the neighbor graph, one row per point."""

    graph: NeighborGraph
    values: np.ndarray
    sigmas: np.ndarray
    perplexity: float
    flagged_rows: list = field(default_factory=list)

    def row_perplexities(self) -> np.ndarray:
        p = self.values
        plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
        return np.exp(-plogp.sum(axis=1))


@dataclass
class SparseAffinity:
    """Symmetric sparse affinities p_ij with zero diagonal, summing to one."""

    matrix: sp.csr_matrix

    def __post_init__(self):
        m = self.matrix.tocsr()
        m.sort_indices()
        self.matrix = m
        if m.shape[0] != m.shape[1]:
            raise ValueError("affinity matrix must be square")
        if m.diagonal().any():
            raise ValueError("affinity matrix must have an empty diagonal")
        if np.any(m.data < 0):
            raise ValueError("affinities must be nonnegative")
        self._rows = None

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def row_indices(self) -> np.ndarray:
        """COO-style row index per stored entry (cached; pairs with .matrix.indices)."""
        if self._rows is None:
            counts = np.diff(self.matrix.indptr)
            self._rows = np.repeat(np.arange(self.n, dtype=np.intp), counts)
        return self._rows

    def total(self) -> float:
        return float(self.matrix.data.sum())

    def check(self, atol: float = 1e-9):
        if (self.matrix != self.matrix.T).nnz != 0:
            raise ValueError("affinity matrix is not exactly symmetric")
        if abs(self.total() - 1.0) > atol:
            raise ValueError(f"affinities sum to {self.total()}, expected 1 +- {atol}")

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def conditional_affinities(data, perplexity: float, mode: str = "exact",
                           seed: int = 0) -> ConditionalAffinity:
    """Neighbor search plus per-point bandwidth calibration.

    K is 3*ceil(perplexity) neighbors per point, clamped to n-1 when the
    data set is too small for the full neighborhood (with a warning).
    """
    x = np.asarray(data, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least two points")
    if perplexity <= 0:
        raise ValueError(f"perplexity must be positive, got {perplexity}")
    k_want = 3 * int(np.ceil(perplexity))
    k = min(k_want, n - 1)
    if k < k_want:
        warnings.warn(
            f"dataset too small for 3*ceil(perplexity)={k_want} neighbors; using k={k}",
            CalibrationWarning, stacklevel=2,
        )
    graph = find_neighbors(x, k, mode=mode, seed=seed)
    sigmas, rows, flags = _calibrate_rows(graph.distances, perplexity)
    flagged = [i for i, f in enumerate(flags) if f is not None]
    if flagged:
        warnings.warn(
            f"{len(flagged)} of {n} rows could not be calibrated to perplexity "
            f"{perplexity:g} (first: {flags[flagged[0]]})",
            CalibrationWarning, stacklevel=2,
        )
    return ConditionalAffinity(graph, rows, sigmas, perplexity, flagged)


def symmetrize(cond: ConditionalAffinity) -> SparseAffinity:
    """p_ij = (p_{i|j} + p_{j|i}) / 2n, renormalized to sum exactly to one."""
    n = cond.graph.n
    indptr = np.arange(0, n * cond.graph.k + 1, cond.graph.k)
    p = sp.csr_matrix(
        (cond.values.ravel().astype(np.float64), cond.graph.indices.ravel(), indptr),
        shape=(n, n),
    )
    p.sum_duplicates()
    sym = (p + p.T) / (2.0 * n)
    sym.data /= sym.data.sum()
    return SparseAffinity(sym)


def build_affinities(data, perplexity: float, mode: str = "exact",
                     seed: int = 0) -> SparseAffinity:
    """Full pipeline: neighbors, calibration, symmetrization, normalization."""
    return symmetrize(conditional_affinities(data, perplexity, mode=mode, seed=seed))

"""Shared PCA internals: dense eigendecomposition and randomized projection.

Used by the embedding initializer (top-2 scores) and the preprocessing
reducer (top-``dims`` scores).  The dense path diagonalises the feature
covariance and is used for D <= 1000; above that a randomized range finder
with power iterations approximates the leading subspace.
"""

from __future__ import annotations

import numpy as np

_DENSE_MAX_FEATURES = 1000


def pca_scores(data, dims: int, seed: int = 0):
    """Project mean-centered ``data`` onto its top ``dims`` principal axes.

    Returns (scores, singular_values) where scores has shape (n, dims) and
    singular_values are those of the centered data matrix (descending).
    Column signs are fixed so the largest-magnitude loading of each axis is
    positive, making the output deterministic across runs.
    """
    x = np.asarray(data, dtype=np.float64)
    n, d = x.shape
    if not 1 <= dims <= min(n, d):
        raise ValueError(f"dims must be in [1, min(n, D)] = [1, {min(n, d)}], got {dims}")
    xc = x - x.mean(axis=0)
    if d <= _DENSE_MAX_FEATURES:
        components, svals = _dense_components(xc, dims)
    else:
        components, svals = _randomized_components(xc, dims, seed)
    flip = np.sign(components[np.argmax(np.abs(components), axis=0), np.arange(dims)])
    flip[flip == 0] = 1.0
    components = components * flip
    return xc @ components, svals


def _dense_components(xc, dims):
    cov = (xc.T @ xc) / max(len(xc) - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:dims]
    svals = np.sqrt(np.maximum(evals[order], 0.0) * max(len(xc) - 1, 1))
    return evecs[:, order], svals


def _randomized_components(xc, dims, seed, oversample=10, power_iters=4):
    rng = np.random.default_rng(seed)
    k = min(dims + oversample, min(xc.shape))
    q = np.linalg.qr(xc.T @ rng.standard_normal((len(xc), k)))[0]
    for _ in range(power_iters):
        q = np.linalg.qr(xc @ q)[0]
        q = np.linalg.qr(xc.T @ q)[0]
    b = xc @ q
    _, svals, vt = np.linalg.svd(b, full_matrices=False)
    return q @ vt[:dims].T, svals[:dims]

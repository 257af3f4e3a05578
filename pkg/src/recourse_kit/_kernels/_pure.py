"""Pure-numpy fallback for the hot per-node kernels.

Same signatures and semantics as the compiled extension in ``_core.pyx``:
2-D float64 value arrays, one row per node/scenario/candidate.
"""

import numpy as np

BACKEND = "python"


def box_project(z, lo, hi):
    """Clamp every row of ``z`` (N, d) into the box [lo, hi]."""
    return np.clip(z, lo, hi)


def box_distance(z, lo, hi):
    """Euclidean distance of every row of ``z`` to the box [lo, hi]."""
    excess = np.maximum(lo - z, 0.0) + np.maximum(z - hi, 0.0)
    return np.sqrt(np.einsum("ij,ij->i", excess, excess))


def ball_project(z, center, radius):
    """Project every row of ``z`` onto the Euclidean ball (center, radius)."""
    d = z - center
    norms = np.sqrt(np.einsum("ij,ij->i", d, d))
    scale = np.ones_like(norms)
    outside = norms > radius
    scale[outside] = radius / norms[outside]
    return center + d * scale[:, None]


def ball_distance(z, center, radius):
    d = z - center
    norms = np.sqrt(np.einsum("ij,ij->i", d, d))
    return np.maximum(norms - radius, 0.0)


def segment_weighted_mean(values, weights, groups, n_groups):
    """Probability-weighted mean of rows per group.

    values: (N, d); weights: (N,) strictly positive; groups: (N,) int64 in
    [0, n_groups). Returns (n_groups, d).
    """
    mass = np.bincount(groups, weights=weights, minlength=n_groups)
    out = np.empty((n_groups, values.shape[1]))
    for j in range(values.shape[1]):
        out[:, j] = np.bincount(groups, weights=weights * values[:, j], minlength=n_groups)
    return out / mass[:, None]


def weighted_power_sum(values, weights, p):
    """sum_i weights[i] * ||values[i, :]||_2 ** p."""
    norms = np.sqrt(np.einsum("ij,ij->i", values, values))
    return float(np.dot(weights, norms**p))

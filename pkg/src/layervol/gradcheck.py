"""Central finite differences for checking hand-derived gradients."""

import numpy as np


def central_difference(fn, params, eps=1e-4, indices=None):
    """Numerical gradient of scalar ``fn`` at ``params``.

    ``indices`` restricts the check to a subset of coordinates; the returned
    array then has one entry per index.
    """
    params = np.asarray(params, dtype=np.float64)
    indices = range(params.size) if indices is None else indices
    grad = []
    for i in indices:
        step = np.zeros_like(params)
        step.flat[i] = eps
        grad.append((fn(params + step) - fn(params - step)) / (2.0 * eps))
    return np.asarray(grad)


def relative_error(analytic, numeric, floor=1e-12):
    """``|a - n| / max(|a|, |n|)`` over whole vectors."""
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)

"""Small shared test utilities (ray batches, finite differences)."""

import numpy as np

from layervol.render import Rays


def random_rays(rng, n, radius=2.0, near=1.0, far=3.0):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return Rays(-radius * d, d, np.full(n, near), np.full(n, far))


def fd_gradient(fn, params, eps=1e-4, indices=None):
    """Central differences of scalar ``fn`` at ``params`` (copied, never mutated)."""
    params = np.array(params, dtype=np.float64)
    indices = range(params.size) if indices is None else indices
    out = []
    for i in indices:
        up, down = params.copy(), params.copy()
        up[i] += eps
        down[i] -= eps
        out.append((fn(up) - fn(down)) / (2.0 * eps))
    return np.array(out)


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)

"""Input validation helpers."""

import numpy as np
from sklearn.utils import check_array

from .errors import ConfigError


def check_points(x, name="x"):
    """Return ``x`` as a finite float64 array of shape (n, 3).

    A single 3-vector is promoted to shape (1, 3).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    try:
        x = check_array(x, dtype=np.float64, ensure_all_finite=True, ensure_min_samples=0)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc
    if x.shape[1] != 3:
        raise ConfigError(f"{name} must have 3 columns, got shape {x.shape}")
    return x


def check_same_shape(a, b, names=("a", "b")):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")
    return a, b


def check_unit_interval(value, name, *, open_interval=True):
    value = float(value)
    ok = 0.0 < value < 1.0 if open_interval else 0.0 <= value <= 1.0
    if not ok:
        raise ConfigError(f"{name} must lie in (0, 1), got {value}")
    return value


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0:
        raise ConfigError(f"{name} must be positive, got {value}")
    return value

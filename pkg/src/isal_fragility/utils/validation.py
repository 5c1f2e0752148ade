"""Input checks shared by the estimators and the CLI."""
import numbers

import numpy as np


def check_log_im(X) -> np.ndarray:
    """Coerce log-IM input to a finite contiguous 1-D float array.

    Accepts a 1-D array or a single-column 2-D array (scikit-learn layout).
    """
    x = np.asarray(X, dtype=float)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise ValueError(f"expected a single feature (log IM), got {x.shape[1]}")
        x = x[:, 0]
    if x.ndim != 1:
        raise ValueError(f"expected 1-D log-IM values, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(x)):
        raise ValueError("log-IM values must be finite")
    return np.ascontiguousarray(x)


def check_labels(y, n: int) -> np.ndarray:
    s = np.asarray(y, dtype=float).ravel()
    if s.size != n:
        raise ValueError(f"got {s.size} labels for {n} samples")
    if not np.all((s == 0) | (s == 1)):
        raise ValueError("labels must be 0 or 1")
    return np.ascontiguousarray(s)


def check_random_generator(seed) -> np.random.Generator:
    """Turn None, an int, a SeedSequence or a Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None or isinstance(seed, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(seed)
    raise TypeError(f"cannot build a Generator from {type(seed).__name__}")


def check_probability(value, name: str, *, open_low=True, open_high=True) -> float:
    v = float(value)
    lo_ok = v > 0 if open_low else v >= 0
    hi_ok = v < 1 if open_high else v <= 1
    if not (lo_ok and hi_ok):
        lb = "(" if open_low else "["
        rb = ")" if open_high else "]"
        raise ValueError(f"{name} must lie in {lb}0, 1{rb}, got {v}")
    return v

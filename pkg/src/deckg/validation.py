"""Input checks and random-stream helpers used by the estimators."""

import numbers
import zlib

import numpy as np

from .domain import DataError

# stage tags keep per-user random streams independent across stages
STAGE_TAGS = {name: zlib.crc32(name.encode()) for name in (
    "split", "desensitize", "random_response", "init", "train", "eval", "pretrain", "synth",
)}


def check_random_state(seed):
    """Turn ``None`` / int / Generator into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        return np.random.default_rng()
    if isinstance(seed, numbers.Integral):
        return np.random.default_rng(int(seed))
    raise DataError(f"cannot build a random generator from {seed!r}")


def user_stream(seed: int, user: int, stage: str) -> np.random.Generator:
    """Reproducible per-user stream derived from (seed, stage, user)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), STAGE_TAGS[stage], int(user)]))


def check_epsilon(epsilon):
    epsilon = float(epsilon)
    if not np.isfinite(epsilon) or epsilon < 0:
        raise DataError(f"epsilon must be a finite value >= 0, got {epsilon}")
    return epsilon


def check_unit_interval(value, name):
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise DataError(f"{name} must lie in [0, 1], got {value}")
    return value


def check_vector(x, name="vector", dim=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DataError(f"{name} must be 1-dimensional, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise DataError(f"{name} must have length {dim}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise DataError(f"{name} contains non-finite values")
    return x


def check_k(k):
    if int(k) != k or k < 1:
        raise DataError(f"k must be a positive integer, got {k}")
    return int(k)

import numpy as np
from django.conf import settings


def default_dtype() -> np.dtype:
    """Float dtype for training hot paths (``ADTLAB_FLOAT_DTYPE``); tests always use 64-bit."""
    name = getattr(settings, "ADTLAB_FLOAT_DTYPE", "float64") if settings.configured else "float64"
    if name not in ("float64", "float32"):
        raise ValueError(f"ADTLAB_FLOAT_DTYPE must be float64 or float32, got {name!r}")
    return np.dtype(name)


def make_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def spawn_streams(rng: np.random.Generator, count: int) -> list[np.random.Generator]:
    """Independent, deterministically derived streams for per-worker sampling."""
    return list(rng.spawn(count))

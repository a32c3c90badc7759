"""Input checks shared by the estimators and the command line."""

import numpy as np

from .errors import DimensionError, NonFiniteError


def check_images(X, config=None, dtype=None):
    """Return ``X`` as a finite ``(N, C, S, S)`` float array.

    A 2-D ``X`` of shape ``(N, C*S*S)`` is reshaped when ``config`` fixes the
    image geometry.
    """
    X = np.asarray(X)
    if X.dtype.kind not in "fiu":
        raise TypeError(f"images must be numeric, got dtype {X.dtype}")
    if config is not None:
        shape = (config.channels, config.image_size, config.image_size)
        if X.ndim == 2 and X.shape[1] == int(np.prod(shape)):
            X = X.reshape(-1, *shape)
        if X.ndim != 4 or X.shape[1:] != shape:
            raise DimensionError(f"expected images of shape (N, {shape[0]}, {shape[1]}, "
                                 f"{shape[2]}), got {X.shape}")
    elif X.ndim != 4 or X.shape[2] != X.shape[3]:
        raise DimensionError(f"expected square images (N, C, S, S), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("need at least one image")
    X = X.astype(dtype or (X.dtype if X.dtype.kind == "f" else np.float32), copy=False)
    if not np.all(np.isfinite(X)):
        raise NonFiniteError("images contain NaN or Inf")
    return X


def check_labels(y, n_samples):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise DimensionError(f"labels must have shape ({n_samples},), got {y.shape}")
    return y

"""Input validation helpers used at public API boundaries.

Internal hot paths (ensemble forward, attack loops) skip these and operate on
pre-validated arrays.
"""

import numpy as np


def as_image(x, check_range=True):
    """Validate and return an image tensor of shape (c, w, h) with values in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"image tensor must have shape (c, w, h), got ndim={x.ndim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("image tensor contains non-finite values")
    if check_range and (x.min() < 0.0 or x.max() > 1.0):
        raise ValueError(
            f"image values must lie in [0, 1], got range [{x.min():.6g}, {x.max():.6g}]"
        )
    return x


def as_image_batch(X, check_range=True):
    """Validate and return a batch of images with shape (n, c, w, h)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"image batch must have shape (n, c, w, h), got ndim={X.ndim}")
    if not np.all(np.isfinite(X)):
        raise ValueError("image batch contains non-finite values")
    if check_range and X.size and (X.min() < 0.0 or X.max() > 1.0):
        raise ValueError(
            f"image values must lie in [0, 1], got range [{X.min():.6g}, {X.max():.6g}]"
        )
    return X


def check_block_size(block_size, w, h):
    """Block size must be a positive integer dividing both image dimensions."""
    if not isinstance(block_size, (int, np.integer)) or block_size < 1:
        raise ValueError(f"block size must be a positive integer, got {block_size!r}")
    if w % block_size or h % block_size:
        raise ValueError(
            f"block size M={block_size} must divide image dimensions (w={w}, h={h})"
        )


def as_labels(y, n_classes=None):
    """Validate and return integer class labels of shape (n,)."""
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-d, got ndim={y.ndim}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.floor(y)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if y.size and y.min() < 0:
        raise ValueError("labels must be nonnegative")
    if n_classes is not None and y.size and y.max() >= n_classes:
        raise ValueError(f"label {y.max()} out of range for {n_classes} classes")
    return y

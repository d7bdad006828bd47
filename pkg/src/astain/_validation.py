"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np


def check_image(image, min_size: int = 1) -> np.ndarray:
    """A single ``[H, W, 3]`` image with intensities in [0, 255]."""
    a = np.asarray(image)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"expected an [H, W, 3] RGB image, got shape {a.shape}")
    if min(a.shape[:2]) < min_size:
        raise ValueError(f"image {a.shape[0]}x{a.shape[1]} smaller than {min_size}x{min_size}")
    if not np.issubdtype(a.dtype, np.number) or not np.isfinite(a).all():
        raise ValueError("image must hold finite numbers")
    if a.min() < 0 or a.max() > 255:
        raise ValueError("image intensities must lie in [0, 255]")
    return a


def check_images(images, min_size: int = 1) -> list[np.ndarray]:
    """A list of images or a stacked ``[N, H, W, 3]`` array, validated one by one."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        raise ValueError("got a single image; wrap it in a list")
    seq = list(images)
    if not seq:
        raise ValueError("no images given")
    return [check_image(im, min_size) for im in seq]


def check_windows(X, min_size: int) -> np.ndarray:
    """Stacked square windows ``[N, S, S, 3]`` with odd ``S >= min_size``."""
    a = np.asarray(X)
    if a.ndim != 4 or a.shape[3] != 3 or a.shape[1] != a.shape[2]:
        raise ValueError(f"expected [N, S, S, 3] windows, got shape {a.shape}")
    if a.shape[1] < min_size or a.shape[1] % 2 == 0:
        raise ValueError(f"window side must be odd and >= {min_size}, got {a.shape[1]}")
    if len(a) == 0:
        raise ValueError("no samples given")
    for im in a:
        check_image(im)
    return a


def check_labels(y, n: int, name: str = "y") -> np.ndarray:
    a = np.asarray(y)
    if a.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},), got {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        if not np.all(np.equal(np.mod(a, 1), 0)):
            raise ValueError(f"{name} must hold integer labels")
        a = a.astype(np.int64)
    return a

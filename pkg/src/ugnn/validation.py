"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

import numpy as np

from .data import Volume


def check_image(image, name: str = "image") -> np.ndarray:
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be a 3-D grid, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.number) or np.issubdtype(arr.dtype, np.complexfloating):
        raise ValueError(f"{name} must be real-valued, got {arr.dtype}")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    return arr


def check_mask(mask, shape: tuple, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.shape != tuple(shape):
        raise ValueError(f"{name} shape {arr.shape} differs from image {tuple(shape)}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary")
    return arr.astype(np.uint8)


def check_threshold(t: float) -> float:
    t = float(t)
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold must lie strictly between 0 and 1, got {t}")
    return t


def as_volumes(X, y=None, require_reference: bool = False) -> list[Volume]:
    """Accept Volumes, or 3-D images with matching masks in ``y``."""
    if isinstance(X, (Volume, np.ndarray)) and (isinstance(X, Volume) or np.ndim(X) == 3):
        X = [X]
        if y is not None and np.ndim(y) == 3:
            y = [y]
    X = list(X)
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise ValueError(f"{len(X)} volumes but {len(y)} masks")
    out = []
    for i, x in enumerate(X):
        if isinstance(x, Volume):
            vol = x
            check_image(vol.image, f"volume {i}")
            if y is not None:
                vol = Volume(vol.image, vol.spacing, check_mask(y[i], vol.shape, f"mask {i}"),
                             vol.roi, vol.exclusion, vol.centreline, vol.name)
        else:
            img = check_image(x, f"image {i}").astype(np.float32)
            ref = None if y is None else check_mask(y[i], img.shape, f"mask {i}")
            vol = Volume(img, reference=ref, name=f"case{i}")
        if require_reference and vol.reference is None:
            raise ValueError(f"volume {i} has no reference mask")
        out.append(vol)
    if not out:
        raise ValueError("no volumes given")
    return out


def check_split(n: int, n_valid: int) -> None:
    if n_valid < 1 or n_valid >= n:
        raise ValueError(f"cannot hold out {n_valid} of {n} volumes for validation")


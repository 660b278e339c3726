"""Input validation helpers shared by the estimators, attacks, and CLI."""

import numpy as np
import torch


def check_image_batch(X, image_size=None, channels=None, require_multiple_of=None,
                      name="X"):
    """Validate a batch of images and return it as float32 [n, H, W, C].

    Accepts [n, H, W] (implicit single channel) or [n, H, W, C]. Pixel values
    must be finite and lie in [0, 1].
    """
    arr = np.asarray(X, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4:
        raise ValueError(
            f"{name}: expected image batch of shape [n, H, W] or [n, H, W, C], "
            f"got shape {tuple(np.shape(X))}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name}: empty batch")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite pixel values")
    lo, hi = float(arr.min()), float(arr.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"{name}: pixel values must lie in [0, 1], got [{lo}, {hi}]")
    n, h, w, c = arr.shape
    if image_size is not None and (h, w) != (image_size, image_size):
        raise ValueError(f"{name}: expected {image_size}x{image_size} images, got {h}x{w}")
    if channels is not None and c != channels:
        raise ValueError(f"{name}: expected {channels} channel(s), got {c}")
    if require_multiple_of is not None and (h % require_multiple_of or w % require_multiple_of):
        raise ValueError(
            f"{name}: spatial size {h}x{w} must be divisible by {require_multiple_of}")
    return arr


def check_labels(y, n=None, name="y"):
    """Validate integer labels, returning an int64 vector."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise ValueError(f"{name}: expected a 1-D label vector, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{name}: labels must be integers")
    arr = arr.astype(np.int64)
    if n is not None and arr.shape[0] != n:
        raise ValueError(f"{name}: {arr.shape[0]} labels for {n} samples")
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name}: labels must be non-negative")
    return arr


def to_nchw(images):
    """float32 [n, H, W, C] numpy batch -> torch tensor [n, C, H, W]."""
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2).contiguous()


def to_nhwc(tensor):
    """torch tensor [n, C, H, W] -> float32 [n, H, W, C] numpy batch."""
    return tensor.detach().permute(0, 2, 3, 1).contiguous().cpu().numpy()

"""Input validation helpers shared by the estimators and pipeline functions."""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np
import torch

GAN_IMAGE_SIZE = 64
CLASSIFIER_IMAGE_SIZE = 224


def check_uint8_images(X: Any, size: int | None = GAN_IMAGE_SIZE) -> np.ndarray:
    """Validate a stack of 8-bit RGB images laid out as ``(n, H, W, 3)``.

    A single ``(H, W, 3)`` image is promoted to a stack of one. Values must lie
    in ``[0, 255]``; float input is accepted when it is integral.
    """
    arr = np.asarray(X)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected images shaped (n, H, W, 3), got {arr.shape}")
    if size is not None and arr.shape[1:3] != (size, size):
        raise ValueError(
            f"expected {size}x{size} images, got {arr.shape[1]}x{arr.shape[2]}"
        )
    if arr.dtype != np.uint8:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        if not np.array_equal(arr, np.round(arr)):
            raise ValueError("pixel values must be integral for 8-bit input")
        arr = arr.astype(np.uint8)
    return arr


def check_unit_signed(x: torch.Tensor) -> torch.Tensor:
    if x.ndim != 4 or x.shape[1] != 3:
        raise ValueError(f"expected a (batch, 3, H, W) tensor, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError("image batch contains non-finite values")
    if x.numel() and (x.min() < -1 or x.max() > 1):
        raise ValueError("unit-signed batch has values outside [-1, 1]")
    return x


def check_labels(y: Any, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y


def check_finite(values: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(values).all():
        raise ValueError(f"{name} contains non-finite values")
    return values


def check_fraction(value: float, name: str) -> float:
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {value}")
    return float(value)


def derive_seed(*parts: Any) -> int:
    """Stable 63-bit seed from an arbitrary tuple of JSON-serialisable parts.

    Python's ``hash`` is salted per process, so it cannot be used here.
    """
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big") >> 1


def fingerprint(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]

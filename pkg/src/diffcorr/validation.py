"""Input validation helpers shared by the estimator API and the CLI."""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgument


def check_image(img, name: str = "image") -> np.ndarray:
    """Validate and canonicalize a (3, H, W) image with H, W divisible by 4."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise InvalidArgument(f"{name} must be (3, H, W), got {arr.shape}")
    _, h, w = arr.shape
    if h % 4 or w % 4:
        raise InvalidArgument(f"{name} size {h}x{w} must be divisible by 4")
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise InvalidArgument(f"{name} values must lie in [0, 1]")
    return arr


def check_image_pair(src, tgt) -> tuple[np.ndarray, np.ndarray]:
    s = check_image(src, "source image")
    t = check_image(tgt, "target image")
    if s.shape != t.shape:
        raise InvalidArgument(f"image sizes differ: {s.shape} vs {t.shape}")
    return s, t


def as_image_pairs(X) -> list[tuple[np.ndarray, np.ndarray]]:
    """Normalize predict inputs: SamplePair objects or (src, tgt) tuples."""
    pairs = []
    for item in X:
        if hasattr(item, "src") and hasattr(item, "tgt"):
            pairs.append(check_image_pair(item.src, item.tgt))
        elif isinstance(item, (tuple, list)) and len(item) == 2:
            pairs.append(check_image_pair(item[0], item[1]))
        else:
            raise InvalidArgument(
                "predict inputs must be SamplePair objects or (src, tgt) tuples"
            )
    if not pairs:
        raise InvalidArgument("need at least one image pair")
    return pairs


def as_training_pairs(X) -> list:
    """Training inputs must be SamplePair-like: images plus GT flow and mask."""
    pairs = list(X)
    if not pairs:
        raise InvalidArgument("need at least one training pair")
    for item in pairs:
        for attr in ("src", "tgt", "flow", "valid"):
            if not hasattr(item, attr):
                raise InvalidArgument(
                    f"training items must provide .{attr} (SamplePair-like)"
                )
        check_image_pair(item.src, item.tgt)
    return pairs


def check_is_fitted(estimator, attributes: tuple[str, ...]) -> None:
    missing = [a for a in attributes if getattr(estimator, a, None) is None]
    if missing:
        raise InvalidArgument(
            f"{type(estimator).__name__} is not fitted (missing {', '.join(missing)}); "
            "call fit() first"
        )

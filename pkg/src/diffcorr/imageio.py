"""Binary PPM (P6) and PGM (P5) readers/writers, 8-bit only."""

from __future__ import annotations

import numpy as np

from .errors import FormatError


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary P6."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"expected (3, H, W) image, got {img.shape}")
    _, h, w = img.shape
    data = _quantize(img).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write a (H, W) float image in [0, 1] (or bool mask) as binary P5."""
    if gray.ndim != 2:
        raise FormatError(f"expected (H, W) image, got {gray.shape}")
    h, w = gray.shape
    data = _quantize(gray.astype(np.float64)).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data)


def _read_header(raw: bytes, magic: bytes):
    if not raw.startswith(magic):
        raise FormatError(f"bad magic, expected {magic!r}")
    # header: magic, width, height, maxval as whitespace-separated tokens
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise FormatError("non-numeric header field") from exc
    if maxval != 255:
        raise FormatError(f"only 8-bit images supported, maxval={maxval}")
    return w, h, pos


def read_ppm(path) -> np.ndarray:
    """Read binary P6 into a (3, H, W) float image in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    w, h, pos = _read_header(raw, b"P6")
    need = w * h * 3
    payload = raw[pos : pos + need]
    if len(payload) != need:
        raise FormatError("truncated PPM payload")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    """Read binary P5 into a (H, W) float image in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    w, h, pos = _read_header(raw, b"P5")
    need = w * h
    payload = raw[pos : pos + need]
    if len(payload) != need:
        raise FormatError("truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0

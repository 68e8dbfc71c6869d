"""NetPBM images and CSV point lists."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


def write_netpbm(path, x) -> None:
    """Write a [-1, 1] grid as binary PGM (``(H, W)`` or ``(1, H, W)``) or PPM (``(3, H, W)``)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3 and x.shape[0] == 1:
        x = x[0]
    if x.ndim == 2:
        magic, pixels = b"P5", x
    elif x.ndim == 3 and x.shape[0] == 3:
        magic, pixels = b"P6", np.moveaxis(x, 0, -1)
    else:
        raise FormatError(f"cannot store a grid of shape {x.shape} as NetPBM")
    if np.any(np.abs(pixels) > 1):
        raise FormatError("pixel values must lie in [-1, 1]")
    data = np.round((pixels + 1.0) * 127.5).astype(np.uint8)
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(data.tobytes())


_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)"
                     rb"\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_netpbm(path) -> np.ndarray:
    """Read a binary P5/P6 file (maxval 255) back into [-1, 1]."""
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if not m:
        raise FormatError(f"{path}: malformed NetPBM header")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 is supported")
    channels = 1 if magic == b"P5" else 3
    payload = raw[m.end():]
    need = w * h * channels
    if len(payload) < need:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    data = np.frombuffer(payload[:need], dtype=np.uint8).astype(np.float64)
    img = data / 127.5 - 1.0
    if channels == 1:
        return img.reshape(h, w)
    return np.moveaxis(img.reshape(h, w, 3), -1, 0)


def write_points_csv(path, pts, header=None) -> None:
    """One point per line with 17 significant digits (lossless for float64)."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.size and not np.all(np.isfinite(pts)):
        raise FormatError("points must be finite")
    with open(path, "w") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for row in pts.reshape(len(pts), -1) if pts.size else []:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def read_points_csv(path) -> np.ndarray:
    """Parse a point CSV; a non-numeric first line is taken as a header."""
    rows = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            try:
                row = [float(f) for f in fields]
            except ValueError:
                if lineno == 1 and not rows:
                    continue
                raise FormatError(f"{path}:{lineno}: cannot parse {line!r}") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise FormatError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            rows.append(row)
    if not rows:
        return np.zeros((0, 0))
    return np.array(rows, dtype=np.float64)

"""Dependency-free static exports: SVG scatter plots and PPM/PGM images."""
from __future__ import annotations

import numpy as np

from .preprocess import unwhiten


def _color(v):
    # blue -> white -> red
    v = float(np.clip(v, 0.0, 1.0))
    if v < 0.5:
        t = v / 0.5
        return int(40 + 215 * t), int(90 + 165 * t), 255
    t = (v - 0.5) / 0.5
    return 255, int(255 - 200 * t), int(255 - 215 * t)


def svg_scatter(xy, values, path, title="", size=400, radius=1.6):
    xy = np.asarray(xy, dtype=float)
    values = np.asarray(values, dtype=float)
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 10
    pts = pad + (xy - lo) / span * (size - 2 * pad)
    vlo, vhi = values.min(), values.max()
    norm = (values - vlo) / (vhi - vlo) if vhi > vlo else np.full(len(values), 0.5)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20}">',
        f'<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{pad}" y="{size + 14}" font-size="12" font-family="sans-serif">{title}</text>',
    ]
    for (x, y), v in zip(pts, norm):
        r, g, b = _color(v)
        parts.append(
            f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="{radius}" fill="rgb({r},{g},{b})"/>'
        )
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts))


def write_pnm(image, path):
    """Write uint8 (H, W) or (H, W, 1) as PGM, (H, W, 3) as PPM."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        raise ValueError(f"cannot write image of shape {img.shape}")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def unwhitened_elements(dictionary, whitening, patch_size, channels):
    """Dictionary columns mapped back to pixel space, each rescaled into [0, 255]."""
    X = unwhiten(dictionary.elements.T, whitening)
    X = X.reshape(-1, patch_size, patch_size, channels)
    lo = X.min(axis=(1, 2, 3), keepdims=True)
    hi = X.max(axis=(1, 2, 3), keepdims=True)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    return np.clip(np.rint(255 * (X - lo) / span), 0, 255).astype(np.uint8)


def tile(patches, cols=None, pad=1):
    """Arrange (n, T, T, c) patches on a grid separated by ``pad`` white pixels."""
    n, T, _, c = patches.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    out = np.full((rows * (T + pad) + pad, cols * (T + pad) + pad, c), 255, np.uint8)
    for k in range(n):
        r, q = divmod(k, cols)
        y, x = pad + r * (T + pad), pad + q * (T + pad)
        out[y:y + T, x:x + T] = patches[k]
    return out

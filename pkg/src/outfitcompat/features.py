"""Hand-rolled image descriptors and raster I/O.

Images are ``(height, width, 3)`` uint8 arrays in RGB order.
"""

import numpy as np

__all__ = [
    "as_image",
    "color_histogram",
    "hog",
    "hadamard",
    "read_ppm",
    "write_ppm",
]


def as_image(pixels):
    img = np.asarray(pixels)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {img.shape}")
    if img.shape[0] == 0 or img.shape[1] == 0:
        raise ValueError("image has no pixels")
    if img.dtype != np.uint8:
        if np.any((img < 0) | (img > 255)):
            raise ValueError("pixel values must lie in [0, 255]")
        img = img.astype(np.uint8)
    return img


def color_histogram(img, bins=8):
    """Per-channel color histogram, channel-major (R bins, then G, then B).

    The full ``3 * bins`` vector is normalized to sum to one.
    """
    img = as_image(img)
    if bins < 1:
        raise ValueError("bins must be >= 1")
    idx = np.minimum(img.reshape(-1, 3).astype(np.int64) * bins // 256, bins - 1)
    counts = np.concatenate([np.bincount(idx[:, c], minlength=bins)
                             for c in range(3)]).astype(np.float64)
    return counts / counts.sum()


def _grayscale(img):
    rgb = img.astype(np.float64)
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def hog(img, orientations=8, cell=15):
    """Histogram of oriented gradients without block normalization.

    Unsigned orientations over [0, 180) degrees with hard, magnitude
    weighted votes.  Each cell histogram is L2 normalized on its own; cells
    without gradient energy stay zero.  Pixels past the last whole cell are
    ignored.  Layout is row-major over cells, ``orientations`` values each.
    """
    img = as_image(img)
    h, w = img.shape[:2]
    if orientations < 1 or cell < 1:
        raise ValueError("orientations and cell must be positive")
    if h < cell or w < cell:
        raise ValueError(f"image {w}x{h} smaller than one {cell}x{cell} cell")

    g = np.pad(_grayscale(img), 1, mode="edge")
    gx = (g[1:-1, 2:] - g[1:-1, :-2]) / 2.0
    gy = (g[2:, 1:-1] - g[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    angle = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    bin_idx = np.minimum((angle * orientations / 180.0).astype(np.int64),
                         orientations - 1)

    ny, nx = h // cell, w // cell
    mag = mag[:ny * cell, :nx * cell]
    bin_idx = bin_idx[:ny * cell, :nx * cell]
    cell_id = (np.arange(ny * cell)[:, None] // cell) * nx + (np.arange(nx * cell)[None, :] // cell)
    flat = (cell_id * orientations + bin_idx).ravel()
    hist = np.bincount(flat, weights=mag.ravel(), minlength=ny * nx * orientations)
    hist = hist.reshape(ny * nx, orientations)

    total = hist.sum(axis=1)
    norm = np.sqrt((hist * hist).sum(axis=1))
    out = np.zeros_like(hist)
    live = total >= 1e-12
    out[live] = hist[live] / norm[live, None]
    return out.ravel()


def hadamard(a, b):
    """Elementwise product of two equal-length vectors (or stacks of them)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"hadamard operands differ in shape: {a.shape} vs {b.shape}")
    return a * b


# -- portable pixmap ------------------------------------------------------------


def _ppm_tokens(data, count, start):
    tokens = []
    pos = start
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace() and data[end:end + 1] != b"#":
            end += 1
        if end == pos:
            raise ValueError("truncated PPM header")
        tokens.append(data[pos:end])
        pos = end
    return tokens, pos


def read_ppm(path):
    """Read a binary (P6) or ASCII (P3) portable pixmap."""
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    if magic not in (b"P6", b"P3"):
        raise ValueError(f"{path}: not a PPM file (magic {magic!r})")
    (w, h, maxval), pos = _ppm_tokens(data, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported (maxval {maxval})")
    if magic == b"P6":
        raw = data[pos + 1:pos + 1 + 3 * w * h]
        if len(raw) != 3 * w * h:
            raise ValueError(f"{path}: truncated pixel data")
        pixels = np.frombuffer(raw, dtype=np.uint8)
    else:
        pixels = np.array(data[pos:].split()[:3 * w * h], dtype=np.int64)
        if pixels.size != 3 * w * h:
            raise ValueError(f"{path}: truncated pixel data")
        pixels = pixels.astype(np.uint8)
    return pixels.reshape(h, w, 3).copy()


def write_ppm(path, img):
    img = as_image(img)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img).tobytes())

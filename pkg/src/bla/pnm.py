"""Binary PGM/PPM writing and heatmap rendering."""

from __future__ import annotations

import numpy as np

# (position, rgb) stops of the overlay colormap
RAMP = ((0.0, (0, 0, 0)), (0.5, (255, 0, 0)), (1.0, (255, 255, 0)))
ALPHA = 0.5


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def _to_bytes(pixels: np.ndarray) -> np.ndarray:
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        if np.any(pixels < 0) or np.any(pixels > 255):
            raise ValueError("pixel values must lie in 0..255")
        pixels = pixels.astype(np.uint8)
    return pixels


def encode_pgm(gray: np.ndarray) -> bytes:
    gray = _to_bytes(gray)
    if gray.ndim != 2:
        raise ValueError(f"PGM needs a 2-d array, got shape {gray.shape}")
    h, w = gray.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(gray).tobytes()


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = _to_bytes(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs an (h, w, 3) array, got shape {rgb.shape}")
    h, w, _ = rgb.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb).tobytes()


def write_pgm(path, gray: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(gray))


def write_ppm(path, rgb: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))


def read_pnm(path) -> np.ndarray:
    """Parse a binary P5/P6 file with maxval 255 (comments allowed in the header)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported anymap header {magic!r} maxval {maxval}")
    depth = 1 if magic == b"P5" else 3
    raster = np.frombuffer(blob, dtype=np.uint8, count=w * h * depth, offset=pos)
    return raster.reshape(h, w) if depth == 1 else raster.reshape(h, w, 3)


def qmap_gray(q: np.ndarray, grid: tuple) -> np.ndarray:
    """Gray levels ``round(255 * q / max q)`` on the explanation grid."""
    q = np.asarray(q, dtype=np.float64).reshape(grid)
    top = q.max()
    if top <= 0:
        return np.zeros(grid, dtype=np.uint8)
    return _round_half_up(255.0 * q / top).astype(np.uint8)


def delta_gray(delta: np.ndarray, grid: tuple) -> np.ndarray:
    return (np.asarray(delta).reshape(grid) != 0).astype(np.uint8) * 255


def colormap(t: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] through the black-red-yellow ramp to RGB bytes."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    xs = [s for s, _ in RAMP]
    channels = [np.interp(t, xs, [c[k] for _, c in RAMP]) for k in range(3)]
    return _round_half_up(np.stack(channels, axis=-1)).astype(np.uint8)


def upscale(a: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour upscaling by block repetition of the first two axes."""
    return np.repeat(np.repeat(a, factor, axis=0), factor, axis=1)


def overlay(image: np.ndarray, q: np.ndarray, grid: tuple, alpha: float = ALPHA) -> np.ndarray:
    """Blend a grayscale image in [0, 1] with the colormapped, upscaled q-map."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        image = image[..., 0]
    h, w = image.shape
    if h % grid[0] or w % grid[1] or h // grid[0] != w // grid[1]:
        raise ValueError(f"image {h}x{w} does not upscale evenly from grid {grid}")
    q = np.asarray(q, dtype=np.float64).reshape(grid)
    top = q.max()
    heat = colormap(q / top if top > 0 else q).astype(np.float64)
    heat = upscale(heat, h // grid[0])
    base = np.repeat(np.clip(image, 0.0, 1.0)[..., None] * 255.0, 3, axis=-1)
    return _round_half_up((1.0 - alpha) * base + alpha * heat).astype(np.uint8)

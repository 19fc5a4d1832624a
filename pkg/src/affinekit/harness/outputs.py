"""File writers for run outputs: manifests, CSV tables, and binary PPM images."""

from __future__ import annotations

import csv
import hashlib
import platform
import sys
from pathlib import Path

import numpy as np


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def versions() -> dict:
    import scipy

    from .. import __version__

    return {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__,
            "affinekit": __version__}


def write_manifest(out: Path, command: str, config_text: str, seeds, files, extra: dict | None = None) -> Path:
    """Plain-text record of everything needed to rerun a command."""
    lines = [f"command = {command}", f"argv = {' '.join(sys.argv)}", f"seeds = {list(seeds)}"]
    lines += [f"version.{k} = {v}" for k, v in versions().items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    for f in files:
        lines.append(f"sha256.{Path(f).name} = {sha256_file(f)}")
    lines.append("")
    lines.append("[config]")
    lines.append(config_text.rstrip())
    path = out / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def write_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return path


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to [0, 255]."""
    return np.clip(np.round((np.asarray(img, dtype=np.float64) + 1) * 127.5), 0, 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Binary P6 pixmap from an ``[H, W, 3]`` uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] array, got {rgb.shape}")
    h, w, _ = rgb.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8)[:w * h * 3].reshape(h, w, 3)


def image_rgb(img: np.ndarray) -> np.ndarray:
    """``[C, H, W]`` in [-1, 1] to ``[H, W, 3]`` uint8 (grayscale replicated, extra channels dropped)."""
    img = np.asarray(img)
    chans = img[:3] if img.shape[0] >= 3 else np.repeat(img[:1], 3, axis=0)
    return to_uint8(chans.transpose(1, 2, 0))


def tile_grid(images: np.ndarray, pad: int = 1, cols: int | None = None) -> np.ndarray:
    """Tile ``[N, C, H, W]`` images into one RGB array."""
    n = len(images)
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    _, _, h, w = images.shape
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, 3), 255, dtype=np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        grid[y:y + h, x:x + w] = image_rgb(img)
    return grid


def scatter_image(points: np.ndarray, size: int = 256, extent: float = 3.0, reference=None) -> np.ndarray:
    """Rasterise 2D points (black) over optional reference points (light red)."""
    img = np.full((size, size, 3), 255, dtype=np.uint8)

    def plot(pts, colour):
        pts = np.asarray(pts).reshape(-1, 2)
        ij = np.round((pts + extent) / (2 * extent) * (size - 1)).astype(int)
        ok = np.all((ij >= 0) & (ij < size), axis=1)
        img[size - 1 - ij[ok, 1], ij[ok, 0]] = colour

    if reference is not None:
        plot(reference, (240, 160, 160))
    plot(points, (0, 0, 0))
    return img

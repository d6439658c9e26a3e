"""IDX dataset ingestion, reconstruction metrics and image grids."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

# IDX magic: two zero bytes, dtype code (0x08 = u8), rank.
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
_GZIP_MAGIC = b"\x1f\x8b"


class IdxFormatError(ValueError):
    pass


@dataclass
class IdxDataset:
    images: np.ndarray  # (N, 1, H, W) float32 in [0, 1]
    labels: Optional[np.ndarray]
    source: tuple

    def __len__(self):
        return self.images.shape[0]

    def subset(self, n: int) -> "IdxDataset":
        labels = None if self.labels is None else self.labels[:n]
        return IdxDataset(self.images[:n], labels, self.source)


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == _GZIP_MAGIC:
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw: bytes, expected_magic: Optional[int] = None, what: str = "idx") -> np.ndarray:
    """Parse an unsigned-byte IDX payload into an array of its declared shape."""
    if len(raw) < 4:
        raise IdxFormatError(f"{what}: file too short for an IDX header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 16 != 0 or (magic >> 8) & 0xFF != 0x08:
        raise IdxFormatError(f"{what}: bad IDX magic 0x{magic:08x} (only u8 payloads supported)")
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{what}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    rank = magic & 0xFF
    header = 4 + 4 * rank
    if len(raw) < header:
        raise IdxFormatError(f"{what}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{rank}I", raw[4:header])
    expected = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) != expected:
        raise IdxFormatError(
            f"{what}: payload size mismatch, expected {expected} bytes, got {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def serialize_idx(array: np.ndarray) -> bytes:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def write_idx(path, array: np.ndarray) -> None:
    """Write a u8 array as IDX; a ``.gz`` suffix gzips the output (mtime pinned)."""
    payload = serialize_idx(array)
    path = Path(path)
    if path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def normalize(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def denormalize(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to u8 with round-half-up."""
    scaled = np.clip(np.asarray(images, dtype=np.float64), 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def load_idx(images_path, labels_path=None, transpose: bool = False) -> IdxDataset:
    """Load an MNIST-family IDX image file (plus optional labels).

    ``transpose`` swaps the two spatial axes, which EMNIST Letters needs.
    """
    pixels = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, str(images_path))
    if pixels.shape[0] == 0:
        raise IdxFormatError(f"{images_path}: dataset is empty")
    if transpose:
        pixels = pixels.transpose(0, 2, 1)
    labels = None
    if labels_path is not None:
        labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, str(labels_path))
        if labels.shape[0] != pixels.shape[0]:
            raise IdxFormatError(
                f"image/label count mismatch: {pixels.shape[0]} images vs {labels.shape[0]} labels"
            )
    images = normalize(np.ascontiguousarray(pixels))[:, None]
    return IdxDataset(images, labels, (str(images_path), str(labels_path) if labels_path else None))


# ---------------------------------------------------------------- metrics


def _check_pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _check_pair(x, y)
    return float(np.mean((x - y) ** 2))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation over the last two axes
    n = win.size
    h, w = img.shape[-2:]
    rows = sum(win[k] * img[..., k : h - n + 1 + k, :] for k in range(n))
    return sum(win[k] * rows[..., :, k : w - n + 1 + k] for k in range(n))


def ssim(x, y, data_range: float = 1.0, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over all images/channels (Gaussian window, population statistics).

    Inputs are (..., H, W); statistics are taken over the valid window positions.
    """
    x, y = _check_pair(x, y)
    if min(x.shape[-2:]) < win_size:
        raise ValueError(f"images {x.shape[-2:]} smaller than the {win_size}x{win_size} window")
    win = gaussian_window(win_size, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim_loss(x, y) -> float:
    return 1.0 - ssim(x, y)


# ---------------------------------------------------------------- images


def tile_images(images: np.ndarray, cols: Optional[int] = None) -> np.ndarray:
    """Tile (N, [1,] H, W) images into one (rows*H, cols*W) array."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[:, 0]
    n, h, w = images.shape
    if cols is None:
        cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.zeros((rows * h, cols * w), dtype=images.dtype)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h : (r + 1) * h, c * w : (c + 1) * w] = images[i]
    return grid


def save_image_grid(images, path, cols: Optional[int] = None) -> Path:
    """Write images in [0, 1] as an 8-bit grayscale grid (PNG, or PGM without Pillow)."""
    grid = denormalize(tile_images(images, cols))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        from PIL import Image
    except ImportError:
        Image = None
    if Image is None or path.suffix.lower() == ".pgm":
        path = path.with_suffix(".pgm")
        header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode()
        path.write_bytes(header + grid.tobytes())
    else:
        Image.fromarray(grid, mode="L").save(path)
    return path

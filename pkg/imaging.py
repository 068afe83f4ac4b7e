"""Raster helpers: PNG/JPEG I/O, grayscale conversion, resizing and TPS backward warping."""

import io
from pathlib import Path

import numpy as np
import numpy.typing as npt
from PIL import Image
from scipy import ndimage

from tps import TpsWarp, apply_warp, to_normalized, to_pixels

Raster = npt.NDArray[np.float32]


def load_image(path: Path) -> Raster:
    """RGB float32 in [0, 1], shape (H, W, 3)."""
    with Image.open(path) as image:
        rgb = image.convert("RGB")
        return np.asarray(rgb, dtype=np.float32) / 255.0


def load_mask(path: Path) -> np.ndarray:
    """Boolean foreground mask from an 8-bit PNG (0 background, 255 foreground)."""
    with Image.open(path) as image:
        return np.asarray(image.convert("L")) > 127


def encode_png(array: np.ndarray) -> bytes:
    """PNG bytes for a float [0, 1] RGB/gray raster or a boolean mask."""
    if array.dtype == bool:
        data = array.astype(np.uint8) * 255
    else:
        data = np.clip(np.rint(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    buffer = io.BytesIO()
    Image.fromarray(data).save(buffer, format="PNG")
    return buffer.getvalue()


def to_gray(image: np.ndarray) -> np.ndarray:
    """Linear float32 luminance; gray inputs pass through."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        return image
    return image[..., :3] @ np.array([0.2126, 0.7152, 0.0722], dtype=np.float32)


def resize_shortest_side(image: np.ndarray, side: int, mask: bool = False) -> np.ndarray:
    """Resize so min(H, W) == side with the aspect ratio intact."""
    height, width = image.shape[:2]
    scale = side / min(height, width)
    size = (max(1, round(width * scale)), max(1, round(height * scale)))
    if mask:
        pil = Image.fromarray(image.astype(np.uint8) * 255)
        return np.asarray(pil.resize(size, Image.Resampling.NEAREST)) > 127
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    resized = Image.fromarray(data).resize(size, Image.Resampling.BILINEAR)
    return np.asarray(resized, dtype=np.float32) / 255.0


def sample_bilinear(image: np.ndarray, points: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Bilinear lookup at pixel (x, y) positions; outside the raster reads `fill`."""
    coords = np.vstack([points[:, 1], points[:, 0]])
    if image.ndim == 2:
        return ndimage.map_coordinates(image, coords, order=1, mode="grid-constant", cval=fill)
    channels = [
        ndimage.map_coordinates(image[..., c], coords, order=1, mode="grid-constant", cval=fill)
        for c in range(image.shape[2])
    ]
    return np.stack(channels, axis=-1)


def pixel_lattice(width: int, height: int) -> np.ndarray:
    """All pixel centres (x, y) in row-major order."""
    ys, xs = np.mgrid[0:height, 0:width]
    return np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)


def warp_raster(image: np.ndarray, backward: TpsWarp) -> np.ndarray:
    """
    Backward-map `image` through a TPS.

    `backward` takes output (deformed-frame) normalized coordinates to input
    coordinates; pixels that land outside the input are black.
    """
    height, width = image.shape[:2]
    out_pixels = pixel_lattice(width, height)
    src = to_pixels(apply_warp(backward, to_normalized(out_pixels, width, height)), width, height)
    sampled = sample_bilinear(np.asarray(image, dtype=np.float64), src, fill=0.0)
    shape = (height, width) if image.ndim == 2 else (height, width, image.shape[2])
    return sampled.reshape(shape).astype(np.float32)


def warp_mask(mask: np.ndarray, backward: TpsWarp) -> np.ndarray:
    return warp_raster(mask.astype(np.float32), backward) >= 0.5


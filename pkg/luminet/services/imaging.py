"""ImageTensor helpers.

An ImageTensor is a float ``torch.Tensor`` of shape ``(H, W, 3)`` with values
in ``[0, 1]``. Networks work on batches ``(B, 3, H, W)`` in ``[-1, 1]``; the
helpers here are the only place that moves between the two.
"""

import hashlib
from collections.abc import Sequence
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch
from PIL import Image

from luminet.errors import DataError, ShapeError

DOWNSAMPLE_FACTOR = 8


def check_image(img: torch.Tensor, factor: int = DOWNSAMPLE_FACTOR) -> None:
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ShapeError(f"expected an H x W x 3 image, got shape {tuple(img.shape)}")
    height, width = img.shape[:2]
    if height % factor or width % factor:
        raise ShapeError(f"image {height}x{width} is not divisible by the downsample factor {factor}")
    if not torch.isfinite(img).all():
        raise ShapeError("image contains non-finite values")


def to_batch(images: torch.Tensor | Sequence[torch.Tensor]) -> torch.Tensor:
    """HWC image (or list of them) in [0, 1] -> BCHW batch in [0, 1]"""
    if isinstance(images, torch.Tensor) and images.ndim == 3:
        images = [images]
    return torch.stack([img.permute(2, 0, 1) for img in images])


def from_batch(batch: torch.Tensor) -> list[torch.Tensor]:
    return [x.permute(1, 2, 0).contiguous() for x in batch]


def to_signed(x: torch.Tensor) -> torch.Tensor:
    return x * 2.0 - 1.0


def to_unit(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


class PixelCodec:
    """Identity stand-in for a latent autoencoder.

    ``encode`` maps a [0, 1] batch to the working grid in [-1, 1] and ``decode``
    maps back. A VAE with the same two methods can replace it.
    """

    channels = 3

    def encode(self, batch: torch.Tensor) -> torch.Tensor:
        return to_signed(batch)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return to_unit(latent)


def load_image(path: str | Path | BinaryIO, size: int | None = None) -> torch.Tensor:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.Resampling.BICUBIC)
            array = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    return torch.from_numpy(array.copy())


def quantize(img: torch.Tensor) -> np.ndarray:
    return np.round(img.detach().clamp(0.0, 1.0).cpu().double().numpy() * 255.0).astype(np.uint8)


def save_image(img: torch.Tensor, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(quantize(img)).save(path, format="PNG")
    return path


def image_hash(img: torch.Tensor) -> str:
    return hashlib.sha256(quantize(img).tobytes()).hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def contact_sheet(
    panels: Sequence[torch.Tensor],
    crops: Sequence[tuple[int, int, int, int]] = (),
    gap: int = 2,
) -> Image.Image:
    """Lay panels left to right; each crop (x, y, w, h) adds a row of enlarged crops below"""
    arrays = [quantize(p) for p in panels]
    height = max(a.shape[0] for a in arrays)
    width = max(a.shape[1] for a in arrays)
    rows = 1 + len(crops)
    sheet = Image.new("RGB", (len(arrays) * (width + gap) - gap, rows * (height + gap) - gap), "white")
    for col, array in enumerate(arrays):
        tile = Image.fromarray(array)
        sheet.paste(tile, (col * (width + gap), 0))
        for row, (x, y, w, h) in enumerate(crops, start=1):
            crop = tile.crop((x, y, x + w, y + h)).resize((width, height), Image.Resampling.NEAREST)
            sheet.paste(crop, (col * (width + gap), row * (height + gap)))
    return sheet

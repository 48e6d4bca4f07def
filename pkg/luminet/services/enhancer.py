from typing import Protocol, runtime_checkable

import torch

from luminet.errors import ShapeError


@runtime_checkable
class PostEnhancer(Protocol):
    """Image -> image cleanup applied after sampling (e.g. a rectified-flow pass)"""

    def __call__(self, image: torch.Tensor) -> torch.Tensor: ...


class IdentityEnhancer:
    def __call__(self, image: torch.Tensor) -> torch.Tensor:
        return image


def apply_enhancer(enhancer: PostEnhancer | None, image: torch.Tensor) -> torch.Tensor:
    if enhancer is None:
        return image
    out = enhancer(image)
    if out.shape != image.shape:
        raise ShapeError(f"enhancer changed image shape {tuple(image.shape)} -> {tuple(out.shape)}")
    return out

"""Image size capping for real-model adapters."""

from __future__ import annotations

MAX_IMAGE_SIDE = 728


def capped_size(width: int, height: int, max_side: int = MAX_IMAGE_SIDE) -> tuple[int, int]:
    """Size with the longest side at most ``max_side``, aspect ratio preserved; never upscales."""
    if width <= 0 or height <= 0:
        raise ValueError(f"invalid image size {width}x{height}")
    longest = max(width, height)
    if longest <= max_side:
        return width, height
    scale = max_side / longest
    return max(1, round(width * scale)), max(1, round(height * scale))


def cap_image(image, max_side: int = MAX_IMAGE_SIDE):
    """Resize a PIL image so its longest side is at most ``max_side``."""
    size = capped_size(*image.size, max_side=max_side)
    if size == tuple(image.size):
        return image
    from PIL import Image

    return image.resize(size, Image.BICUBIC)

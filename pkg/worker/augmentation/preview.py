"""PNG previews of volume slices for visual inspection."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from paddit.core.logging import get_logger
from paddit.models.volumes import LabelVolume, ScalarVolume

logger = get_logger(__name__)

CONSTANT_GRAY = 128

# Label l is drawn with LABEL_COLORS[l % len(LABEL_COLORS)]; 0 is background
LABEL_COLORS = np.array(
    [
        (0, 0, 0),
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
    ],
    dtype=np.uint8,
)


def extract_slice(
    volume: ScalarVolume | LabelVolume, axis: int | None = None, index: int | None = None
) -> np.ndarray:
    """2D slice of a 3D volume (default: middle of the last axis); 2D volumes pass through."""
    data = volume.labels if isinstance(volume, LabelVolume) else volume.values
    if data.ndim == 2:
        if index not in (None, 0):
            raise ValueError(f"2D volumes have a single slice, got index {index}")
        return data
    axis = data.ndim - 1 if axis is None else axis
    if not 0 <= axis < data.ndim:
        raise ValueError(f"slice axis must be in [0, {data.ndim - 1}], got {axis}")
    size = data.shape[axis]
    index = size // 2 if index is None else index
    if not 0 <= index < size:
        raise ValueError(f"slice index must be in [0, {size - 1}] on axis {axis}, got {index}")
    return np.take(data, index, axis=axis)


def window(values: np.ndarray) -> np.ndarray:
    """Min-max window to 8 bits; a constant slice maps to mid gray."""
    low, high = float(values.min()), float(values.max())
    if high <= low:
        return np.full(values.shape, CONSTANT_GRAY, dtype=np.uint8)
    scaled = (values - low) / (high - low) * 255.0
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def render_preview(
    volume: ScalarVolume | LabelVolume,
    out_path: Path | str,
    axis: int | None = None,
    index: int | None = None,
) -> Path:
    """Write a slice as PNG: grayscale for images, a fixed color table for labels.

    The first array axis runs left to right, so the image is the transposed slice.
    """
    out_path = Path(out_path)
    plane = extract_slice(volume, axis, index).T
    if isinstance(volume, LabelVolume):
        rgb = LABEL_COLORS[np.asarray(plane) % len(LABEL_COLORS)]
        img = Image.fromarray(np.ascontiguousarray(rgb))
    else:
        img = Image.fromarray(np.ascontiguousarray(window(plane)))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    img.save(out_path, format="PNG", optimize=False, compress_level=6)
    logger.debug(f"Preview written to {out_path} ({img.width}x{img.height})")
    return out_path

"""Shared structuring elements for dilation and connectivity."""

import numpy as np
from scipy.ndimage import generate_binary_structure

_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


def ball_structure(radius: int) -> np.ndarray:
    """Euclidean ball of integer offsets with squared distance <= radius**2.

    radius 2 yields the 33-voxel element (1 center + 6 + 12 + 8 + 6 offsets).
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    r = int(radius)
    grid = np.indices((2 * r + 1,) * 3) - r
    return (grid ** 2).sum(axis=0) <= r * r


def connectivity_structure(connectivity: int) -> np.ndarray:
    """3x3x3 neighborhood for 6-, 18- or 26-connected component labeling."""
    if connectivity not in _CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])

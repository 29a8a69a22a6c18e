"""Intensity augmentation: random shallow-convnet transforms (GIN), blending
through a coarse pseudo-correlation map (IPA), and Gaussian ramp-up scheduling.

Everything is deterministic given the seed; no global random state is touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import convolve, map_coordinates

from .volume import ScalarVolume, VolumeGeometry, require_aligned


@dataclass(frozen=True)
class GinConfig:
    layers: int = 4
    kernel: int = 3
    channels: int = 2
    nonlinearity: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and positive")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")


@dataclass(frozen=True)
class RampConfig:
    ramp_epochs: int = 1000
    shape: float = 5.0

    def __post_init__(self):
        if self.ramp_epochs < 1:
            raise ValueError("ramp_epochs must be >= 1")


def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def gin_transform(vol: ScalarVolume, cfg: GinConfig | None = None) -> ScalarVolume:
    """Push the volume through a random shallow convolutional network.

    Each layer convolves with zero-mean Gaussian kernels scaled to preserve
    variance under the leaky nonlinearity; the output is rescaled back to the
    input's mean/stddev so downstream losses see normalized intensities.
    """
    cfg = cfg or GinConfig()
    rng = np.random.default_rng(cfg.seed)
    k = cfg.kernel
    slope = cfg.nonlinearity
    gain = math.sqrt(2.0 / (1.0 + slope * slope))

    feats = vol.data.astype(np.float64)[None]
    for layer in range(cfg.layers):
        out_c = cfg.channels if layer < cfg.layers - 1 else 1
        in_c = feats.shape[0]
        std = gain / math.sqrt(in_c * k ** 3)
        kernels = rng.normal(0.0, std, size=(out_c, in_c, k, k, k))
        nxt = np.zeros((out_c,) + vol.dims)
        for o in range(out_c):
            for i in range(in_c):
                nxt[o] += convolve(feats[i], kernels[o, i], mode="nearest")
        feats = _leaky(nxt, slope)

    out = feats[0]
    std = max(float(out.std()), 1e-12)
    out = (out - out.mean()) / std * vol.data.std() + vol.data.mean()
    return ScalarVolume(vol.geometry, out)


def pseudo_correlation_map(geometry: VolumeGeometry, coarse_dims=(4, 4, 4), seed=0) -> ScalarVolume:
    """Bias-field-like blending map: coarse uniform noise, trilinearly upsampled.

    Coarse corners are aligned with the volume corners, so all values are
    convex combinations of uniform [0, 1] samples.
    """
    coarse_dims = tuple(int(c) for c in coarse_dims)
    if any(c < 1 for c in coarse_dims):
        raise ValueError("coarse dims must be positive")
    if any(c > d for c, d in zip(coarse_dims, geometry.dims)):
        raise ValueError(f"coarse dims {coarse_dims} exceed volume dims {geometry.dims}")
    rng = np.random.default_rng(seed)
    coarse = rng.random(coarse_dims)
    idx = np.indices(geometry.dims, dtype=np.float64)
    coords = np.empty_like(idx)
    for a in range(3):
        d, c = geometry.dims[a], coarse_dims[a]
        scale = (c - 1) / (d - 1) if d > 1 else 0.0
        coords[a] = idx[a] * scale
    out = map_coordinates(coarse, coords, order=1, mode="nearest")
    return ScalarVolume(geometry, out)


def ipa_blend(a: ScalarVolume, b: ScalarVolume, rho: ScalarVolume) -> ScalarVolume:
    """Voxelwise convex blend rho*a + (1-rho)*b."""
    require_aligned(a, b, rho, what="blend inputs")
    r = rho.data
    if r.min() < 0 or r.max() > 1:
        raise ValueError("blending map values must lie in [0, 1]")
    return ScalarVolume(a.geometry, r * a.data + (1.0 - r) * b.data)


def rampup_weight(epoch: int, cfg: RampConfig | None = None) -> float:
    """exp(-shape * (1 - min(epoch/ramp_epochs, 1))^2); reaches 1 at ramp end."""
    cfg = cfg or RampConfig()
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    t = min(epoch / cfg.ramp_epochs, 1.0)
    return float(math.exp(-cfg.shape * (1.0 - t) ** 2))


def augment_pipeline(vol: ScalarVolume, epoch: int, seed: int,
                     gin: GinConfig | None = None, ramp: RampConfig | None = None,
                     coarse_dims=(4, 4, 4)) -> ScalarVolume:
    """Blend the input with an IPA mix of two GIN transforms.

    out = (1 - lam) * vol + lam * (rho * GIN1(vol) + (1 - rho) * GIN2(vol))
    with lam following the ramp-up curve. All randomness derives from ``seed``.
    """
    gin = gin or GinConfig()
    ramp = ramp or RampConfig()
    s1, s2, s3 = (int(s) for s in np.random.SeedSequence(seed).generate_state(3))
    lam = rampup_weight(epoch, ramp)
    g1 = gin_transform(vol, replace(gin, seed=s1))
    g2 = gin_transform(vol, replace(gin, seed=s2))
    coarse = tuple(min(c, d) for c, d in zip(coarse_dims, vol.dims))
    rho = pseudo_correlation_map(vol.geometry, coarse, seed=s3)
    blended = ipa_blend(g1, g2, rho)
    return ScalarVolume(vol.geometry, (1.0 - lam) * vol.data + lam * blended.data)

"""Synthetic training/evaluation data: blur kernels from random camera
trajectories, the mask-gated blur compositing model, sensor noise,
saturated highlight dots, and a simulated ultrawide reference view."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import convolve

from .imagecore import (
    Camera,
    CaptureMetadata,
    ImageError,
    LinearImage,
    MaskImage,
    resample_bilinear,
)

MAX_KERNEL_SUPPORT = 150  # largest allowed bounding box of nonzero weights


@dataclass
class BlurKernel:
    weights: np.ndarray  # (size, size) float32, sum 1

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        s = self.weights.shape
        if self.weights.ndim != 2 or s[0] != s[1] or s[0] % 2 == 0 or s[0] > 151:
            raise ImageError(f"bad kernel shape {s}")
        if (self.weights < 0).any():
            raise ImageError("negative kernel weight")
        if abs(float(self.weights.sum()) - 1.0) > 1e-6:
            raise ImageError("kernel weights must sum to 1")

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def support_box(self) -> tuple[int, int]:
        ys, xs = np.nonzero(self.weights)
        if len(ys) == 0:
            return (0, 0)
        return (int(ys.max() - ys.min() + 1), int(xs.max() - xs.min() + 1))


@dataclass
class TrajectoryConfig:
    num_samples: int = 2000
    nonlinearity: float = 0.5
    max_extent_px: float = 30.0
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.nonlinearity <= 1.0:
            raise ImageError("nonlinearity must be in [0, 1]")
        if self.max_extent_px > MAX_KERNEL_SUPPORT:
            raise ImageError(f"max_extent_px must be <= {MAX_KERNEL_SUPPORT}")


@dataclass
class NoiseParams:
    read_sigma: float = 0.0
    shot_gain: float = 0.0

    def __post_init__(self):
        if self.read_sigma < 0 or self.shot_gain < 0:
            raise ImageError("noise params must be >= 0")


@dataclass
class HighlightParams:
    count_range: tuple[int, int] = (1, 4)
    radius_range_px: tuple[float, float] = (1.0, 3.0)
    intensity_range: tuple[float, float] = (2.0, 5.0)
    rng_seed: int = 0

    def __post_init__(self):
        for lo, hi in (self.count_range, self.radius_range_px, self.intensity_range):
            if lo > hi:
                raise ImageError("range bounds out of order")


_INERTIA = 0.9  # velocity carry-over per step of the second-order walk


def _trajectory(cfg: TrajectoryConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.num_samples
    theta = rng.uniform(0.0, 2.0 * np.pi)
    speed = cfg.max_extent_px / n
    v0 = np.array([np.cos(theta), np.sin(theta)]) * speed
    v = v0.copy()
    accel_sigma = cfg.nonlinearity * speed * 0.5
    pos = np.zeros((n, 2))
    for i in range(1, n):
        a = rng.normal(0.0, accel_sigma, size=2) if accel_sigma > 0 else 0.0
        # inertia toward the initial velocity keeps zero-nonlinearity paths straight
        v = _INERTIA * v + (1.0 - _INERTIA) * v0 + a
        pos[i] = pos[i - 1] + v
    return pos


def sample_trajectory_kernel(cfg: TrajectoryConfig) -> BlurKernel:
    """Rasterize a seeded second-order random-walk camera trajectory into a
    normalized blur kernel via bilinear splatting."""
    if cfg.max_extent_px <= 0:
        return BlurKernel(np.ones((1, 1), dtype=np.float32))
    rng = np.random.default_rng(cfg.rng_seed)
    for _ in range(64):  # rejection-resample over-long trajectories
        pos = _trajectory(cfg, rng)
        pos = pos - pos.mean(axis=0)
        extent = float(np.abs(pos).max()) * 2.0
        if extent <= cfg.max_extent_px:
            break
    else:
        pos = pos * (cfg.max_extent_px / extent) * 0.999
    half = int(np.ceil(np.abs(pos).max())) + 1
    size = 2 * half + 1
    if size > 151:
        raise ImageError("trajectory exceeds maximum kernel size")
    k = np.zeros((size, size), dtype=np.float64)
    xs = pos[:, 0] + half
    ys = pos[:, 1] + half
    x0 = np.floor(xs).astype(int)
    y0 = np.floor(ys).astype(int)
    fx = xs - x0
    fy = ys - y0
    np.add.at(k, (y0, x0), (1 - fx) * (1 - fy))
    np.add.at(k, (y0, x0 + 1), fx * (1 - fy))
    np.add.at(k, (y0 + 1, x0), (1 - fx) * fy)
    np.add.at(k, (y0 + 1, x0 + 1), fx * fy)
    k /= k.sum()
    return BlurKernel(k.astype(np.float32))


def _convolve2(plane: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return convolve(plane.astype(np.float64), weights.astype(np.float64), mode="nearest")


def apply_blur_model(
    gt: LinearImage,
    face_mask: MaskImage,
    k: BlurKernel,
    noise: NoiseParams,
    rng_seed: int = 0,
) -> LinearImage:
    """Mask-gated blur with ghosting around the subject boundary plus
    signal-dependent Gaussian noise, clamped at zero."""
    if (gt.height, gt.width) != (face_mask.height, face_mask.width):
        raise ImageError("image / mask size mismatch")
    w = k.weights
    if k.size == 1:
        blurred = gt.data.astype(np.float64)
        m_blur = face_mask.data.astype(np.float64)
    else:
        blurred = np.stack([_convolve2(gt.data[..., c], w) for c in range(3)], axis=-1)
        m_blur = np.clip(_convolve2(face_mask.data, w), 0.0, 1.0)
    out = m_blur[..., None] * blurred + (1.0 - m_blur[..., None]) * gt.data.astype(np.float64)
    if noise.read_sigma > 0 or noise.shot_gain > 0:
        rng = np.random.default_rng(rng_seed)
        var = noise.read_sigma**2 + noise.shot_gain * np.maximum(out, 0.0)
        out = out + rng.standard_normal(out.shape) * np.sqrt(var)
    return LinearImage(np.maximum(out, 0.0).astype(np.float32))


def add_synthetic_highlights(
    gt: LinearImage, hp: HighlightParams, face_mask: MaskImage | None = None
) -> LinearImage:
    """Add anti-aliased saturated light dots (inside the face mask if given)."""
    rng = np.random.default_rng(hp.rng_seed)
    count = int(rng.integers(hp.count_range[0], hp.count_range[1] + 1))
    out = gt.data.astype(np.float64).copy()
    if count == 0:
        return LinearImage(out.astype(np.float32))
    h, w = gt.height, gt.width
    if face_mask is not None:
        cand = np.argwhere(face_mask.data > 0.5)
        if len(cand) == 0:
            return LinearImage(out.astype(np.float32))
    ys, xs = np.mgrid[0:h, 0:w]
    for _ in range(count):
        if face_mask is not None:
            cy, cx = cand[rng.integers(len(cand))]
        else:
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        radius = rng.uniform(*hp.radius_range_px)
        intensity = rng.uniform(*hp.intensity_range)
        dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
        coverage = np.clip(radius + 0.5 - dist, 0.0, 1.0)  # anti-aliased disc rim
        out += (coverage * intensity)[..., None]
    return LinearImage(out.astype(np.float32))


def simulate_uw_reference(
    gt: LinearImage,
    meta_w: CaptureMetadata,
    n_ratio: int,
    noise: NoiseParams,
    color_drift: tuple[float, float, float] = (1.0, 1.0, 1.0),
    rng_seed: int = 0,
    mu: float = 3.7,
) -> tuple[LinearImage, CaptureMetadata]:
    """Emulate the short-exposure ultrawide view: 2x downsampled, color
    drifted, noisier by sqrt(N*mu), with exposure-locked metadata."""
    if n_ratio not in (2, 4):
        raise ImageError("n_ratio must be 2 or 4")
    rng = np.random.default_rng(rng_seed)
    ref = resample_bilinear(gt, max(1, -(-gt.width // 2)), max(1, -(-gt.height // 2)))
    out = ref.data.astype(np.float64) * np.asarray(color_drift, dtype=np.float64)
    scale = np.sqrt(n_ratio * mu)
    if noise.read_sigma > 0 or noise.shot_gain > 0:
        var = (noise.read_sigma * scale) ** 2 + noise.shot_gain * scale * np.maximum(out, 0.0)
        out = out + rng.standard_normal(out.shape) * np.sqrt(var)
    ts_offset_us = int(rng.uniform(0.0, 20_000.0))
    meta_uw = CaptureMetadata(
        exposure_time_s=meta_w.exposure_time_s / n_ratio,
        sensor_gain=n_ratio * mu * meta_w.sensor_gain,
        ccm=meta_w.ccm,
        timestamp_us=meta_w.timestamp_us + ts_offset_us,
        camera=Camera.UW,
    )
    return LinearImage(np.maximum(out, 0.0).astype(np.float32)), meta_uw

"""Fallback gate: ship the fused result or revert to the source."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .imagecore import ImageError, MaskImage


class GateReason(str, Enum):
    OK = "OK"
    MOTION_TOO_SMALL = "MOTION_TOO_SMALL"
    TIMESTAMP_DESYNC = "TIMESTAMP_DESYNC"
    GAIN_TOO_HIGH = "GAIN_TOO_HIGH"
    MSE_TOO_SMALL = "MSE_TOO_SMALL"


@dataclass
class GateConfig:
    min_motion_px: float = 2.0
    max_timestamp_diff_ms: float = 20.0
    max_sensor_gain: float = 160.0
    min_masked_mse: float = 0.25  # on 255-scaled gamma codes
    mse_scale: float = 255.0

    def __post_init__(self):
        for v in (self.min_motion_px, self.max_timestamp_diff_ms, self.max_sensor_gain, self.min_masked_mse):
            if v <= 0:
                raise ImageError("gate thresholds must be > 0")


@dataclass
class GateDecision:
    use_fusion: bool
    reason: GateReason

    def __post_init__(self):
        assert (self.reason == GateReason.OK) == self.use_fusion

    def to_dict(self) -> dict:
        return {"use_fusion": self.use_fusion, "reason": self.reason.value}


def face_motion(face_centers) -> float:
    """Mean Euclidean displacement between consecutive face centers."""
    centers = list(face_centers)
    if len(centers) < 2:
        raise ImageError("need at least 2 face centers")
    dists = [
        math.hypot(x1 - x0, y1 - y0)
        for (x0, y0), (x1, y1) in zip(centers, centers[1:])
    ]
    return sum(dists) / len(dists)


def masked_mse(fused_gamma: np.ndarray, src_gamma: np.ndarray, face: MaskImage, scale: float = 255.0) -> float:
    """Face-weighted mean squared difference of gamma-encoded images.

    Codes are rescaled to [0, scale] before squaring; the squared difference
    is averaged over channels and weighted by the face mask.
    """
    if fused_gamma.shape != src_gamma.shape:
        raise ImageError("size mismatch")
    denom = float(face.data.sum())
    if denom == 0:
        raise ImageError("empty face mask")
    f = fused_gamma.astype(np.float64) / 255.0 * scale
    s = src_gamma.astype(np.float64) / 255.0 * scale
    sq = ((f - s) ** 2).mean(axis=-1)
    return float((face.data.astype(np.float64) * sq).sum() / denom)


def decide(
    motion: float,
    ts_diff_ms: float,
    gain: float,
    mse: float,
    cfg: GateConfig | None = None,
) -> GateDecision:
    """Apply the four fallback checks in order; first failure wins."""
    cfg = cfg or GateConfig()
    for v in (motion, ts_diff_ms, gain, mse):
        if not math.isfinite(v):
            raise ImageError("gate inputs must be finite")
    if motion < cfg.min_motion_px:
        return GateDecision(False, GateReason.MOTION_TOO_SMALL)
    if ts_diff_ms > cfg.max_timestamp_diff_ms:
        return GateDecision(False, GateReason.TIMESTAMP_DESYNC)
    if gain > cfg.max_sensor_gain:
        return GateDecision(False, GateReason.GAIN_TOO_HIGH)
    if mse < cfg.min_masked_mse:
        return GateDecision(False, GateReason.MSE_TOO_SMALL)
    return GateDecision(True, GateReason.OK)

"""Alpha-blend the fused face back into the source frame."""

from __future__ import annotations

import numpy as np

from .imagecore import ImageError, LinearImage, MaskImage

DEFAULT_ALPHA = 5.0  # occlusion-mask penalty
DEFAULT_BETA = 2.0  # reprojection-error penalty


def reprojection_error(src: LinearImage, ref_warped: LinearImage) -> MaskImage:
    """Channel-max absolute difference, clamped to [0, 1]."""
    if src.data.shape != ref_warped.data.shape:
        raise ImageError("size mismatch")
    diff = np.abs(src.data.astype(np.float64) - ref_warped.data.astype(np.float64))
    return MaskImage(np.clip(diff.max(axis=-1), 0.0, 1.0).astype(np.float32))


def blending_mask(
    face: MaskImage,
    occ: MaskImage,
    reproj: MaskImage,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
) -> MaskImage:
    """clamp(face - alpha*occ - beta*reproj, 0, 1): error-prone pixels fall
    back toward the source."""
    if not (face.data.shape == occ.data.shape == reproj.data.shape):
        raise ImageError("mask size mismatch")
    m = (
        face.data.astype(np.float64)
        - alpha * occ.data.astype(np.float64)
        - beta * reproj.data.astype(np.float64)
    )
    return MaskImage(np.clip(m, 0.0, 1.0).astype(np.float32))


def alpha_blend(fused: LinearImage, src: LinearImage, m: MaskImage) -> LinearImage:
    """out = m*fused + (1-m)*src; pixels with m == 0 equal the source exactly."""
    if fused.data.shape != src.data.shape or (m.height, m.width) != (src.height, src.width):
        raise ImageError("size mismatch")
    w = m.data.astype(np.float32)[..., None]
    out = np.where(w == 0.0, src.data, w * fused.data + (1.0 - w) * src.data)
    return LinearImage(out)

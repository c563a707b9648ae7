"""Reference-to-source color normalization and global mean matching."""

from __future__ import annotations

import numpy as np

from .imagecore import ImageError, LinearImage


class DegenerateReference(ImageError):
    """Reference channel mean too close to zero for division-based matching."""


def ccm_normalize(ref: LinearImage, ccm_src: np.ndarray, ccm_ref: np.ndarray):
    """Map the reference into the source camera's color space.

    Applies ccm_src^-1 @ ccm_ref per pixel.  Small negatives produced by
    wide-gamut matrices are clamped to zero; the clamp count is returned
    alongside the image.
    """
    ccm_src = np.asarray(ccm_src, dtype=np.float64).reshape(3, 3)
    ccm_ref = np.asarray(ccm_ref, dtype=np.float64).reshape(3, 3)
    if abs(np.linalg.det(ccm_src)) <= 1e-9:
        raise ImageError("ccm_src is singular")
    m = np.linalg.inv(ccm_src) @ ccm_ref
    out = ref.data.astype(np.float64) @ m.T
    clamped = int((out < 0).sum())
    out = np.maximum(out, 0.0)
    return LinearImage(out.astype(np.float32)), clamped


def match_global_mean(ref_n: LinearImage, src: LinearImage) -> LinearImage:
    """Scale each reference channel so its global mean equals the source's."""
    if ref_n.data.size == 0 or src.data.size == 0:
        raise ImageError("empty image")
    mu_ref = ref_n.data.astype(np.float64).mean(axis=(0, 1))
    mu_src = src.data.astype(np.float64).mean(axis=(0, 1))
    if (mu_ref <= 1e-9).any():
        raise DegenerateReference(f"reference channel means {mu_ref} too small")
    gains = mu_src / mu_ref
    return LinearImage((ref_n.data.astype(np.float64) * gains).astype(np.float32))


def match_colors(ref: LinearImage, src: LinearImage, ccm_src, ccm_ref) -> LinearImage:
    """Full color-matching step: CCM normalization then global mean match."""
    ref_n, _ = ccm_normalize(ref, ccm_src, ccm_ref)
    return match_global_mean(ref_n, src)

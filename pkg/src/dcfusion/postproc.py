"""Face-restricted polynomial sharpening and sRGB gamma encode."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import brentq
from scipy.special import erf

from .imagecore import ImageError, LinearImage, MaskImage

SIGMA_MIN = 0.3
SIGMA_MAX = 4.0
# Mild-deconvolution polynomial: out = c0*img + c1*G(img) + c2*G(G(img))
DEFAULT_POLY = (3.0, -3.0, 1.0)


def _luminance(img: LinearImage) -> np.ndarray:
    d = img.data.astype(np.float64)
    return 0.299 * d[..., 0] + 0.587 * d[..., 1] + 0.114 * d[..., 2]


def _step_slope(sigma: float) -> float:
    """Peak one-pixel difference of a unit step blurred by a Gaussian."""
    return float(erf(0.5 / (sigma * np.sqrt(2.0))))


def estimate_gaussian_blur(img: LinearImage, face: MaskImage) -> float:
    """Estimate an isotropic blur sigma from the sharpest edge in the face.

    Inverts the blurred-step edge response: a unit-contrast step blurred by
    G_sigma has peak adjacent-pixel difference erf(0.5 / (sigma*sqrt(2))).
    """
    sel = face.data > 0.5
    if sel.sum() < 100:
        raise ImageError("face region too small for blur estimation")
    lum = _luminance(img)
    dx = np.abs(np.diff(lum, axis=1))
    dy = np.abs(np.diff(lum, axis=0))
    slopes = np.concatenate([dx[sel[:, 1:] & sel[:, :-1]], dy[sel[1:, :] & sel[:-1, :]]])
    if slopes.size == 0:
        raise ImageError("face region too small for blur estimation")
    vals = lum[sel]
    contrast = float(np.percentile(vals, 99.5) - np.percentile(vals, 0.5))
    if contrast <= 1e-6:
        return SIGMA_MAX
    norm_slope = float(slopes.max()) / contrast
    if norm_slope >= _step_slope(0.05):
        sigma = 0.05
    elif norm_slope <= _step_slope(8.0):
        sigma = 8.0
    else:
        sigma = brentq(lambda s: _step_slope(s) - norm_slope, 0.05, 8.0)
    return float(np.clip(sigma, SIGMA_MIN, SIGMA_MAX))


def polynomial_sharpen(
    img: LinearImage,
    sigma: float,
    face: MaskImage,
    coefficients: tuple = DEFAULT_POLY,
) -> LinearImage:
    """Approximate deconvolution with a polynomial in the Gaussian blur
    operator, applied only where the face mask is nonzero."""
    if coefficients == (1.0, 0.0, 0.0):
        return img.copy()
    d = img.data.astype(np.float64)
    b1 = np.stack([gaussian_filter(d[..., c], sigma, mode="nearest") for c in range(3)], axis=-1)
    b2 = np.stack([gaussian_filter(b1[..., c], sigma, mode="nearest") for c in range(3)], axis=-1)
    sharp = coefficients[0] * d + coefficients[1] * b1 + coefficients[2] * b2
    w = face.data.astype(np.float64)[..., None]
    out = np.where(w == 0.0, img.data.astype(np.float64), w * sharp + (1.0 - w) * d)
    return LinearImage(np.maximum(out, 0.0).astype(np.float32))


def srgb_encode_value(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_decode_value(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def gamma_encode(img: LinearImage) -> np.ndarray:
    """sRGB transfer then round-half-up quantization to uint8 codes."""
    enc = srgb_encode_value(img.data.astype(np.float64))
    return np.floor(enc * 255.0 + 0.5).astype(np.uint8)


def gamma_decode(codes: np.ndarray) -> LinearImage:
    lin = srgb_decode_value(codes.astype(np.float64) / 255.0)
    return LinearImage(lin.astype(np.float32))

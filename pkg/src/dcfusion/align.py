"""Dense flow estimation at reduced resolution, flow upsampling, bilinear
warping, and the forward-backward occlusion mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, uniform_filter

from .imagecore import ImageError, LinearImage, MaskImage, _resample_plane


@dataclass
class FlowField:
    """Dense displacement map in pixels at a stated resolution scale."""

    u: np.ndarray  # (H, W) float32, x displacement
    v: np.ndarray  # (H, W) float32, y displacement
    scale: float = 1.0  # resolution relative to the source image

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float32)
        self.v = np.asarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ImageError("u/v plane mismatch")

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.u.astype(np.float64) ** 2 + self.v.astype(np.float64) ** 2)


@dataclass
class FlowEstimatorConfig:
    pyramid_levels: int = 5
    iterations_per_level: int = 4
    downsample_factor_for_estimation: int = 4
    window_px: int = 15  # odd LK aggregation window
    smooth_sigma: float = 2.0  # smoothing of per-iteration increments
    coarse_search_px: int = 8  # integer-translation capture range at the coarsest level
    max_displacement_frac: float = 0.5  # of max(w, h), sanity bound
    # Optionally replace the dense field with a robust low-order motion model
    # ("translation" or "affine").  Useful when the cameras see a rigid scene,
    # where per-pixel estimates carry independent jitter that a parametric
    # model removes.
    fit_model: str = "none"

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ImageError("pyramid_levels must be >= 1")
        if self.fit_model not in ("none", "translation", "affine"):
            raise ImageError(f"unknown fit model {self.fit_model!r}")


def _luminance(img: LinearImage) -> np.ndarray:
    d = img.data.astype(np.float64)
    return 0.299 * d[..., 0] + 0.587 * d[..., 1] + 0.114 * d[..., 2]


def _downsample2(plane: np.ndarray) -> np.ndarray:
    blurred = gaussian_filter(plane, 1.0, mode="nearest")
    h, w = plane.shape
    return _resample_plane(blurred.astype(np.float32), max(1, w // 2), max(1, h // 2)).astype(
        np.float64
    )


def _warp_plane(plane: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    ys, xs = np.mgrid[0:h, 0:w]
    coords = np.stack([ys + v, xs + u])
    return map_coordinates(plane, coords, order=1, mode="nearest")


def _lk_refine(a, b, u, v, cfg: FlowEstimatorConfig):
    """One dense inverse-warp Lucas-Kanade increment on a pyramid level."""
    size = cfg.window_px
    for _ in range(cfg.iterations_per_level):
        bw = _warp_plane(b, u, v)
        gy, gx = np.gradient(bw)
        err = a - bw
        gxx = uniform_filter(gx * gx, size, mode="nearest")
        gxy = uniform_filter(gx * gy, size, mode="nearest")
        gyy = uniform_filter(gy * gy, size, mode="nearest")
        gxe = uniform_filter(gx * err, size, mode="nearest")
        gye = uniform_filter(gy * err, size, mode="nearest")
        # Tikhonov term relative to overall gradient energy keeps the solve
        # stable on low-contrast windows without biasing textured ones
        reg = 1e-4 * float((gxx + gyy).mean()) + 1e-12
        gxx = gxx + reg
        gyy = gyy + reg
        det = gxx * gyy - gxy * gxy
        du = (gyy * gxe - gxy * gye) / det
        dv = (gxx * gye - gxy * gxe) / det
        # limit per-iteration step to the window capture range
        lim = size / 2.0
        du = np.clip(du, -lim, lim)
        dv = np.clip(dv, -lim, lim)
        if cfg.smooth_sigma > 0:
            # confidence-weighted smoothing: textured windows dominate flat ones
            conf = gxx + gyy
            sigma = cfg.smooth_sigma
            norm = gaussian_filter(conf, sigma, mode="nearest")
            du = gaussian_filter(conf * du, sigma, mode="nearest") / norm
            dv = gaussian_filter(conf * dv, sigma, mode="nearest") / norm
        u = u + du
        v = v + dv
    return u, v


def _coarse_translation(a: np.ndarray, b: np.ndarray, search: int) -> tuple[float, float]:
    """Best integer translation within +-search by SSD over the overlap."""
    h, w = a.shape
    best = (float("inf"), 0, 0)
    for dy in range(-search, search + 1):
        for dx in range(-search, search + 1):
            ax0, ax1 = max(0, -dx), min(w, w - dx)
            ay0, ay1 = max(0, -dy), min(h, h - dy)
            if ax1 - ax0 < w // 2 or ay1 - ay0 < h // 2:
                continue
            pa = a[ay0:ay1, ax0:ax1]
            pb = b[ay0 + dy : ay1 + dy, ax0 + dx : ax1 + dx]
            ssd = float(((pa - pb) ** 2).mean())
            key = (ssd, abs(dx) + abs(dy))
            if key < (best[0], abs(best[1]) + abs(best[2])):
                best = (ssd, dx, dy)
    return float(best[1]), float(best[2])


def _parametric_fit(u: np.ndarray, v: np.ndarray, model: str) -> tuple[np.ndarray, np.ndarray]:
    """Robust least-squares low-order motion model with outlier reweighting."""
    h, w = u.shape
    ys, xs = np.mgrid[0:h, 0:w]
    if model == "translation":
        basis = np.ones((h * w, 1))
    else:
        basis = np.stack(
            [np.ones(h * w), xs.ravel() / max(w, 1), ys.ravel() / max(h, 1)], axis=1
        )
    weights = np.ones(h * w)
    for _ in range(2):
        bw = basis * weights[:, None]
        coef_u, *_ = np.linalg.lstsq(bw, u.ravel() * weights, rcond=None)
        coef_v, *_ = np.linalg.lstsq(bw, v.ravel() * weights, rcond=None)
        fit_u = basis @ coef_u
        fit_v = basis @ coef_v
        resid = np.hypot(u.ravel() - fit_u, v.ravel() - fit_v)
        scale = np.median(resid) + 1e-6
        weights = 1.0 / (1.0 + (resid / (3.0 * scale)) ** 2)
    return fit_u.reshape(h, w), fit_v.reshape(h, w)


def estimate_flow(a: LinearImage, b: LinearImage, cfg: FlowEstimatorConfig | None = None) -> FlowField:
    """Coarse-to-fine pyramidal LK flow such that b(x + f(x)) ~ a(x).

    Estimation runs on luminance downsampled by cfg.downsample_factor_for_estimation;
    the returned field is at that reduced resolution (see upsample_flow).
    """
    cfg = cfg or FlowEstimatorConfig()
    if (a.width, a.height) != (b.width, b.height):
        raise ImageError("images must be the same size")
    la, lb = _luminance(a), _luminance(b)
    factor = cfg.downsample_factor_for_estimation
    while factor > 1:
        la, lb = _downsample2(la), _downsample2(lb)
        factor //= 2
    if min(la.shape) < 8:
        raise ImageError("image too small for the flow pyramid")
    # keep the coarsest level at >= 8 px on a side
    levels = min(cfg.pyramid_levels, int(np.log2(min(la.shape) / 8)) + 1)
    pyr_a, pyr_b = [la], [lb]
    for _ in range(levels - 1):
        pyr_a.append(_downsample2(pyr_a[-1]))
        pyr_b.append(_downsample2(pyr_b[-1]))
    u = np.zeros_like(pyr_a[-1])
    v = np.zeros_like(pyr_a[-1])
    if cfg.coarse_search_px > 0:
        dx, dy = _coarse_translation(pyr_a[-1], pyr_b[-1], cfg.coarse_search_px)
        u += dx
        v += dy
    for lvl in range(levels - 1, -1, -1):
        if u.shape != pyr_a[lvl].shape:
            h, w = pyr_a[lvl].shape
            u = _resample_plane(u.astype(np.float32), w, h).astype(np.float64) * 2.0
            v = _resample_plane(v.astype(np.float32), w, h).astype(np.float64) * 2.0
        u, v = _lk_refine(pyr_a[lvl], pyr_b[lvl], u, v, cfg)
    if cfg.fit_model != "none":
        u, v = _parametric_fit(u, v, cfg.fit_model)
    scale = 1.0 / cfg.downsample_factor_for_estimation
    max_disp = cfg.max_displacement_frac * max(a.width, a.height) * scale
    u = np.clip(u, -max_disp, max_disp)
    v = np.clip(v, -max_disp, max_disp)
    return FlowField(u.astype(np.float32), v.astype(np.float32), scale=scale)


def upsample_flow(f: FlowField, to_w: int, to_h: int) -> FlowField:
    """Bilinear flow upsampling; displacement values scale with resolution."""
    if to_w < f.width or to_h < f.height:
        raise ImageError("target must be >= source resolution")
    ratio = to_w / f.width
    u = _resample_plane(f.u, to_w, to_h) * ratio
    v = _resample_plane(f.v, to_w, to_h) * (to_h / f.height)
    return FlowField(u, v, scale=f.scale * ratio)


def warp(img: LinearImage, f: FlowField) -> LinearImage:
    """Backward bilinear sampling: out(x) = img(x + f(x)), edge-clamped."""
    if (f.width, f.height) != (img.width, img.height):
        raise ImageError("flow must be at image resolution; upsample first")
    out = np.stack(
        [_warp_plane(img.data[..., c].astype(np.float64), f.u, f.v) for c in range(3)],
        axis=-1,
    )
    return LinearImage(out.astype(np.float32))


def warp_mask(mask: MaskImage, f: FlowField) -> MaskImage:
    if (f.width, f.height) != (mask.width, mask.height):
        raise ImageError("flow must be at mask resolution")
    out = _warp_plane(mask.data.astype(np.float64), f.u, f.v)
    return MaskImage(np.clip(out, 0.0, 1.0).astype(np.float32))


def occlusion_mask(f_fwd: FlowField, f_bwd: FlowField, s: float = 2.0) -> MaskImage:
    """Forward-backward consistency: round-trip each pixel through both flows
    and map the Euclidean return distance through min(s * d, 1)."""
    if (f_fwd.width, f_fwd.height) != (f_bwd.width, f_bwd.height):
        raise ImageError("flow fields must match in resolution")
    h, w = f_fwd.height, f_fwd.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    xf = xs + f_fwd.u
    yf = ys + f_fwd.v
    # bilinear lookup of the backward flow at the forward-mapped positions
    bu = map_coordinates(f_bwd.u.astype(np.float64), [yf, xf], order=1, mode="nearest")
    bv = map_coordinates(f_bwd.v.astype(np.float64), [yf, xf], order=1, mode="nearest")
    dist = np.sqrt((xf + bu - xs) ** 2 + (yf + bv - ys) ** 2)
    return MaskImage(np.minimum(s * dist, 1.0).astype(np.float32))


def save_flow(path, f: FlowField) -> None:
    """Serialize as a stacked two-plane grayscale PFM (u above v)."""
    from .imagecore import _write_pfm_array

    _write_pfm_array(path, np.concatenate([f.u, f.v], axis=0))


def load_flow(path, scale: float = 1.0) -> FlowField:
    from .imagecore import _read_pfm_array

    planes = _read_pfm_array(path)
    h = planes.shape[0] // 2
    return FlowField(planes[:h], planes[h:], scale=scale)

"""Linear image / mask data model, PFM and PNG I/O, resampling, ROI geometry."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter


class ImageError(ValueError):
    """Raised on malformed files or invalid image data."""


class Camera(str, Enum):
    W = "W"
    UW = "UW"


@dataclass
class LinearImage:
    """Planar linear-RGB float32 image, 1.0 = diffuse white, values >= 0."""

    data: np.ndarray  # (H, W, 3) float32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ImageError(f"expected (H, W, 3) array, got {self.data.shape}")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def validate(self) -> "LinearImage":
        if not np.isfinite(self.data).all():
            bad = np.argwhere(~np.isfinite(self.data))[0]
            raise ImageError(f"non-finite pixel at (y={bad[0]}, x={bad[1]}, c={bad[2]})")
        if (self.data < 0).any():
            bad = np.argwhere(self.data < 0)[0]
            raise ImageError(f"negative pixel at (y={bad[0]}, x={bad[1]}, c={bad[2]})")
        return self

    def copy(self) -> "LinearImage":
        return LinearImage(self.data.copy())


@dataclass
class MaskImage:
    """Single-channel float32 map with every value in [0, 1]."""

    data: np.ndarray  # (H, W) float32

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ImageError(f"expected (H, W) array, got {self.data.shape}")

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def validate(self) -> "MaskImage":
        if not np.isfinite(self.data).all():
            raise ImageError("non-finite mask value")
        if (self.data < 0).any() or (self.data > 1).any():
            raise ImageError("mask value outside [0, 1]")
        return self

    def copy(self) -> "MaskImage":
        return MaskImage(self.data.copy())


@dataclass
class CaptureMetadata:
    """Per-shot exposure settings and calibration."""

    exposure_time_s: float
    sensor_gain: float
    ccm: np.ndarray  # 3x3 row-major
    timestamp_us: int
    camera: Camera = Camera.W

    def __post_init__(self):
        self.ccm = np.asarray(self.ccm, dtype=np.float64).reshape(3, 3)
        self.camera = Camera(self.camera)
        if self.exposure_time_s <= 0:
            raise ImageError("exposure_time_s must be > 0")
        if self.sensor_gain < 1:
            raise ImageError("sensor_gain must be >= 1")
        if abs(np.linalg.det(self.ccm)) <= 1e-9:
            raise ImageError("ccm is singular")

    def to_dict(self) -> dict:
        return {
            "exposure_time_s": self.exposure_time_s,
            "sensor_gain": self.sensor_gain,
            "ccm": self.ccm.reshape(-1).tolist(),
            "timestamp_us": int(self.timestamp_us),
            "camera": self.camera.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CaptureMetadata":
        return cls(
            exposure_time_s=d["exposure_time_s"],
            sensor_gain=d["sensor_gain"],
            ccm=np.asarray(d["ccm"], dtype=np.float64).reshape(3, 3),
            timestamp_us=d["timestamp_us"],
            camera=Camera(d["camera"]),
        )


@dataclass
class FaceBox:
    """Axis-aligned face rectangle given by center and size in pixels."""

    center_x: float
    center_y: float
    width: float
    height: float

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ImageError("degenerate face box")

    def to_dict(self) -> dict:
        return {
            "center_x": self.center_x,
            "center_y": self.center_y,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaceBox":
        return cls(d["center_x"], d["center_y"], d["width"], d["height"])


# ---------------------------------------------------------------------------
# PFM I/O.  Header "PF\n<w> <h>\n-1.0\n" (color) or "Pf" (grayscale),
# raw little-endian float32, bottom-up row order.  Round trips are bit-exact.
# ---------------------------------------------------------------------------

def _read_pfm_array(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise ImageError(f"{path}: bad PFM magic {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise ImageError(f"{path}: bad PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        if scale >= 0:
            raise ImageError(f"{path}: big-endian PFM not supported (scale {scale})")
        channels = 3 if magic == b"PF" else 1
        raw = f.read(w * h * channels * 4)
        if len(raw) != w * h * channels * 4:
            raise ImageError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(raw, dtype="<f4").reshape(h, w, channels)
    arr = arr[::-1]  # bottom-up storage
    if np.isnan(arr).any():
        bad = np.argwhere(np.isnan(arr))[0]
        raise ImageError(f"{path}: NaN pixel at (y={bad[0]}, x={bad[1]})")
    return arr[..., 0] if channels == 1 else arr


def _write_pfm_array(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 2:
        magic, payload = b"Pf", arr[::-1]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic, payload = b"PF", arr[::-1]
    else:
        raise ImageError(f"cannot write PFM of shape {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(payload).tobytes())


def read_image(path, fmt: str | None = None) -> LinearImage:
    """Read a PFM or 16-bit linear PNG as a LinearImage."""
    path = Path(path)
    if fmt is None:
        fmt = "PFM" if path.suffix.lower() == ".pfm" else "PNG16_LINEAR"
    if fmt == "PFM":
        arr = _read_pfm_array(path)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
        return LinearImage(arr).validate()
    if fmt == "PNG16_LINEAR":
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise ImageError(f"{path}: unreadable PNG")
        if raw.ndim == 2:
            raw = np.repeat(raw[..., None], 3, axis=2)
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
        denom = 65535.0 if raw.dtype == np.uint16 else 255.0
        return LinearImage(raw.astype(np.float32) / denom).validate()
    raise ImageError(f"unknown format {fmt}")


def write_image(path, img: LinearImage) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        _write_pfm_array(path, img.data)
    else:
        codes = np.clip(np.floor(img.data * 65535.0 + 0.5), 0, 65535).astype(np.uint16)
        cv2.imwrite(str(path), cv2.cvtColor(codes, cv2.COLOR_RGB2BGR))


def read_mask(path) -> MaskImage:
    arr = _read_pfm_array(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return MaskImage(arr).validate()


def write_mask(path, mask: MaskImage) -> None:
    _write_pfm_array(path, mask.data)


# ---------------------------------------------------------------------------
# Resampling and geometry.
# ---------------------------------------------------------------------------

def _resample_plane(plane: np.ndarray, new_w: int, new_h: int) -> np.ndarray:
    h, w = plane.shape
    # Half-pixel (area-centered) sample positions, edge-clamped.
    xs = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    ys = (np.arange(new_h) + 0.5) * (h / new_h) - 0.5
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = np.clip(xs - x0, 0.0, 1.0)
    fy = np.clip(ys - y0, 0.0, 1.0)
    p = plane.astype(np.float64)
    top = p[y0[:, None], x0[None, :]] * (1 - fx) + p[y0[:, None], x1[None, :]] * fx
    bot = p[y1[:, None], x0[None, :]] * (1 - fx) + p[y1[:, None], x1[None, :]] * fx
    out = top * (1 - fy[:, None]) + bot * fy[:, None]
    return out.astype(np.float32)


def resample_bilinear(img: LinearImage, new_w: int, new_h: int) -> LinearImage:
    """Edge-clamped bilinear resize with half-pixel sample alignment."""
    if new_w < 1 or new_h < 1:
        raise ImageError("target size must be >= 1")
    out = np.stack(
        [_resample_plane(img.data[..., c], new_w, new_h) for c in range(3)], axis=-1
    )
    return LinearImage(out)


def resample_mask(mask: MaskImage, new_w: int, new_h: int) -> MaskImage:
    if new_w < 1 or new_h < 1:
        raise ImageError("target size must be >= 1")
    out = np.clip(_resample_plane(mask.data, new_w, new_h), 0.0, 1.0)
    return MaskImage(out)


def compute_fusion_roi(
    face: FaceBox,
    img_w: int,
    img_h: int,
    cap: int = 512,
    scale: float = 1.75,
    tile: int = 64,
) -> FaceBox:
    """Scale the face box about its center, round sides up to the tile size,
    then shift/clip so the box stays inside the image with size preserved."""
    w = scale * face.width
    h = scale * face.height
    w = min(math.ceil(w / tile) * tile, cap, img_w)
    h = min(math.ceil(h / tile) * tile, cap, img_h)
    left = face.center_x - w / 2.0
    top = face.center_y - h / 2.0
    left = min(max(left, 0.0), img_w - w)
    top = min(max(top, 0.0), img_h - h)
    return FaceBox(center_x=left + w / 2.0, center_y=top + h / 2.0, width=w, height=h)


def crop(img: LinearImage, roi: FaceBox) -> LinearImage:
    x0 = int(round(roi.center_x - roi.width / 2))
    y0 = int(round(roi.center_y - roi.height / 2))
    return LinearImage(img.data[y0 : y0 + int(roi.height), x0 : x0 + int(roi.width)])


def smooth_mask(mask: MaskImage, sigma_px: float) -> MaskImage:
    """Gaussian-smooth mask boundaries; sigma 0 is the identity."""
    if sigma_px < 0:
        raise ImageError("sigma_px must be >= 0")
    if sigma_px == 0:
        return mask.copy()
    out = gaussian_filter(mask.data.astype(np.float64), sigma_px, mode="nearest", truncate=3.0)
    return MaskImage(np.clip(out, 0.0, 1.0).astype(np.float32))


def ellipse_face_mask(box: FaceBox, img_w: int, img_h: int) -> MaskImage:
    """Soft elliptical mask inscribed in a face box, for synthetic runs."""
    ys, xs = np.mgrid[0:img_h, 0:img_w]
    nx = (xs - box.center_x) / (box.width / 2.0)
    ny = (ys - box.center_y) / (box.height / 2.0)
    r = np.sqrt(nx * nx + ny * ny)
    mask = np.clip(1.0 - (r - 0.9) / 0.2, 0.0, 1.0)  # soft rim between r=0.9 and 1.1
    return MaskImage(mask.astype(np.float32))


def load_manifest(path) -> dict:
    """Load the JSON sidecar carrying FaceBox and CaptureMetadata records."""
    with open(path) as f:
        d = json.load(f)
    out = dict(d)
    if "face_box" in d:
        out["face_box"] = FaceBox.from_dict(d["face_box"])
    for key in ("source", "reference"):
        if key in d:
            out[key] = CaptureMetadata.from_dict(d[key])
    return out


def save_manifest(path, manifest: dict) -> None:
    enc = {}
    for k, v in manifest.items():
        if isinstance(v, (FaceBox, CaptureMetadata)):
            enc[k] = v.to_dict()
        else:
            enc[k] = v
    with open(path, "w") as f:
        json.dump(enc, f, indent=2, sort_keys=True)

"""Discrete-event simulation of adaptive dual-camera streaming and capture
synchronization: SVM motion gating, ultrawide activation delay, AE exposure
locking, software timestamp sync, and dual ZSL ring-buffer pairing."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .imagecore import Camera, CaptureMetadata, ImageError

DEFAULT_MU = 3.7  # W/UW sensitivity synchronization ratio at ISO100
PAIRING_TOLERANCE_US = 20_000


@dataclass
class MotionFeatures:
    avg_face_flow: float
    max_flow: float
    avg_face_gradient: float
    exposure_time_s: float
    sensor_gain: float

    def vector(self) -> np.ndarray:
        return np.array(
            [
                self.avg_face_flow,
                self.max_flow,
                self.avg_face_gradient,
                self.exposure_time_s,
                self.sensor_gain,
            ],
            dtype=np.float64,
        )


@dataclass
class SvmModel:
    weights: np.ndarray  # 5 floats
    bias: float
    feature_means: np.ndarray
    feature_stds: np.ndarray

    def decision_value(self, f: MotionFeatures) -> float:
        z = (f.vector() - self.feature_means) / self.feature_stds
        return float(self.weights @ z + self.bias)


@dataclass
class FrameEvent:
    camera: Camera
    timestamp_us: int
    frame_index: int
    exposure_time_s: float = 1 / 120
    gain: float = 100.0


class RingBuffer:
    """Fixed-capacity FIFO of frames; oldest entries are evicted first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ImageError("capacity must be >= 1")
        self.capacity = capacity
        self.entries: deque[FrameEvent] = deque()

    def push(self, frame: FrameEvent) -> None:
        if self.entries and frame.timestamp_us <= self.entries[-1].timestamp_us:
            raise ImageError("timestamps must be strictly increasing per camera")
        if len(self.entries) == self.capacity:
            self.entries.popleft()
        self.entries.append(frame)

    def __len__(self) -> int:
        return len(self.entries)

    def nearest(self, timestamp_us: int) -> FrameEvent:
        if not self.entries:
            raise ImageError("empty ring buffer")
        # ties break toward the earlier frame
        return min(self.entries, key=lambda e: (abs(e.timestamp_us - timestamp_us), e.timestamp_us))


# ---------------------------------------------------------------------------
# Linear SVM trained by subgradient descent on the hinge loss.
# ---------------------------------------------------------------------------

def svm_train(samples, c: float = 1.0, epochs: int = 200, seed: int = 0) -> SvmModel:
    """Standardize features, then minimize hinge loss + L2 (lambda = 1/(c*n))."""
    feats = np.array([f.vector() for f, _ in samples], dtype=np.float64)
    labels = np.array([1.0 if y else -1.0 for _, y in samples])
    if len(set(labels.tolist())) < 2:
        raise ImageError("need samples from both classes")
    means = feats.mean(axis=0)
    stds = feats.std(axis=0)
    stds[stds <= 1e-12] = 1.0
    x = (feats - means) / stds
    n = len(labels)
    lam = 1.0 / (c * n)
    rng = np.random.default_rng(seed)
    w = np.zeros(x.shape[1])
    b = 0.0
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in order:
            t += 1
            lr = 1.0 / (lam * t)
            margin = labels[i] * (w @ x[i] + b)
            w *= 1.0 - lr * lam
            if margin < 1.0:
                w += lr * labels[i] * x[i]
                b += lr * labels[i] * 0.1
    return SvmModel(weights=w, bias=b, feature_means=means, feature_stds=stds)


def svm_predict(model: SvmModel, f: MotionFeatures) -> bool:
    """True = enable the ultrawide camera; boundary ties favor enabling."""
    return model.decision_value(f) >= 0.0


# ---------------------------------------------------------------------------
# Auto-exposure synchronization.
# ---------------------------------------------------------------------------

def ae_sync(meta_w: CaptureMetadata, n: int, mu: float = DEFAULT_MU) -> CaptureMetadata:
    """Lock UW exposure N times shorter and match total exposure via mu:
    t_uw = t_w / N, gain_uw = N * mu * gain_w, so TET_uw = mu * TET_w."""
    if n not in (2, 4):
        raise ImageError("n must be 2 or 4")
    if mu <= 0:
        raise ImageError("mu must be > 0")
    return CaptureMetadata(
        exposure_time_s=meta_w.exposure_time_s / n,
        sensor_gain=n * mu * meta_w.sensor_gain,
        ccm=meta_w.ccm,
        timestamp_us=meta_w.timestamp_us,
        camera=Camera.UW,
    )


# ---------------------------------------------------------------------------
# Session simulation.
# ---------------------------------------------------------------------------

@dataclass
class SessionConfig:
    delay_frames: int = 7
    cooldown_frames: int = 15
    fps: float = 30.0
    ring_capacity: int = 8


@dataclass
class SessionReport:
    num_frames: int
    uw_active_frames: int
    duty_cycle: float
    presses: list = field(default_factory=list)  # per-press outcome dicts
    missed: int = 0
    fused: int = 0
    fallback: int = 0
    uw_activations: list = field(default_factory=list)  # first active frame indices
    active_trace: list = field(default_factory=list)  # per-frame 0/1 UW streaming

    def to_dict(self) -> dict:
        return {
            "num_frames": self.num_frames,
            "uw_active_frames": self.uw_active_frames,
            "duty_cycle": self.duty_cycle,
            "missed": self.missed,
            "fused": self.fused,
            "fallback": self.fallback,
            "uw_activations": self.uw_activations,
            "presses": self.presses,
        }


def simulate_session(
    scenario: dict, model: SvmModel, cfg: SessionConfig | None = None
) -> SessionReport:
    """Run the adaptive-streaming loop over a scripted scenario.

    scenario: {"frames": [per-frame MotionFeatures dicts], "shutter_frames": [ints]}
    The classifier decides on frame t; UW starts streaming at t + delay_frames
    and stops after cooldown_frames consecutive negatives.
    """
    cfg = cfg or SessionConfig()
    frames = scenario.get("frames")
    if not frames:
        raise ImageError("scenario has no frames")
    presses = sorted(scenario.get("shutter_frames", []))
    frame_us = int(round(1e6 / cfg.fps))
    w_ring = RingBuffer(cfg.ring_capacity)
    uw_ring = RingBuffer(cfg.ring_capacity)
    uw_active = False
    pending_start = None  # frame index at which UW begins streaming
    negatives = 0
    active_frames = 0
    activations = []
    press_iter = iter(presses)
    next_press = next(press_iter, None)
    report_presses = []
    active_trace = []
    for t, rec in enumerate(frames):
        feats = MotionFeatures(**rec) if isinstance(rec, dict) else rec
        ts = t * frame_us
        w_ring.push(FrameEvent(Camera.W, ts, t, feats.exposure_time_s, feats.sensor_gain))
        active_trace.append(1 if uw_active else 0)
        if uw_active:
            uw_ring.push(FrameEvent(Camera.UW, ts + 3000, t, feats.exposure_time_s, feats.sensor_gain))
            active_frames += 1
        enable = svm_predict(model, feats)
        if enable:
            negatives = 0
            if not uw_active and pending_start is None:
                pending_start = t + cfg.delay_frames
        else:
            negatives += 1
            if uw_active and negatives >= cfg.cooldown_frames:
                uw_active = False
            if not uw_active:
                pending_start = None
        if pending_start is not None and t + 1 >= pending_start:
            uw_active = True
            activations.append(pending_start)
            pending_start = None
        while next_press is not None and next_press == t:
            shutter_us = ts
            outcome = {"frame": t}
            pair = zsl_pair(w_ring, uw_ring, shutter_us) if len(uw_ring) else None
            if pair is None:
                outcome["result"] = "missed"
            else:
                outcome["result"] = "fused"
                outcome["delta_us"] = abs(pair[0].timestamp_us - pair[1].timestamp_us)
            report_presses.append(outcome)
            next_press = next(press_iter, None)
    missed = sum(1 for p in report_presses if p["result"] == "missed")
    fused = sum(1 for p in report_presses if p["result"] == "fused")
    fallback = sum(1 for p in report_presses if p["result"] == "fallback")
    return SessionReport(
        num_frames=len(frames),
        uw_active_frames=active_frames,
        duty_cycle=active_frames / len(frames),
        presses=report_presses,
        missed=missed,
        fused=fused,
        fallback=fallback,
        uw_activations=activations,
        active_trace=active_trace,
    )


def zsl_pair(w_ring: RingBuffer, uw_ring: RingBuffer, shutter_us: int):
    """Pick the W frame nearest the shutter, then the UW frame nearest the
    W frame's timestamp; None if the pair differs by more than 20 ms."""
    w_frame = w_ring.nearest(shutter_us)
    if not len(uw_ring):
        raise ImageError("empty ring buffer")
    uw_frame = uw_ring.nearest(w_frame.timestamp_us)
    if abs(uw_frame.timestamp_us - w_frame.timestamp_us) > PAIRING_TOLERANCE_US:
        return None
    return (w_frame, uw_frame)


# ---------------------------------------------------------------------------
# Software timestamp synchronization (proportional controller).
# ---------------------------------------------------------------------------

SYNC_GAIN = 0.5


def software_timestamp_sync(w_ts_us, uw_ts_us, frame_interval_us: float = 33_333.0) -> float:
    """Signed adjustment (us) to UW's next frame interval driving the W-UW
    phase difference toward zero."""
    w_ts = list(w_ts_us)
    uw_ts = list(uw_ts_us)
    if not w_ts or not uw_ts:
        raise ImageError("need at least one timestamp per camera")
    phase = (uw_ts[-1] - w_ts[-1]) % frame_interval_us
    if phase > frame_interval_us / 2:
        phase -= frame_interval_us
    return -SYNC_GAIN * phase


def simulate_phase_lock(
    initial_offset_us: float, frames: int = 30, frame_interval_us: float = 33_333.0
) -> list[float]:
    """Closed-loop trace of the phase error under the sync controller."""
    w_ts = 0.0
    uw_ts = initial_offset_us
    errors = []
    for _ in range(frames):
        adj = software_timestamp_sync([w_ts], [uw_ts], frame_interval_us)
        w_ts += frame_interval_us
        uw_ts += frame_interval_us + adj
        phase = (uw_ts - w_ts) % frame_interval_us
        if phase > frame_interval_us / 2:
            phase -= frame_interval_us
        errors.append(abs(phase))
    return errors


# ---------------------------------------------------------------------------
# Missed-capture statistics for the activation gap.
# ---------------------------------------------------------------------------

def missed_fraction_closed_form(delay_frames: int, mean_onset_to_press_frames: float) -> float:
    """First-order renewal estimate: presses landing inside the activation
    gap of an exponential onset-to-press delay."""
    return delay_frames / mean_onset_to_press_frames


def missed_fraction_monte_carlo(
    delay_frames: int, mean_onset_to_press_frames: float, n_presses: int, seed: int = 0
) -> float:
    rng = np.random.default_rng(seed)
    offsets = rng.exponential(mean_onset_to_press_frames, size=n_presses)
    return float((offsets < delay_frames).mean())


def load_scenario(path) -> dict:
    with open(path) as f:
        return json.load(f)


def save_report(path, report: SessionReport) -> None:
    with open(path, "w") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)

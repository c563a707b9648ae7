"""Full deblurring pipeline (pre-process, color match, align, fuse, blend,
post-process, gate) plus the dataset synthesis and evaluation harness."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import align, blend, colormatch, fusionnet, postproc, synth
from .gate import GateConfig, GateDecision, GateReason, decide, masked_mse
from .imagecore import (
    Camera,
    CaptureMetadata,
    FaceBox,
    ImageError,
    LinearImage,
    MaskImage,
    ellipse_face_mask,
    load_manifest,
    read_image,
    read_mask,
    resample_bilinear,
    resample_mask,
    save_manifest,
    smooth_mask,
    write_image,
    write_mask,
)


@dataclass
class PipelineConfig:
    mask_smoothing_sigma: float = 5.0
    occlusion_scale: float = 2.0
    # Rigid dual-camera displacement is well modelled by a low-order motion
    # field; the parametric fit removes per-pixel estimator jitter that would
    # otherwise leak into the occlusion mask.
    flow: align.FlowEstimatorConfig = field(
        default_factory=lambda: align.FlowEstimatorConfig(fit_model="translation")
    )
    gate: GateConfig = field(default_factory=GateConfig)
    blend_alpha: float = blend.DEFAULT_ALPHA
    blend_beta: float = blend.DEFAULT_BETA
    # ablation switches
    use_reference: bool = True
    use_occlusion_mask: bool = True
    use_mask_smoothing: bool = True
    use_polyblur: bool = True
    skip_gate: bool = False


@dataclass
class DeblurResult:
    final_codes: np.ndarray  # 8-bit sRGB output
    final_linear: LinearImage  # blended linear result before gamma
    gate: GateDecision
    intermediates: dict


def _even(img: LinearImage) -> LinearImage:
    h = img.height - img.height % 2
    w = img.width - img.width % 2
    return LinearImage(img.data[:h, :w])


def deblur(
    src: LinearImage,
    ref: LinearImage,
    meta_src: CaptureMetadata,
    meta_ref: CaptureMetadata,
    face_mask: MaskImage,
    net: fusionnet.FusionNet,
    cfg: PipelineConfig | None = None,
    face_motion_px: float = 10.0,
) -> DeblurResult:
    """Run the full fusion pipeline on one source/reference pair."""
    cfg = cfg or PipelineConfig()
    inter: dict = {}
    h, w = src.height, src.width
    if cfg.use_mask_smoothing:
        face_mask = smooth_mask(face_mask, cfg.mask_smoothing_sigma)
    inter["face_mask"] = face_mask

    # color matching in the source camera space
    ref_matched = colormatch.match_colors(ref, src, meta_src.ccm, meta_ref.ccm)

    # alignment at reduced resolution; reference first brought to source size
    ref_full = resample_bilinear(ref_matched, w, h)
    f_fwd_lr = align.estimate_flow(src, ref_full, cfg.flow)
    f_bwd_lr = align.estimate_flow(ref_full, src, cfg.flow)
    f_fwd = align.upsample_flow(f_fwd_lr, w, h)
    ref_warped = align.warp(ref_full, f_fwd)
    if cfg.use_occlusion_mask:
        occ_lr = align.occlusion_mask(f_fwd_lr, f_bwd_lr, cfg.occlusion_scale)
        occ = resample_mask(occ_lr, w, h)
    else:
        occ = MaskImage(np.zeros((h, w), dtype=np.float32))
    inter["flow_fwd"] = f_fwd_lr
    inter["flow_bwd"] = f_bwd_lr
    inter["occlusion_mask"] = occ
    inter["ref_warped"] = ref_warped

    # fusion at half-resolution reference stack
    half_w, half_h = w // 2, h // 2
    ref_half = resample_bilinear(ref_warped, half_w, half_h)
    if not cfg.use_reference:
        ref_half = LinearImage(np.zeros_like(ref_half.data))
    inputs = fusionnet.FusionInputs(
        source=src,
        reference_warped=ref_half,
        face_mask=resample_mask(face_mask, half_w, half_h),
        occlusion_mask=resample_mask(occ, half_w, half_h),
    )
    fused = fusionnet.forward(net, inputs)
    fused = LinearImage(np.maximum(fused.data, 0.0))
    inter["fused"] = fused

    # blending
    reproj = blend.reprojection_error(src, ref_warped)
    m_blend = blend.blending_mask(face_mask, occ, reproj, cfg.blend_alpha, cfg.blend_beta)
    blended = blend.alpha_blend(fused, src, m_blend)
    inter["reprojection_error"] = reproj
    inter["blending_mask"] = m_blend
    inter["blended"] = blended

    # post-processing (face-restricted sharpening, then gamma encode)
    def finish(lin: LinearImage) -> np.ndarray:
        out = lin
        if cfg.use_polyblur:
            try:
                sigma = postproc.estimate_gaussian_blur(out, face_mask)
                out = postproc.polynomial_sharpen(out, sigma, face_mask)
            except ImageError:
                pass  # face too small: skip sharpening
        return postproc.gamma_encode(out)

    fused_codes = finish(blended)
    src_codes = finish(src)

    # fallback gate
    ts_diff_ms = abs(meta_src.timestamp_us - meta_ref.timestamp_us) / 1000.0
    mse = masked_mse(fused_codes, src_codes, face_mask, cfg.gate.mse_scale)
    if cfg.skip_gate:
        decision = GateDecision(True, GateReason.OK)
    else:
        decision = decide(face_motion_px, ts_diff_ms, meta_src.sensor_gain, mse, cfg.gate)
    final_codes = fused_codes if decision.use_fusion else src_codes
    final_linear = blended if decision.use_fusion else src
    inter["masked_mse"] = mse
    return DeblurResult(final_codes, final_linear, decision, inter)


# ---------------------------------------------------------------------------
# Synthetic triplet generation.
# ---------------------------------------------------------------------------

@dataclass
class SynthesisConfig:
    count: int = 32
    size: int = 128
    seed: int = 0
    max_blur_extent_px: float = 31.0
    nonlinearity: float = 0.5
    noise: synth.NoiseParams = field(default_factory=lambda: synth.NoiseParams(0.005, 0.0005))
    with_highlights: bool = True
    color_drift_amp: float = 0.08
    n_ratio: int = 4


def _base_scene(size: int, rng: np.random.Generator) -> LinearImage:
    """Random scene with low-frequency shading plus mid-frequency structure,
    so motion blur measurably degrades it while a half-resolution view still
    carries most of the content."""
    freqs = rng.uniform(2.0, 8.0, size=(3, 4))
    phases = rng.uniform(0, 2 * np.pi, size=(3, 4, 2))
    amps = rng.uniform(0.08, 0.25, size=(3, 4))
    ys, xs = np.mgrid[0:size, 0:size] / size
    img = np.zeros((size, size, 3))
    for c in range(3):
        img[..., c] = 0.45
        for k in range(4):
            img[..., c] += amps[c, k] * np.sin(
                2 * np.pi * freqs[c, k] * (xs + phases[c, k, 0])
            ) * np.sin(2 * np.pi * freqs[c, k] * (ys + phases[c, k, 1]))
    # detail spots standing in for facial features; wide enough to survive
    # the reference camera's 2x resolution deficit
    for _ in range(24):
        cy, cx = rng.uniform(size * 0.2, size * 0.8, size=2)
        r = rng.uniform(1.5, 4.0)
        val = rng.uniform(-0.3, 0.4)
        d2 = (xs * size - cx) ** 2 + (ys * size - cy) ** 2
        img += val * np.exp(-d2 / (2 * r * r))[..., None]
    return LinearImage(np.clip(img, 0.02, 2.0).astype(np.float32))


def synthesize_triplet(cfg: SynthesisConfig, index: int) -> dict:
    """Build one gt / source / reference triplet with masks and metadata."""
    seed = cfg.seed * 100_003 + index
    rng = np.random.default_rng(seed)
    gt = _base_scene(cfg.size, rng)
    box = FaceBox(
        center_x=cfg.size / 2 + rng.uniform(-cfg.size * 0.05, cfg.size * 0.05),
        center_y=cfg.size / 2 + rng.uniform(-cfg.size * 0.05, cfg.size * 0.05),
        width=cfg.size * rng.uniform(0.45, 0.6),
        height=cfg.size * rng.uniform(0.45, 0.6),
    )
    face_mask = ellipse_face_mask(box, cfg.size, cfg.size)
    if cfg.with_highlights:
        hp = synth.HighlightParams(count_range=(1, 3), rng_seed=seed + 1)
        gt = synth.add_synthetic_highlights(gt, hp, face_mask)
    kernel = synth.sample_trajectory_kernel(
        synth.TrajectoryConfig(
            nonlinearity=cfg.nonlinearity,
            max_extent_px=rng.uniform(cfg.max_blur_extent_px * 0.4, cfg.max_blur_extent_px),
            rng_seed=seed + 2,
        )
    )
    source = synth.apply_blur_model(gt, face_mask, kernel, cfg.noise, rng_seed=seed + 3)
    meta_w = CaptureMetadata(
        exposure_time_s=1 / 120,
        sensor_gain=float(rng.uniform(50, 150)),
        ccm=np.eye(3),
        timestamp_us=1_000_000 + index * 33_333,
        camera=Camera.W,
    )
    drift = 1.0 + rng.uniform(-cfg.color_drift_amp, cfg.color_drift_amp, size=3)
    reference, meta_uw = synth.simulate_uw_reference(
        gt, meta_w, cfg.n_ratio, cfg.noise, tuple(drift), rng_seed=seed + 4
    )
    return {
        "gt": gt,
        "source": source,
        "reference": reference,
        "face_mask": face_mask,
        "kernel": kernel,
        "meta_source": meta_w,
        "meta_reference": meta_uw,
        "face_box": box,
    }


def synthesize_dataset(cfg: SynthesisConfig, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dirs = []
    for i in range(cfg.count):
        t = synthesize_triplet(cfg, i)
        d = out_dir / f"triplet_{i:04d}"
        d.mkdir(exist_ok=True)
        write_image(d / "gt.pfm", t["gt"])
        write_image(d / "source.pfm", t["source"])
        write_image(d / "reference.pfm", t["reference"])
        write_mask(d / "face_mask.pfm", t["face_mask"])
        from .imagecore import _write_pfm_array

        _write_pfm_array(d / "kernel.pfm", t["kernel"].weights)
        save_manifest(
            d / "meta.json",
            {
                "source": t["meta_source"],
                "reference": t["meta_reference"],
                "face_box": t["face_box"],
                "face_motion_px": 10.0,
            },
        )
        dirs.append(d)
    return dirs


def load_triplet(d: Path) -> dict:
    man = load_manifest(d / "meta.json")
    return {
        "gt": read_image(d / "gt.pfm"),
        "source": read_image(d / "source.pfm"),
        "reference": read_image(d / "reference.pfm"),
        "face_mask": read_mask(d / "face_mask.pfm"),
        "meta_source": man["source"],
        "meta_reference": man["reference"],
        "face_box": man["face_box"],
        "face_motion_px": man.get("face_motion_px", 10.0),
    }


# ---------------------------------------------------------------------------
# Metrics and evaluation.
# ---------------------------------------------------------------------------

def masked_psnr(a: LinearImage, b: LinearImage, mask: MaskImage) -> float:
    w = mask.data.astype(np.float64)
    denom = w.sum() * 3
    if denom == 0:
        raise ImageError("empty mask")
    err = ((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2) * w[..., None]
    mse = err.sum() / denom
    if mse <= 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def training_samples_from_triplets(
    triplets: list[dict], cfg: PipelineConfig | None = None
) -> list[tuple[fusionnet.FusionInputs, LinearImage]]:
    """Build FusionNet training pairs with the same pre-processing the
    inference path uses (color match + alignment)."""
    cfg = cfg or PipelineConfig()
    samples = []
    for t in triplets:
        src, ref, gt = t["source"], t["reference"], t["gt"]
        face = smooth_mask(t["face_mask"], cfg.mask_smoothing_sigma)
        h, w = src.height, src.width
        ref_m = colormatch.match_colors(ref, src, t["meta_source"].ccm, t["meta_reference"].ccm)
        ref_full = resample_bilinear(ref_m, w, h)
        f_fwd_lr = align.estimate_flow(src, ref_full, cfg.flow)
        f_bwd_lr = align.estimate_flow(ref_full, src, cfg.flow)
        f_fwd = align.upsample_flow(f_fwd_lr, w, h)
        ref_warped = align.warp(ref_full, f_fwd)
        occ = resample_mask(align.occlusion_mask(f_fwd_lr, f_bwd_lr, cfg.occlusion_scale), w, h)
        inputs = fusionnet.FusionInputs(
            source=src,
            reference_warped=resample_bilinear(ref_warped, w // 2, h // 2),
            face_mask=resample_mask(face, w // 2, h // 2),
            occlusion_mask=resample_mask(occ, w // 2, h // 2),
        )
        samples.append((inputs, gt))
    return samples


def evaluate(
    dataset_dir,
    net: fusionnet.FusionNet,
    cfg: PipelineConfig | None = None,
    out_dir=None,
    flow_resolution: str = "quarter",
) -> dict:
    """Run deblur over every triplet; returns per-image and aggregate metrics."""
    cfg = cfg or PipelineConfig()
    if flow_resolution == "full":
        cfg = replace(cfg, flow=replace(cfg.flow, downsample_factor_for_estimation=1))
    elif flow_resolution != "quarter":
        raise ImageError(f"unknown flow resolution {flow_resolution}")
    dirs = sorted(p for p in Path(dataset_dir).iterdir() if p.is_dir())
    if not dirs:
        raise ImageError(f"no triplets found in {dataset_dir}")
    rows = []
    for d in dirs:
        t = load_triplet(d)
        res = deblur(
            t["source"],
            t["reference"],
            t["meta_source"],
            t["meta_reference"],
            t["face_mask"],
            net,
            cfg,
            face_motion_px=t["face_motion_px"],
        )
        mask = res.intermediates["face_mask"]
        rows.append(
            {
                "name": d.name,
                "psnr_source": masked_psnr(t["source"], t["gt"], mask),
                "psnr_fused": masked_psnr(res.final_linear, t["gt"], mask),
                "masked_mse": res.intermediates["masked_mse"],
                "gate_reason": res.gate.reason.value,
            }
        )
        if out_dir is not None:
            out_dir = Path(out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            write_image(out_dir / f"{d.name}_final.pfm", res.final_linear)
    agg = {
        "mean_psnr_source": float(np.mean([r["psnr_source"] for r in rows])),
        "mean_psnr_fused": float(np.mean([r["psnr_fused"] for r in rows])),
        "mean_masked_mse": float(np.mean([r["masked_mse"] for r in rows])),
        "fusion_rate": float(np.mean([r["gate_reason"] == "OK" for r in rows])),
    }
    return {"rows": rows, "aggregate": agg}


def write_metrics_csv(path, result: dict) -> None:
    rows = result["rows"]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "psnr_source", "psnr_fused", "masked_mse", "gate_reason"])
        for r in rows:
            writer.writerow(
                [
                    r["name"],
                    f"{r['psnr_source']:.6f}",
                    f"{r['psnr_fused']:.6f}",
                    f"{r['masked_mse']:.6f}",
                    r["gate_reason"],
                ]
            )
        agg = result["aggregate"]
        writer.writerow([])
        writer.writerow(
            [
                "aggregate",
                f"{agg['mean_psnr_source']:.6f}",
                f"{agg['mean_psnr_fused']:.6f}",
                f"{agg['mean_masked_mse']:.6f}",
                f"{agg['fusion_rate']:.6f}",
            ]
        )

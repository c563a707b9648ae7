"""Top-level acceptance suite.

Each test prints a single PASS/FAIL line for its criterion; the assertions
carry the same conditions so pytest reports match the printed lines.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from dcfusion import align, colormatch, fusionnet, gate, pipeline, streamsim
from dcfusion.imagecore import CaptureMetadata, LinearImage, MaskImage

from test_align import _median_full_res_displacement, _shifted_pair
from test_fusionnet import _overfit_fixture

# Frozen end-to-end training recipe (see the repository's evaluation defaults).
E2E_EVAL = dict(count=32, size=128, seed=0, with_highlights=False)
E2E_TRAIN = dict(count=96, size=128, seed=7, with_highlights=False)
E2E_CHANNELS = (16, 32, 64)
E2E_STEPS = 3500
E2E_LR = 1.5e-3
E2E_SEED = 0
E2E_LOSS = dict(w_perceptual=0.0, w_color=0.0)


def _report(label: str, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
    assert ok, f"{label}: {detail}"


def test_01_color_matching():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        src = LinearImage(rng.uniform(0.05, 1.0, (64, 64, 3)).astype(np.float32))
        gains = rng.uniform(0.5, 2.0, 3)
        ref = LinearImage((src.data * gains).astype(np.float32))
        matched = colormatch.match_colors(ref, src, np.eye(3), np.eye(3))
        for c in range(3):
            sm = float(src.data[..., c].mean())
            mm = float(matched.data[..., c].mean())
            worst = max(worst, abs(mm - sm) / abs(sm))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 1.0
    _report(
        "01 color matching",
        ok,
        f"worst relative channel-mean error {worst:.2e} over 100 pairs in {elapsed:.2f}s",
    )


def test_02_alignment():
    # small translation
    a, b = _shifted_pair(256, 8.0, 0.0, seed=1)
    f = align.estimate_flow(a, b)
    err8 = abs(_median_full_res_displacement(f)[0] - 8.0)

    # large displacement, coarse-to-fine
    a, b = _shifted_pair(768, 300.0, 0.0, seed=3)
    f = align.estimate_flow(a, b)
    err300 = abs(_median_full_res_displacement(f)[0] - 300.0)

    # occlusion mask on perfectly consistent flows
    u = np.full((32, 32), 2.0, np.float32)
    v = np.full((32, 32), -1.0, np.float32)
    occ_max = float(
        align.occlusion_mask(align.FlowField(u, v), align.FlowField(-u, -v)).data.max()
    )

    # reduced-resolution estimation beats full resolution on a large shift
    a, b = _shifted_pair(512, 160.0, 0.0, seed=4)
    t0 = time.perf_counter()
    fq = align.estimate_flow(a, b)
    elapsed = time.perf_counter() - t0
    ff = align.estimate_flow(
        a, b, align.FlowEstimatorConfig(downsample_factor_for_estimation=1)
    )
    err_q = abs(_median_full_res_displacement(fq)[0] - 160.0)
    err_f = abs(_median_full_res_displacement(ff)[0] - 160.0)

    ok = err8 <= 0.5 and err300 <= 15.0 and occ_max < 1e-6 and err_q < err_f and elapsed < 10.0
    _report(
        "02 alignment",
        ok,
        f"8px err {err8:.3f}px; 300px err {err300:.2f}px; occlusion max {occ_max:.1e}; "
        f"reduced-res err {err_q:.2f} vs full-res {err_f:.2f}; 512^2 flow in {elapsed:.2f}s",
    )


def test_03_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for depthwise in (False, True):
        torch.manual_seed(1)
        net = fusionnet.FusionNet(channels=(3, 4, 5), depthwise=depthwise).double()
        src = LinearImage(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))
        ref = LinearImage(rng.uniform(0, 1, (4, 4, 3)).astype(np.float32))
        face = MaskImage(rng.uniform(0, 1, (4, 4)).astype(np.float32))
        occ = MaskImage(rng.uniform(0, 1, (4, 4)).astype(np.float32))
        inputs = fusionnet.FusionInputs(src, ref, face, occ)
        gt = LinearImage(rng.uniform(0, 1, (8, 8, 3)).astype(np.float32))
        cfg = fusionnet.LossConfig()
        grads = fusionnet.gradients(net, inputs, gt, cfg, dtype=torch.float64)

        def total():
            with torch.no_grad():
                s = fusionnet.to_tensor(inputs.source, torch.float64)
                out = net(s, fusionnet.ref_stack_tensor(inputs, torch.float64))
                return float(
                    fusionnet.loss_parts(
                        out, fusionnet.to_tensor(gt, torch.float64), s, cfg
                    )["total"]
                )

        eps = 1e-6
        for name, p in net.named_parameters():
            flat = p.data.view(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                orig = float(flat[idx])
                flat[idx] = orig + eps
                plus = total()
                flat[idx] = orig - eps
                minus = total()
                flat[idx] = orig
                fd = (plus - minus) / (2 * eps)
                an = float(grads[name].view(-1)[idx])
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-3))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    _report(
        "03 gradient check",
        ok,
        f"worst finite-difference relative error {worst:.1e} "
        f"(plain + depthwise layers) in {elapsed:.1f}s",
    )


def test_04_toy_overfit():
    sample = _overfit_fixture()
    # determinism of the training loop per seed
    histories = []
    for _ in range(2):
        torch.manual_seed(0)
        net = fusionnet.FusionNet(channels=(4, 8))
        histories.append(
            fusionnet.train(
                [sample], net, fusionnet.TrainConfig(steps=40, lr=1e-3, seed=5),
                fusionnet.LossConfig(w_perceptual=0, w_color=0),
            )
        )
    deterministic = histories[0] == histories[1]

    torch.manual_seed(0)
    net = fusionnet.FusionNet(channels=(16, 32, 64))
    fusionnet.train(
        [sample], net, fusionnet.TrainConfig(steps=500, lr=2e-3, seed=0),
        fusionnet.LossConfig(w_perceptual=0, w_color=0),
    )
    out = fusionnet.forward(net, sample[0])
    _, parts = fusionnet.loss(
        out, sample[1], sample[0].source, fusionnet.LossConfig(w_perceptual=0, w_color=0)
    )
    ok = parts["content"] < 0.01 and deterministic
    _report(
        "04 toy overfit",
        ok,
        f"content loss {parts['content']:.4f} after 500 steps; "
        f"training deterministic per seed: {deterministic}",
    )


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Synthesize the 32-triplet suite, train the fusion model, evaluate."""
    root = tmp_path_factory.mktemp("e2e")
    t0 = time.perf_counter()
    eval_dir = root / "suite"
    train_dir = root / "train"
    pipeline.synthesize_dataset(pipeline.SynthesisConfig(**E2E_EVAL), eval_dir)
    pipeline.synthesize_dataset(pipeline.SynthesisConfig(**E2E_TRAIN), train_dir)
    triplets = [pipeline.load_triplet(d) for d in sorted(train_dir.iterdir())]
    samples = pipeline.training_samples_from_triplets(triplets)
    torch.manual_seed(0)
    net = fusionnet.FusionNet(channels=E2E_CHANNELS)
    fusionnet.train(
        samples, net,
        fusionnet.TrainConfig(steps=E2E_STEPS, lr=E2E_LR, seed=E2E_SEED),
        fusionnet.LossConfig(**E2E_LOSS),
    )
    result = pipeline.evaluate(eval_dir, net)
    return {
        "eval_dir": eval_dir,
        "net": net,
        "result": result,
        "elapsed": time.perf_counter() - t0,
    }


def test_05_end_to_end(e2e):
    agg = e2e["result"]["aggregate"]
    gain = agg["mean_psnr_fused"] - agg["mean_psnr_source"]
    noref = pipeline.evaluate(
        e2e["eval_dir"], e2e["net"], pipeline.PipelineConfig(use_reference=False)
    )["aggregate"]
    noref_gain = noref["mean_psnr_fused"] - agg["mean_psnr_source"]
    elapsed = e2e["elapsed"]
    ok = gain >= 3.0 and noref["mean_psnr_fused"] < agg["mean_psnr_fused"] and elapsed < 300.0
    _report(
        "05 end-to-end deblurring",
        ok,
        f"masked PSNR gain {gain:.2f} dB (need >= 3.0); "
        f"no-reference gain {noref_gain:.2f} dB (strictly worse); "
        f"suite runtime {elapsed:.0f}s",
    )


def test_06_ablation_directions(tmp_path):
    # highlight-bearing suite; embedded-trained models with/without highlights
    hl_dir = tmp_path / "hl_suite"
    pipeline.synthesize_dataset(
        pipeline.SynthesisConfig(count=8, size=64, seed=21, with_highlights=True), hl_dir
    )
    dirs = sorted(hl_dir.iterdir())
    triplets = [pipeline.load_triplet(d) for d in dirs]

    def train_embedded(with_highlights: bool, w_color: float):
        scfg = pipeline.SynthesisConfig(
            count=8, size=64, seed=7, with_highlights=with_highlights
        )
        train_trips = [pipeline.synthesize_triplet(scfg, i) for i in range(8)]
        samples = pipeline.training_samples_from_triplets(train_trips)
        torch.manual_seed(0)
        net = fusionnet.FusionNet(channels=(8, 16, 32))
        fusionnet.train(
            samples, net, fusionnet.TrainConfig(steps=300, seed=0),
            fusionnet.LossConfig(w_color=w_color),
        )
        return net

    def mean_residual(net):
        # raw network output: the model-level quantity the ablation changes
        errs = []
        for t in triplets:
            res = pipeline.deblur(
                t["source"], t["reference"], t["meta_source"], t["meta_reference"],
                t["face_mask"], net, pipeline.PipelineConfig(),
                face_motion_px=t["face_motion_px"],
            )
            mask = res.intermediates["face_mask"].data.astype(np.float64)
            fused = res.intermediates["fused"].data.astype(np.float64)
            diff = (fused - t["gt"].data) ** 2
            errs.append(float((diff * mask[..., None]).sum() / (mask.sum() * 3)))
        return float(np.mean(errs))

    full_net = train_embedded(True, 1.0)
    nohl_net = train_embedded(False, 1.0)
    res_full = mean_residual(full_net)
    res_nohl = mean_residual(nohl_net)

    def color_deviation(net):
        from scipy.ndimage import gaussian_filter

        devs = []
        for t in triplets:
            res = pipeline.deblur(
                t["source"], t["reference"], t["meta_source"], t["meta_reference"],
                t["face_mask"], net, pipeline.PipelineConfig(),
                face_motion_px=t["face_motion_px"],
            )
            out = res.intermediates["fused"].data.astype(np.float64)
            src = t["source"].data.astype(np.float64)
            d = sum(
                float(np.abs(gaussian_filter(out[..., c], 8) -
                             gaussian_filter(src[..., c], 8)).mean())
                for c in range(3)
            )
            devs.append(d)
        return float(np.mean(devs))

    nocolor_net = train_embedded(True, 0.0)
    dev_full = color_deviation(full_net)
    dev_nocolor = color_deviation(nocolor_net)

    ok = res_nohl > res_full and dev_nocolor > dev_full
    _report(
        "06 ablation directions",
        ok,
        f"highlight-free model residual {res_nohl:.5f} > full {res_full:.5f}; "
        f"color-loss-free smoothed channel deviation {dev_nocolor:.5f} > full {dev_full:.5f}",
    )


def test_07_gate_thresholds():
    cfg = gate.GateConfig()
    base = dict(face_motion_px=5.0, ts_diff_ms=10.0, sensor_gain=100.0, mse=0.5)

    def ok_at(**kw):
        args = {**base, **kw}
        return gate.decide(
            args["face_motion_px"], args["ts_diff_ms"], args["sensor_gain"],
            args["mse"], cfg,
        ).use_fusion

    boundary = (
        ok_at(ts_diff_ms=20.0) and not ok_at(ts_diff_ms=20.001)
        and ok_at(sensor_gain=160.0) and not ok_at(sensor_gain=160.001)
        and ok_at(mse=0.25) and not ok_at(mse=0.2499)
        and ok_at(face_motion_px=2.0) and not ok_at(face_motion_px=1.999)
    )

    rng = np.random.default_rng(0)
    monotone = True
    for _ in range(1000):
        m = rng.uniform(0, 10)
        ts = rng.uniform(0, 40)
        g = rng.uniform(50, 300)
        e = rng.uniform(0, 0.5)
        if gate.decide(m, ts, g, e, cfg).use_fusion:
            # any move toward the safe side must keep fusion enabled
            monotone &= gate.decide(m + 1, ts * 0.5, g * 0.9, e * 2, cfg).use_fusion
    ok = boundary and monotone
    _report(
        "07 fallback gate",
        ok,
        f"boundary behaviour on both sides of 20ms/160/0.25/2px: {boundary}; "
        f"monotone over 1000 random inputs: {monotone}",
    )


def test_08_stream_simulator():
    # activation latency equals the configured delay exactly
    from test_streamsim import _model, _session_scenario

    rep = streamsim.simulate_session(
        _session_scenario(set(range(100, 160)), 200), _model(),
        streamsim.SessionConfig(delay_frames=7),
    )
    latency_ok = rep.uw_activations == [107] and rep.active_trace[106] == 0

    closed = streamsim.missed_fraction_closed_form(7, 80.0)
    mc = streamsim.missed_fraction_monte_carlo(7, 80.0, n_presses=100_000, seed=0)
    mc_ok = abs(mc - closed) < 0.02

    meta = CaptureMetadata(1 / 120, 100.0, np.eye(3), 0)
    uw = streamsim.ae_sync(meta, 4, mu=3.7)
    ae_ok = (
        uw.sensor_gain * uw.exposure_time_s
        == 3.7 * meta.sensor_gain * meta.exposure_time_s
    )

    errors = streamsim.simulate_phase_lock(10_000.0, frames=30)
    sync_ok = errors[-1] < 1000.0

    ok = latency_ok and mc_ok and ae_ok and sync_ok
    _report(
        "08 stream simulator",
        ok,
        f"activation at +7 frames: {latency_ok}; missed fraction MC {mc:.4f} vs "
        f"closed form {closed:.4f}; total-exposure identity exact: {ae_ok}; "
        f"sync error after 30 frames {errors[-1]:.0f}us",
    )


def test_09_blending_safety(e2e):
    zero_safe = True
    occ_ok = True
    checked = 0
    for d in sorted(Path(e2e["eval_dir"]).iterdir())[:8]:
        t = pipeline.load_triplet(d)
        res = pipeline.deblur(
            t["source"], t["reference"], t["meta_source"], t["meta_reference"],
            t["face_mask"], e2e["net"], pipeline.PipelineConfig(),
            face_motion_px=t["face_motion_px"],
        )
        m = res.intermediates["blending_mask"].data
        zero = m == 0.0
        if zero.any():
            blended = res.intermediates["blended"].data
            zero_safe &= bool(
                np.array_equal(blended[zero], t["source"].data[zero])
            )
        occ = res.intermediates["occlusion_mask"].data
        occ_ok &= bool((occ >= 0).all() and (occ <= 1).all())
        checked += 1
    ok = zero_safe and occ_ok and checked == 8
    _report(
        "09 blending safety",
        ok,
        f"zero-mask pixels bit-identical to source on {checked} triplets: {zero_safe}; "
        f"occlusion mask within [0,1]: {occ_ok}",
    )


def test_10_determinism(tmp_path):
    data = tmp_path / "data"
    pipeline.synthesize_dataset(
        pipeline.SynthesisConfig(count=4, size=64, seed=11), data
    )
    outputs = []
    for tag in ("a", "b"):
        out = tmp_path / tag
        r = subprocess.run(
            [sys.executable, "-m", "dcfusion.cli", "--seed", "3", "evaluate",
             "--data", str(data), "--train-steps", "40", "--train-count", "2",
             "--out", str(out)],
            capture_output=True, text=True,
        )
        assert r.returncode == 0, r.stderr
        outputs.append(out)
    csv_same = (outputs[0] / "metrics.csv").read_bytes() == (
        outputs[1] / "metrics.csv"
    ).read_bytes()
    pfm_a = sorted((outputs[0] / "finals").glob("*.pfm"))
    pfm_b = sorted((outputs[1] / "finals").glob("*.pfm"))
    pfm_same = len(pfm_a) == len(pfm_b) == 4 and all(
        a.read_bytes() == b.read_bytes() for a, b in zip(pfm_a, pfm_b)
    )
    ok = csv_same and pfm_same
    _report(
        "10 determinism",
        ok,
        f"repeated seeded evaluate: CSV byte-identical {csv_same}, "
        f"{len(pfm_a)} PFM outputs byte-identical {pfm_same}",
    )

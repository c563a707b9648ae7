"""Tests for the residual fusion network: forward oracle, gradients against
finite differences, losses, training determinism, overfitting, and
parameter serialization."""

import numpy as np
import pytest
import torch
from scipy.ndimage import map_coordinates
from scipy.signal import correlate2d

from dcfusion.imagecore import ImageError, LinearImage, MaskImage, resample_bilinear
from dcfusion.fusionnet import (
    FusionInputs,
    FusionNet,
    LossConfig,
    TrainConfig,
    forward,
    gradients,
    load_params,
    loss,
    save_params,
    to_tensor,
    train,
    zero_params,
)
from dcfusion.synth import NoiseParams, TrajectoryConfig, apply_blur_model, sample_trajectory_kernel


def _inputs(h=8, w=8, seed=0):
    rng = np.random.default_rng(seed)
    src = LinearImage(rng.uniform(0, 1, (h, w, 3)).astype(np.float32))
    ref = LinearImage(rng.uniform(0, 1, (h // 2, w // 2, 3)).astype(np.float32))
    face = MaskImage(rng.uniform(0, 1, (h // 2, w // 2)).astype(np.float32))
    occ = MaskImage(rng.uniform(0, 1, (h // 2, w // 2)).astype(np.float32))
    return FusionInputs(src, ref, face, occ)


class TestForward:
    def test_zero_params_identity_exact(self):
        net = zero_params(FusionNet(channels=(4, 8)))
        inp = _inputs()
        out = forward(net, inp)
        assert np.array_equal(out.data, inp.source.data)

    def test_indivisible_size_rejected(self):
        net = FusionNet(channels=(4, 8, 16))
        src = LinearImage(np.zeros((10, 10, 3), np.float32))
        ref = LinearImage(np.zeros((5, 5, 3), np.float32))
        m = MaskImage(np.zeros((5, 5), np.float32))
        with pytest.raises(ImageError, match="divisible"):
            net(to_tensor(src), torch.zeros(1, 5, 5, 5))
        with pytest.raises(ImageError):
            FusionInputs(src, ref, MaskImage(np.zeros((4, 4), np.float32)), m)

    def test_numpy_forward_oracle(self):
        """Re-implement the two-level forward pass with numpy primitives and
        compare against the module output."""
        torch.manual_seed(0)
        net = FusionNet(channels=(3, 5))
        inp = _inputs(8, 8, seed=1)
        expected = forward(net, inp).data

        def conv(x, weight, bias, stride=1):
            # x: (C, H, W); weight: (Cout, Cin, 3, 3)
            cout = weight.shape[0]
            h, w = x.shape[1:]
            out = np.zeros((cout, h, w), np.float64)
            for o in range(cout):
                acc = np.zeros((h, w), np.float64)
                for i in range(x.shape[0]):
                    acc += correlate2d(x[i], weight[o, i], mode="same", boundary="fill")
                out[o] = acc + bias[o]
            return out[:, ::stride, ::stride]

        def upsample2(x):
            c, h, w = x.shape
            ys = (np.arange(2 * h) + 0.5) / 2 - 0.5
            xs = (np.arange(2 * w) + 0.5) / 2 - 0.5
            gy, gx = np.meshgrid(ys, xs, indexing="ij")
            return np.stack(
                [map_coordinates(x[i], [gy, gx], order=1, mode="nearest") for i in range(c)]
            )

        sd = {k: v.detach().numpy().astype(np.float64) for k, v in net.state_dict().items()}
        relu = lambda x: np.maximum(x, 0.0)
        src = inp.source.data.transpose(2, 0, 1).astype(np.float64)
        ref = np.concatenate(
            [
                inp.reference_warped.data.transpose(2, 0, 1),
                inp.face_mask.data[None],
                inp.occlusion_mask.data[None],
            ]
        ).astype(np.float64)

        x = relu(conv(src, sd["enc_in.weight"], sd["enc_in.bias"]))
        skip0 = x
        x = relu(conv(x, sd["downs.0.weight"], sd["downs.0.bias"], stride=2))
        r = relu(conv(ref, sd["ref_in.weight"], sd["ref_in.bias"]))
        # 1x1 fusion of the reference branch
        rf = np.einsum("oi,ihw->ohw", sd["ref_fuse.weight"][:, :, 0, 0], r) + sd[
            "ref_fuse.bias"
        ][:, None, None]
        x = x + rf
        x = relu(conv(x, sd["bottom.weight"], sd["bottom.bias"]))
        x = relu(conv(x, sd["dec_a.0.weight"], sd["dec_a.0.bias"]))
        x = relu(conv(x, sd["dec_b.0.weight"], sd["dec_b.0.bias"]))
        x = upsample2(x) + skip0
        residual = conv(x, sd["out_conv.weight"], sd["out_conv.bias"])
        oracle = (residual + src).transpose(1, 2, 0)

        np.testing.assert_allclose(expected, oracle, atol=1e-5)


class TestGradients:
    @pytest.mark.parametrize("depthwise", [False, True])
    def test_matches_finite_differences(self, depthwise):
        torch.manual_seed(1)
        net = FusionNet(channels=(3, 4, 5), depthwise=depthwise).double()
        inp = _inputs(8, 8, seed=2)
        gt = LinearImage(
            np.random.default_rng(3).uniform(0, 1, (8, 8, 3)).astype(np.float32)
        )
        cfg = LossConfig()
        grads = gradients(net, inp, gt, cfg, dtype=torch.float64)

        def total_loss():
            from dcfusion.fusionnet import loss_parts, ref_stack_tensor

            with torch.no_grad():
                src = to_tensor(inp.source, torch.float64)
                out = net(src, ref_stack_tensor(inp, torch.float64))
                return float(
                    loss_parts(out, to_tensor(gt, torch.float64), src, cfg)["total"]
                )

        eps = 1e-6
        rng = np.random.default_rng(4)
        params = dict(net.named_parameters())
        for name, p in params.items():
            flat = p.data.view(-1)
            for idx in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
                orig = float(flat[idx])
                flat[idx] = orig + eps
                plus = total_loss()
                flat[idx] = orig - eps
                minus = total_loss()
                flat[idx] = orig
                fd = (plus - minus) / (2 * eps)
                an = float(grads[name].view(-1)[idx])
                denom = max(abs(fd), abs(an), 1e-3)
                assert abs(fd - an) / denom < 1e-4, f"{name}[{idx}]: fd={fd} an={an}"


class TestLoss:
    def test_zero_when_all_equal(self):
        img = LinearImage(np.random.default_rng(0).uniform(0, 1, (8, 8, 3)).astype(np.float32))
        total, parts = loss(img, img, img)
        assert total == 0.0
        assert parts == {"content": 0.0, "perceptual": 0.0, "color": 0.0}

    def test_content_is_mean_absolute_error(self):
        a = LinearImage(np.zeros((4, 4, 3), np.float32))
        b = LinearImage(np.full((4, 4, 3), 0.25, np.float32))
        _, parts = loss(a, b, a, LossConfig(w_perceptual=0, w_color=0))
        assert parts["content"] == pytest.approx(0.25, abs=1e-7)

    def test_color_zero_when_output_matches_source(self):
        rng = np.random.default_rng(1)
        out = LinearImage(rng.uniform(0, 1, (16, 16, 3)).astype(np.float32))
        gt = LinearImage(rng.uniform(0, 1, (16, 16, 3)).astype(np.float32))
        _, parts = loss(out, gt, out)
        assert parts["color"] == 0.0

    def test_constant_offset_excites_color_not_perceptual(self):
        base = np.random.default_rng(2).uniform(0.2, 0.6, (32, 32, 3)).astype(np.float32)
        out = LinearImage(base + np.float32(0.1))
        src = LinearImage(base)
        _, parts = loss(out, out, src)
        assert parts["color"] == pytest.approx(0.1, abs=1e-5)
        assert parts["perceptual"] == 0.0


def _fixture_scene(seed: int) -> LinearImage:
    """Moderately textured 32x32 gray scene: a few oriented sinusoids plus
    soft blobs, enough structure for blur to matter but memorizable quickly."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:32, 0:32] / 32.0
    img = np.full((32, 32), 0.45)
    for _ in range(3):
        f = rng.uniform(2, 5)
        a = rng.uniform(0.08, 0.15)
        th = rng.uniform(0, np.pi)
        img += a * np.sin(
            2 * np.pi * f * (xs * np.cos(th) + ys * np.sin(th)) + rng.uniform(0, 2 * np.pi)
        )
    for _ in range(6):
        cy, cx = rng.uniform(4, 28, 2)
        r = rng.uniform(2, 4)
        v = rng.uniform(-0.2, 0.3)
        img += v * np.exp(-((ys * 32 - cy) ** 2 + (xs * 32 - cx) ** 2) / (2 * r * r))
    img = np.clip(img, 0.05, 1.0)
    return LinearImage(np.repeat(img[..., None], 3, axis=2).astype(np.float32))


def _overfit_fixture():
    gt = _fixture_scene(3)
    k = sample_trajectory_kernel(
        TrajectoryConfig(nonlinearity=0.5, max_extent_px=7.0, rng_seed=5)
    )
    ones = MaskImage(np.ones((32, 32), np.float32))
    src = apply_blur_model(gt, ones, k, NoiseParams(0, 0))
    ref = resample_bilinear(gt, 16, 16)
    half = MaskImage(np.ones((16, 16), np.float32))
    occ = MaskImage(np.zeros((16, 16), np.float32))
    return FusionInputs(src, ref, half, occ), gt


class TestTraining:
    def test_deterministic_per_seed(self):
        sample = _overfit_fixture()
        runs = []
        for _ in range(2):
            torch.manual_seed(0)
            net = FusionNet(channels=(4, 8))
            hist = train([sample], net, TrainConfig(steps=30, lr=1e-3, seed=7),
                         LossConfig(w_perceptual=0, w_color=0))
            runs.append((hist, {k: v.clone() for k, v in net.state_dict().items()}))
        assert runs[0][0] == runs[1][0]
        for k in runs[0][1]:
            assert torch.equal(runs[0][1][k], runs[1][1][k])

    def test_overfits_single_sample(self):
        sample = _overfit_fixture()
        torch.manual_seed(0)
        net = FusionNet(channels=(16, 32, 64))
        train([sample], net, TrainConfig(steps=500, lr=2e-3, seed=0),
              LossConfig(w_perceptual=0, w_color=0))
        out = forward(net, sample[0])
        _, parts = loss(out, sample[1], sample[0].source,
                        LossConfig(w_perceptual=0, w_color=0))
        assert parts["content"] < 0.01

    def test_empty_dataset_rejected(self):
        with pytest.raises(ImageError):
            train([], FusionNet(channels=(4, 8)))


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        torch.manual_seed(5)
        net = FusionNet(channels=(3, 6, 9))
        p = tmp_path / "params.bin"
        save_params(p, net)
        again = load_params(p)
        assert again.channels == net.channels
        for (ka, va), (kb, vb) in zip(
            net.state_dict().items(), again.state_dict().items()
        ):
            assert ka == kb and torch.equal(va, vb)

    def test_forward_identical_after_reload(self, tmp_path):
        torch.manual_seed(6)
        net = FusionNet(channels=(4, 8))
        inp = _inputs(8, 8, seed=9)
        p = tmp_path / "params.bin"
        save_params(p, net)
        out1 = forward(net, inp)
        out2 = forward(load_params(p), inp)
        assert np.array_equal(out1.data, out2.data)

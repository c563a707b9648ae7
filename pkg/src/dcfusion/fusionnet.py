"""Residual-UNet fusion model, its losses, gradients, and a training loop.

The network consumes the full-resolution blurry source plus a half-resolution
stack of (warped reference, face mask, occlusion mask) and predicts a global
residual added to the source, so a zero-initialized model is the identity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .imagecore import ImageError, LinearImage, MaskImage

DESK_CHANNELS = (8, 16, 32)
FULL_CHANNELS = (16, 32, 64, 128, 256)  # production-scale stack; desk runs use less
# Per-scale weights of the multi-scale gradient feature extractor; the same
# weights apply when a learned extractor is plugged in.
PERCEPTUAL_LEVEL_WEIGHTS = (1 / 2.6, 1 / 4.8, 1 / 3.7, 1 / 5.6, 10 / 1.5)


@dataclass
class LossConfig:
    w_content: float = 1.0
    w_perceptual: float = 2.0
    w_color: float = 1.0
    color_sigma: float = 20.0
    perceptual_layer_weights: tuple = PERCEPTUAL_LEVEL_WEIGHTS


@dataclass
class FusionInputs:
    source: LinearImage  # (H, W)
    reference_warped: LinearImage  # (H/2, W/2)
    face_mask: MaskImage  # (H/2, W/2)
    occlusion_mask: MaskImage  # (H/2, W/2)

    def __post_init__(self):
        h, w = self.source.height, self.source.width
        half = (h // 2, w // 2)
        for name in ("reference_warped", "face_mask", "occlusion_mask"):
            x = getattr(self, name)
            if (x.height, x.width) != half:
                raise ImageError(
                    f"{name} must be half the source size {half}, got {(x.height, x.width)}"
                )


class FusionNet(nn.Module):
    """Encoder-decoder with stride-2 downsampling, bilinear upsampling,
    additive skip connections, reference injection at the second level, and
    a global residual output."""

    def __init__(self, channels=DESK_CHANNELS, depthwise: bool = False):
        super().__init__()
        self.channels = tuple(channels)
        ch = self.channels
        conv = self._dw_conv if depthwise else self._conv
        self.enc_in = conv(3, ch[0])
        self.downs = nn.ModuleList(conv(ch[i], ch[i + 1], stride=2) for i in range(len(ch) - 1))
        self.encs = nn.ModuleList(conv(ch[i + 1], ch[i + 1]) for i in range(len(ch) - 2))
        self.ref_in = conv(5, ch[1])
        self.ref_fuse = nn.Conv2d(ch[1], ch[1], 1)
        self.bottom = conv(ch[-1], ch[-1])
        self.dec_a = nn.ModuleList(conv(ch[i + 1], ch[i + 1]) for i in range(len(ch) - 1))
        self.dec_b = nn.ModuleList(conv(ch[i + 1], ch[i]) for i in range(len(ch) - 1))
        self.out_conv = nn.Conv2d(ch[0], 3, 3, padding=1)

    @staticmethod
    def _conv(cin, cout, stride=1):
        return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)

    @staticmethod
    def _dw_conv(cin, cout, stride=1):
        return nn.Sequential(
            nn.Conv2d(cin, cin, 3, stride=stride, padding=1, groups=cin),
            nn.Conv2d(cin, cout, 1),
        )

    def forward(self, source: torch.Tensor, ref_stack: torch.Tensor) -> torch.Tensor:
        if source.shape[-1] % 2 ** (len(self.channels) - 1) or source.shape[-2] % 2 ** (
            len(self.channels) - 1
        ):
            raise ImageError("input size must be divisible by the pyramid stride")
        skips = []
        x = F.relu(self.enc_in(source))
        skips.append(x)
        x = F.relu(self.downs[0](x))
        r = F.relu(self.ref_in(ref_stack))
        x = x + self.ref_fuse(r)
        for i, enc in enumerate(self.encs):
            x = F.relu(enc(x))
            skips.append(x)
            x = F.relu(self.downs[i + 1](x))
        x = F.relu(self.bottom(x))
        for lvl in range(len(self.channels) - 2, -1, -1):
            x = F.relu(self.dec_a[lvl](x))
            x = F.relu(self.dec_b[lvl](x))
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = x + skips[lvl]
        residual = self.out_conv(x)
        return residual + source


def zero_params(net: FusionNet) -> FusionNet:
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    return net


def to_tensor(img: LinearImage | MaskImage, dtype=torch.float32) -> torch.Tensor:
    d = img.data
    if d.ndim == 2:
        d = d[..., None]
    return torch.from_numpy(np.ascontiguousarray(d.transpose(2, 0, 1))[None]).to(dtype)


def from_tensor(t: torch.Tensor) -> LinearImage:
    arr = t.detach().cpu().numpy()[0].transpose(1, 2, 0).astype(np.float32)
    return LinearImage(arr)


def ref_stack_tensor(inputs: FusionInputs, dtype=torch.float32) -> torch.Tensor:
    return torch.cat(
        [
            to_tensor(inputs.reference_warped, dtype),
            to_tensor(inputs.face_mask, dtype),
            to_tensor(inputs.occlusion_mask, dtype),
        ],
        dim=1,
    )


def forward(net: FusionNet, inputs: FusionInputs) -> LinearImage:
    with torch.no_grad():
        out = net(to_tensor(inputs.source), ref_stack_tensor(inputs))
    return from_tensor(out)


# ---------------------------------------------------------------------------
# Losses.  The perceptual term uses a pluggable extractor; the default is a
# multi-scale stack of luminance and finite-difference gradients.
# ---------------------------------------------------------------------------

def gradient_pyramid_features(x: torch.Tensor, levels: int = 5) -> list[torch.Tensor]:
    lum = (
        0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3]
    )
    feats = []
    cur = lum
    for _ in range(levels):
        dx = cur[..., :, 1:] - cur[..., :, :-1]
        dy = cur[..., 1:, :] - cur[..., :-1, :]
        feats.append(torch.cat([cur.flatten(2), dx.flatten(2), dy.flatten(2)], dim=2))
        if min(cur.shape[-2:]) >= 2:
            cur = F.avg_pool2d(cur, 2, ceil_mode=True)
    return feats


def _gaussian_blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(3 * sigma))
    coords = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-(coords**2) / (2 * sigma * sigma))
    k = (k / k.sum()).to(x.device)
    c = x.shape[1]
    kx = k.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    ky = k.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    x = F.pad(x, (radius, radius, 0, 0), mode="replicate")
    x = F.conv2d(x, kx, groups=c)
    x = F.pad(x, (0, 0, radius, radius), mode="replicate")
    return F.conv2d(x, ky, groups=c)


def loss_parts(
    out: torch.Tensor,
    gt: torch.Tensor,
    src: torch.Tensor,
    cfg: LossConfig,
    feature_extractor=None,
) -> dict[str, torch.Tensor]:
    extractor = feature_extractor or gradient_pyramid_features
    content = (out - gt).abs().mean()
    fo = extractor(out)
    fg = extractor(gt)
    perceptual = sum(
        w * (a - b).abs().mean()
        for w, a, b in zip(cfg.perceptual_layer_weights, fo, fg)
    )
    color = (_gaussian_blur(out, cfg.color_sigma) - _gaussian_blur(src, cfg.color_sigma)).abs().mean()
    total = cfg.w_content * content + cfg.w_perceptual * perceptual + cfg.w_color * color
    return {"total": total, "content": content, "perceptual": perceptual, "color": color}


def loss(out: LinearImage, gt: LinearImage, src: LinearImage, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    parts = loss_parts(to_tensor(out), to_tensor(gt), to_tensor(src), cfg)
    vals = {k: float(v) for k, v in parts.items()}
    return vals.pop("total"), vals


def gradients(
    net: FusionNet,
    inputs: FusionInputs,
    gt: LinearImage,
    cfg: LossConfig | None = None,
    dtype=torch.float32,
) -> dict[str, torch.Tensor]:
    """Exact reverse-mode gradients of the total loss w.r.t. every parameter."""
    cfg = cfg or LossConfig()
    net.zero_grad(set_to_none=True)
    src = to_tensor(inputs.source, dtype)
    out = net(src, ref_stack_tensor(inputs, dtype))
    parts = loss_parts(out, to_tensor(gt, dtype), src, cfg)
    parts["total"].backward()
    return {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in net.named_parameters()
    }


# ---------------------------------------------------------------------------
# Training.
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 1e-3
    lr_min_frac: float = 0.05  # cosine decay floor as a fraction of lr
    seed: int = 0
    log_every: int = 50


def train(
    dataset: list[tuple[FusionInputs, LinearImage]],
    net: FusionNet,
    cfg: TrainConfig | None = None,
    loss_cfg: LossConfig | None = None,
    log=None,
) -> list[float]:
    """Adam with cosine-decayed learning rate; deterministic per seed.

    Returns the per-step total-loss trajectory.
    """
    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or LossConfig()
    if not dataset:
        raise ImageError("empty training dataset")
    torch.manual_seed(cfg.seed)
    torch.set_num_threads(1)
    samples = [
        (to_tensor(inp.source), ref_stack_tensor(inp), to_tensor(gt))
        for inp, gt in dataset
    ]
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    history = []
    for step in range(cfg.steps):
        frac = step / max(1, cfg.steps - 1)
        lr = cfg.lr * (
            cfg.lr_min_frac + (1 - cfg.lr_min_frac) * 0.5 * (1 + math.cos(math.pi * frac))
        )
        for g in opt.param_groups:
            g["lr"] = lr
        src, ref, gt = samples[step % len(samples)]
        opt.zero_grad(set_to_none=True)
        out = net(src, ref)
        parts = loss_parts(out, gt, src, loss_cfg)
        total = parts["total"]
        if not torch.isfinite(total):
            raise ImageError(f"training diverged at step {step}: loss {float(total)}")
        total.backward()
        opt.step()
        history.append(float(total.detach()))
        if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(f"step {step}: loss {float(total):.5f} (lr {lr:.2e})")
    return history


# ---------------------------------------------------------------------------
# Parameter serialization: JSON shape manifest + raw little-endian float32.
# ---------------------------------------------------------------------------

def save_params(path, net: FusionNet) -> None:
    path = Path(path)
    state = net.state_dict()
    manifest = {
        "channels": list(net.channels),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in state.items()],
    }
    blob = b"".join(
        v.detach().cpu().numpy().astype("<f4").tobytes() for v in state.values()
    )
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2))
    path.write_bytes(blob)


def load_params(path) -> FusionNet:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    net = FusionNet(channels=tuple(manifest["channels"]))
    blob = path.read_bytes()
    state, offset = {}, 0
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[entry["name"]] = torch.from_numpy(arr.copy())
        offset += count * 4
    net.load_state_dict(state)
    return net

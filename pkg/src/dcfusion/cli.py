"""Command-line entry points for the dual-camera deblurring toolkit."""

from __future__ import annotations

import csv
import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import align, fusionnet, pipeline, report, streamsim
from .gate import GateConfig
from .imagecore import ImageError, load_manifest, read_image, read_mask, write_mask, write_image

EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def _apply_config(obj, overrides: dict):
    fields = {f.name for f in dataclasses.fields(obj)}
    known = {k: v for k, v in overrides.items() if k in fields}
    return dataclasses.replace(obj, **known)


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _pipeline_config(conf: dict, **ablations) -> pipeline.PipelineConfig:
    cfg = pipeline.PipelineConfig()
    cfg = _apply_config(cfg, conf.get("pipeline", {}))
    cfg = dataclasses.replace(
        cfg,
        flow=_apply_config(cfg.flow, conf.get("flow", {})),
        gate=_apply_config(cfg.gate, conf.get("gate", {})),
    )
    return dataclasses.replace(cfg, **ablations)


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Global RNG seed.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="JSON file with per-module configuration overrides.")
@click.pass_context
def main(ctx, seed, config_path):
    """Dual-camera face deblurring: synthesis, training, inference, evaluation,
    and the adaptive-streaming simulator."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["config"] = _load_config(config_path)


@main.command()
@click.option("--count", type=int, default=32, show_default=True)
@click.option("--size", type=int, default=128, show_default=True)
@click.option("--no-highlights", is_flag=True, help="Disable highlight augmentation.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def synthesize(ctx, count, size, no_highlights, out_dir):
    """Generate synthetic gt/source/reference triplets."""
    cfg = pipeline.SynthesisConfig(count=count, size=size, seed=ctx.obj["seed"])
    cfg = _apply_config(cfg, ctx.obj["config"].get("synthesis", {}))
    if no_highlights:
        cfg = dataclasses.replace(cfg, with_highlights=False)
    dirs = pipeline.synthesize_dataset(cfg, out_dir)
    click.echo(f"wrote {len(dirs)} triplets to {out_dir}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--steps", type=int, default=500, show_default=True)
@click.option("--lr", type=float, default=1e-3, show_default=True)
@click.option("--channels", default="8,16,32", show_default=True)
@click.option("--no-color-loss", is_flag=True, help="Train with the color-consistency loss weight set to 0.")
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.pass_context
def train(ctx, data_dir, steps, lr, channels, no_color_loss, out_path):
    """Train FusionNet on a synthesized triplet directory."""
    conf = ctx.obj["config"]
    pcfg = _pipeline_config(conf)
    dirs = sorted(p for p in Path(data_dir).iterdir() if p.is_dir())
    if not dirs:
        raise ImageError(f"no triplets in {data_dir}")
    triplets = [pipeline.load_triplet(d) for d in dirs]
    samples = pipeline.training_samples_from_triplets(triplets, pcfg)
    import torch

    torch.manual_seed(ctx.obj["seed"])  # parameter init must follow the session seed
    net = fusionnet.FusionNet(channels=tuple(int(c) for c in channels.split(",")))
    loss_cfg = _apply_config(fusionnet.LossConfig(), conf.get("loss", {}))
    if no_color_loss:
        loss_cfg = dataclasses.replace(loss_cfg, w_color=0.0)
    tcfg = fusionnet.TrainConfig(steps=steps, lr=lr, seed=ctx.obj["seed"])
    tcfg = _apply_config(tcfg, conf.get("train", {}))
    history = fusionnet.train(samples, net, tcfg, loss_cfg, log=click.echo)
    fusionnet.save_params(out_path, net)
    report.render_loss_curve(history, Path(out_path).parent / "figures")
    click.echo(f"final loss {history[-1]:.5f}; params saved to {out_path}")


@main.command()
@click.option("--source", type=click.Path(exists=True), required=True)
@click.option("--reference", type=click.Path(exists=True), required=True)
@click.option("--manifest", type=click.Path(exists=True), required=True,
              help="JSON sidecar with source/reference metadata and face box.")
@click.option("--face-mask", "face_mask_path", type=click.Path(exists=True), required=True)
@click.option("--params", type=click.Path(exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(), required=True)
@click.option("--dump-intermediates", type=click.Path(), default=None)
@click.pass_context
def deblur(ctx, source, reference, manifest, face_mask_path, params, out_path, dump_intermediates):
    """Deblur one source image against its reference."""
    conf = ctx.obj["config"]
    cfg = _pipeline_config(conf)
    man = load_manifest(manifest)
    net = fusionnet.load_params(params)
    res = pipeline.deblur(
        read_image(source),
        read_image(reference),
        man["source"],
        man["reference"],
        read_mask(face_mask_path),
        net,
        cfg,
        face_motion_px=man.get("face_motion_px", 10.0),
    )
    import cv2

    cv2.imwrite(str(out_path), cv2.cvtColor(res.final_codes, cv2.COLOR_RGB2BGR))
    if dump_intermediates:
        dump = Path(dump_intermediates)
        dump.mkdir(parents=True, exist_ok=True)
        write_image(dump / "fused.pfm", res.intermediates["fused"])
        write_image(dump / "blended.pfm", res.intermediates["blended"])
        write_mask(dump / "occlusion_mask.pfm", res.intermediates["occlusion_mask"])
        write_mask(dump / "blending_mask.pfm", res.intermediates["blending_mask"])
        align.save_flow(dump / "flow_fwd.pfm", res.intermediates["flow_fwd"])
        (dump / "manifest.json").write_text(
            json.dumps(
                {"gate": res.gate.to_dict(), "masked_mse": res.intermediates["masked_mse"]},
                indent=2,
            )
        )
    click.echo(f"gate: {res.gate.reason.value}; wrote {out_path}")


@main.command()
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--params", type=click.Path(exists=True), default=None)
@click.option("--train-steps", type=int, default=300, show_default=True,
              help="Embedded training steps when --params is not given.")
@click.option("--train-count", type=int, default=8, show_default=True,
              help="Embedded training set size when --params is not given.")
@click.option("--no-reference", is_flag=True)
@click.option("--no-occlusion-mask", is_flag=True)
@click.option("--no-mask-smoothing", is_flag=True)
@click.option("--no-polyblur", is_flag=True)
@click.option("--no-color-loss-model", is_flag=True,
              help="Embedded training without the color-consistency loss.")
@click.option("--no-highlight-model", is_flag=True,
              help="Embedded training on highlight-free synthetic data.")
@click.option("--flow-resolution", type=click.Choice(["quarter", "full"]), default="quarter",
              show_default=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def evaluate(ctx, data_dir, params, train_steps, train_count, no_reference, no_occlusion_mask,
             no_mask_smoothing, no_polyblur, no_color_loss_model, no_highlight_model,
             flow_resolution, out_dir):
    """Evaluate the pipeline over a triplet dataset; writes metrics CSV,
    final images, and summary figures."""
    conf = ctx.obj["config"]
    seed = ctx.obj["seed"]
    cfg = _pipeline_config(
        conf,
        use_reference=not no_reference,
        use_occlusion_mask=not no_occlusion_mask,
        use_mask_smoothing=not no_mask_smoothing,
        use_polyblur=not no_polyblur,
    )
    if params:
        net = fusionnet.load_params(params)
    else:
        scfg = pipeline.SynthesisConfig(count=train_count, size=64, seed=seed + 7)
        scfg = _apply_config(scfg, conf.get("synthesis", {}))
        scfg = dataclasses.replace(scfg, count=train_count, size=64,
                                   with_highlights=not no_highlight_model)
        triplets = [pipeline.synthesize_triplet(scfg, i) for i in range(scfg.count)]
        samples = pipeline.training_samples_from_triplets(triplets, cfg)
        loss_cfg = fusionnet.LossConfig(w_color=0.0 if no_color_loss_model else 1.0)
        import torch

        torch.manual_seed(seed)  # parameter init must follow the session seed
        net = fusionnet.FusionNet()
        fusionnet.train(samples, net, fusionnet.TrainConfig(steps=train_steps, seed=seed), loss_cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = pipeline.evaluate(data_dir, net, cfg, out_dir=out / "finals",
                               flow_resolution=flow_resolution)
    pipeline.write_metrics_csv(out / "metrics.csv", result)
    report.render_evaluation_figures(result, out / "figures")
    agg = result["aggregate"]
    click.echo(
        f"mean masked PSNR: source {agg['mean_psnr_source']:.2f} dB, "
        f"fused {agg['mean_psnr_fused']:.2f} dB (fusion rate {agg['fusion_rate']:.0%})"
    )


@main.command("simulate-stream")
@click.option("--scenario", type=click.Path(exists=True), required=True,
              help="JSON scenario with per-frame features and shutter frames.")
@click.option("--delay-frames", type=int, default=7, show_default=True)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None,
              help="Trained SVM model JSON; defaults to a built-in synthetic model.")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@click.pass_context
def simulate_stream(ctx, scenario, delay_frames, model_path, out_dir):
    """Run the adaptive-streaming session simulator."""
    conf = ctx.obj["config"]
    scen = streamsim.load_scenario(scenario)
    if model_path:
        with open(model_path) as f:
            m = json.load(f)
        model = streamsim.SvmModel(
            weights=np.asarray(m["weights"]),
            bias=m["bias"],
            feature_means=np.asarray(m["feature_means"]),
            feature_stds=np.asarray(m["feature_stds"]),
        )
    else:
        model = default_svm_model(ctx.obj["seed"])
    scfg = _apply_config(streamsim.SessionConfig(delay_frames=delay_frames),
                         conf.get("session", {}))
    scfg = dataclasses.replace(scfg, delay_frames=delay_frames)
    rep = streamsim.simulate_session(scen, model, scfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    streamsim.save_report(out / "report.json", rep)
    with open(out / "timeseries.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["frame", "uw_active"])
        for i, a in enumerate(rep.active_trace):
            writer.writerow([i, a])
    report.render_session_figures(rep.to_dict(), rep.active_trace, out / "figures")
    click.echo(
        f"duty cycle {rep.duty_cycle:.1%}; fused {rep.fused}, missed {rep.missed} "
        f"of {len(rep.presses)} presses"
    )


def synthetic_motion_dataset(n: int, seed: int):
    """Seeded two-regime feature generator used for default SVM training."""
    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n):
        blurry = bool(rng.integers(0, 2))
        if blurry:
            f = streamsim.MotionFeatures(
                avg_face_flow=rng.uniform(4.0, 20.0),
                max_flow=rng.uniform(8.0, 40.0),
                avg_face_gradient=rng.uniform(0.0, 0.05),
                exposure_time_s=rng.uniform(1 / 60, 1 / 15),
                sensor_gain=rng.uniform(50, 150),
            )
        else:
            f = streamsim.MotionFeatures(
                avg_face_flow=rng.uniform(0.0, 1.5),
                max_flow=rng.uniform(0.0, 3.0),
                avg_face_gradient=rng.uniform(0.05, 0.2),
                exposure_time_s=rng.uniform(1 / 500, 1 / 120),
                sensor_gain=rng.uniform(50, 150),
            )
        samples.append((f, blurry))
    return samples


def default_svm_model(seed: int = 0) -> streamsim.SvmModel:
    return streamsim.svm_train(synthetic_motion_dataset(200, seed), seed=seed)


def run():
    try:
        main(standalone_mode=False)
    except click.ClickException as e:
        e.show()
        sys.exit(EXIT_VALIDATION)
    except click.Abort:
        sys.exit(EXIT_VALIDATION)
    except ImageError as e:
        click.echo(f"validation error: {e}", err=True)
        sys.exit(EXIT_VALIDATION)
    except Exception as e:  # noqa: BLE001
        click.echo(f"runtime error: {e}", err=True)
        sys.exit(EXIT_RUNTIME)


if __name__ == "__main__":
    run()

"""Command-line interface.

Verbs: synth, train, denoise, eval, probe, audit-warp, verify-proof, ablate.
Every verb accepts --config FILE (a JSON object; flags override its keys) and
--seed. See the README for the config schema.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .blindspot import probe_dependency
from .metrics import evaluate
from .model import STBNVideoModel
from .train import (
    TrainConfig,
    _model_for,
    denoise as run_denoise,
    load_checkpoint,
    run_ablation,
    train as run_train,
    verify_risk_gap,
)
from .videodata import NoiseModel, add_awgn, load_sequence, make_translating_texture, save_sequence
from .warp import FlowField, audit_noise_statistics


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _train_config(args, cfg_dict: dict) -> TrainConfig:
    base = TrainConfig.desk_scale() if getattr(args, "preset", "desk") == "desk" else TrainConfig.paper_scale()
    if cfg_dict:
        merged = base.to_dict()
        for key, val in cfg_dict.items():
            if isinstance(val, dict) and isinstance(merged.get(key), dict):
                merged[key].update(val)
            else:
                merged[key] = val
        base = TrainConfig.from_dict(merged)
    overrides = {}
    for key in ("iterations", "crop_size", "seq_length", "batch_size", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return replace(base, **overrides)


def _write_json(path: str | None, payload: dict):
    text = json.dumps(payload, indent=2, default=float)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _config_defaults(args, cfg: dict, keys: tuple):
    """Config-file values fill in flags the user left unset."""
    for key in keys:
        if getattr(args, key, None) is None and key in cfg:
            setattr(args, key, cfg[key])


def _noise_model(args) -> NoiseModel | None:
    if getattr(args, "sigma", None) is None:
        return None
    return NoiseModel(sigma=args.sigma, seed=args.seed or 0)


def cmd_synth(args):
    cfg = _load_config(args.config)
    _config_defaults(args, cfg, ("toy", "motion", "sigma", "seed"))
    if args.input:
        clean = load_sequence(args.input)
    else:
        t, h, w, c = (int(v) for v in (args.toy or "5,64,64,1").split(","))
        dx, dy = (float(v) for v in (args.motion or "1,0").split(","))
        clean = make_translating_texture(t=t, h=h, w=w, c=c, dx=dx, dy=dy, seed=args.seed or 0)
    model = NoiseModel(sigma=args.sigma, seed=args.seed or 0)
    noisy = add_awgn(clean, model)
    save_sequence(noisy, args.output)
    if args.clean_output:
        save_sequence(clean, args.clean_output)
    print(f"wrote noisy sequence {noisy.shape} to {args.output}")


def cmd_train(args):
    cfg_dict = _load_config(args.config)
    _config_defaults(args, cfg_dict, ("sigma",))
    cfg = _train_config(args, cfg_dict)
    noisy = load_sequence(args.input)
    nm = _noise_model(args)
    probe = None
    if args.probe_clean:
        probe = (noisy, load_sequence(args.probe_clean))
    result = run_train(noisy, cfg, nm, probe=probe, log_path=args.log, checkpoint_path=args.checkpoint)
    print(f"trained {cfg.iterations} iterations; checkpoint at {args.checkpoint}")
    if result.history:
        print(f"final: {result.history[-1]}")


def cmd_denoise(args):
    _config_defaults(args, _load_config(args.config), ("sigma", "seed"))
    seq = load_sequence(args.input)
    out = run_denoise(seq, args.checkpoint, _noise_model(args))
    save_sequence(out, args.output)
    print(f"wrote denoised sequence to {args.output}")


def cmd_eval(args):
    _config_defaults(args, _load_config(args.config), ("seed",))
    ref = load_sequence(args.reference)
    test = load_sequence(args.test)
    report = evaluate(ref.frames, test.frames, config_echo={"reference": args.reference, "test": args.test})
    _write_json(args.json, report.to_dict())


def cmd_probe(args):
    _config_defaults(args, _load_config(args.config), ("checkpoint", "seed"))
    t0, y0, x0 = (int(v) for v in args.pixel.split(","))
    if args.checkpoint:
        model, estimator, _, _ = load_checkpoint(args.checkpoint)
    else:
        import torch

        torch.manual_seed(args.seed or 0)
        model = STBNVideoModel()
        estimator = None
    if args.input:
        frames = load_sequence(args.input).frames
    else:
        rng = np.random.default_rng(args.seed or 0)
        frames = rng.random((max(t0 + 1, 3), 48, 48, model.config.image_channels), dtype=np.float32)
    maps = probe_dependency(model, frames, (t0, y0, x0))
    outdir = Path(args.output or "probe-report")
    outdir.mkdir(parents=True, exist_ok=True)
    summary = []
    for m in maps:
        blind = m.center_magnitude == 0.0
        summary.append(
            {
                "frame": m.source_frame,
                "center_magnitude": m.center_magnitude,
                "zero_at_center": blind,
                "support_pixels": int(m.support().sum()),
            }
        )
        _save_heatmap(m.magnitudes, outdir / f"dependency_frame{m.source_frame}.png")
    payload = {"probe": [t0, y0, x0], "frames": summary,
               "own_frame_blind": bool(summary[t0]["zero_at_center"])}
    _write_json(str(outdir / "summary.json"), payload)
    print(json.dumps(payload["frames"], indent=2))
    print(f"heatmaps in {outdir}")


def _save_heatmap(mag: np.ndarray, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    scaled = mag / mag.max() if mag.max() > 0 else mag
    plt.imsave(path, scaled, cmap="magma")


def cmd_audit_warp(args):
    _config_defaults(args, _load_config(args.config), ("sigma", "size", "seed"))
    size = args.size or 1024
    rng = np.random.default_rng(args.seed or 0)
    sigma_internal = args.sigma / 255.0
    noise = (sigma_internal * rng.standard_normal((size, size))).astype(np.float32)
    if args.flow == "zero":
        vec = np.zeros((size, size, 2), np.float32)
    elif args.flow == "fractional":
        vec = np.full((size, size, 2), 0.5, np.float32)
    else:
        vec = rng.uniform(-2, 2, (size, size, 2)).astype(np.float32)
    report = audit_noise_statistics(noise, FlowField(vec), args.interp, sigma_internal)
    outdir = Path(args.output or "warp-audit")
    outdir.mkdir(parents=True, exist_ok=True)
    _write_json(str(outdir / f"audit_{args.interp}_{args.flow}.json"), report.to_dict())
    _plot_audit(report, noise, outdir / f"audit_{args.interp}_{args.flow}.png", sigma_internal)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k not in ("histogram", "histogram_edges")}, indent=2))
    print(f"report in {outdir}")


def _plot_audit(report, noise, path: Path, sigma: float):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from scipy import stats

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    centers = 0.5 * (report.histogram_edges[:-1] + report.histogram_edges[1:])
    width = report.histogram_edges[1] - report.histogram_edges[0]
    density = report.histogram / (report.histogram.sum() * width)
    axes[0].bar(centers, density, width=width, alpha=0.6, label="warped noise")
    xs = np.linspace(centers.min(), centers.max(), 256)
    axes[0].plot(xs, stats.norm.pdf(xs, 0, sigma), "k--", label="reference normal")
    axes[0].set_title(f"{report.interpolation}: distribution")
    axes[0].legend()
    bars = {
        "var ratio": report.variance_ratio,
        "lag1 x": report.lag1_autocorr_x,
        "lag1 y": report.lag1_autocorr_y,
        "KS": report.ks_statistic,
    }
    axes[1].bar(range(len(bars)), list(bars.values()))
    axes[1].set_xticks(range(len(bars)), list(bars.keys()))
    axes[1].axhline(1.0, color="gray", lw=0.5)
    axes[1].set_title("statistics (nearest should sit at 1, 0, 0, 0)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_verify_proof(args):
    import torch

    _config_defaults(args, _load_config(args.config), ("sigma", "draws", "seed"))

    if args.checkpoint:
        model, _, _, _ = load_checkpoint(args.checkpoint)
    else:
        torch.manual_seed(args.seed or 0)
        cfg = TrainConfig.desk_scale()
        model = _model_for(cfg, 1)
    sigma = args.sigma if args.sigma is not None else 25.0
    draws = args.draws if args.draws is not None else 100_000
    clean = make_translating_texture(t=2, h=32, w=32, seed=args.seed or 0)
    report = verify_risk_gap(model, clean, sigma / 255.0, draws, seed=args.seed or 0)
    _write_json(args.json, report)


def cmd_ablate(args):
    cfg = _train_config(args, _load_config(args.config))
    noisy = load_sequence(args.input)
    clean = load_sequence(args.clean)
    nm = NoiseModel(sigma=args.sigma, seed=0)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    table = run_ablation(noisy, clean, cfg, nm, seeds=seeds)
    print(f"{'configuration':<16} {'mean PSNR (dB)':>14}  per-seed")
    for row in table["rows"]:
        per_seed = ", ".join(f"{v:.2f}" for v in table["psnr"][row])
        print(f"{row:<16} {table['mean_psnr'][row]:>14.2f}  [{per_seed}]")
    if args.json:
        _write_json(args.json, table)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stbn", description="Self-supervised video denoising toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None)
        if config:
            sp.add_argument("--config", help="JSON config file; flags override its keys")

    sp = sub.add_parser("synth", help="synthesize or load a clean clip and add Gaussian noise")
    sp.add_argument("--input", help="clean source (PNG dir or .stbnvid); omit to synthesize a toy")
    sp.add_argument("--toy", help="toy shape T,H,W,C (default 5,64,64,1)")
    sp.add_argument("--motion", help="toy translation dx,dy per frame (default 1,0)")
    sp.add_argument("--sigma", type=float, required=True, help="noise level in 8-bit units")
    sp.add_argument("--output", required=True, help="noisy output (.stbnvid keeps out-of-range values)")
    sp.add_argument("--clean-output", help="also save the clean source")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="self-supervised training on a noisy clip")
    sp.add_argument("--input", required=True)
    sp.add_argument("--sigma", type=float, help="noise level in 8-bit units (required for nll loss)")
    sp.add_argument("--preset", choices=("desk", "paper"), default="desk")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--crop-size", dest="crop_size", type=int)
    sp.add_argument("--seq-length", dest="seq_length", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--checkpoint", required=True, help="output checkpoint path")
    sp.add_argument("--log", help="JSON-lines metrics log path")
    sp.add_argument("--probe-clean", help="clean reference clip for PSNR logging")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("denoise", help="run inference with a checkpoint")
    sp.add_argument("--input", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sigma", type=float, help="noise level for posterior inference")
    sp.add_argument("--output", required=True)
    common(sp)
    sp.set_defaults(func=cmd_denoise)

    sp = sub.add_parser("eval", help="PSNR/SSIM report of a test clip against a reference")
    sp.add_argument("--reference", required=True)
    sp.add_argument("--test", required=True)
    sp.add_argument("--json", help="write the EvalReport here instead of stdout")
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("probe", help="dependency maps of one output pixel")
    sp.add_argument("--checkpoint", help="trained checkpoint; omit for a random default model")
    sp.add_argument("--pixel", required=True, help="t,y,x")
    sp.add_argument("--input", help="frames to probe on (random if omitted)")
    sp.add_argument("--output", help="report directory")
    common(sp)
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("audit-warp", help="noise-statistics audit of warping")
    sp.add_argument("--sigma", type=float, required=True, help="noise level in 8-bit units")
    sp.add_argument("--interp", choices=("nearest", "bilinear"), required=True)
    sp.add_argument("--flow", choices=("zero", "fractional", "random"), default="fractional")
    sp.add_argument("--size", type=int, default=None, help="audit field is size x size (default 1024)")
    sp.add_argument("--output", help="report directory")
    common(sp)
    sp.set_defaults(func=cmd_audit_warp)

    sp = sub.add_parser("verify-proof", help="Monte-Carlo risk-gap verification")
    sp.add_argument("--checkpoint", help="certified model to verify; omit for a random default")
    sp.add_argument("--sigma", type=float, default=None, help="noise level in 8-bit units (default 25)")
    sp.add_argument("--draws", type=int, default=None, help="pixel-draw budget (default 100000)")
    sp.add_argument("--json", help="write the report here instead of stdout")
    common(sp)
    sp.set_defaults(func=cmd_verify_proof)

    sp = sub.add_parser("ablate", help="train the four component configurations and compare")
    sp.add_argument("--input", required=True, help="noisy clip")
    sp.add_argument("--clean", required=True, help="clean reference for scoring")
    sp.add_argument("--sigma", type=float, required=True)
    sp.add_argument("--preset", choices=("desk", "paper"), default="desk")
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--json", help="also write the table as JSON")
    common(sp)
    sp.set_defaults(func=cmd_ablate)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())

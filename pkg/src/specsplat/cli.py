"""Command-line entry point: train, render, convert, eval, synth, import."""
from __future__ import annotations

import argparse
import enum
import json
import sys
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import numpy as np

from . import colorpipe, rasterizer, report, scene_io, synth, trainer
from .colorpipe import ColorPipeConfig
from .core import (Camera, ColorSpace, ContractError, ConversionStage, LossMode, RgbImage, SpecsplatError,
                   TrainConfig)
from .rasterizer import RenderSettings

CONFIG_NAME = "config.json"


class ConfigError(SpecsplatError):
    """Malformed or unknown configuration keys."""


@dataclass
class ColorSection:
    """Colour-pipe options; the gamma and white-balance switches live in ``train``."""

    white_point: str | tuple = "D65"
    gamma: str | float = "srgb"
    matrix: tuple | None = None
    normalize: bool = True
    quadrature: bool = False

    def pipe_config(self, train: TrainConfig) -> ColorPipeConfig:
        wp = tuple(self.white_point) if isinstance(self.white_point, (list, tuple)) else self.white_point
        matrix = None if self.matrix is None else tuple(float(x) for x in np.ravel(self.matrix))
        return ColorPipeConfig(apply_white_balance=train.apply_white_balance, white_point=wp,
                               apply_gamma=train.apply_gamma, gamma=self.gamma, matrix=matrix,
                               normalize=self.normalize, quadrature=self.quadrature)


@dataclass
class RunConfig:
    """Everything a run needs.  Paths are resolved relative to the working directory."""

    scene: str | None = None
    out: str = "run"
    init_cloud: str | None = None
    bands: str | None = None
    checkpoint_interval: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    color: ColorSection = field(default_factory=ColorSection)
    render: RenderSettings = field(default_factory=RenderSettings)

    @property
    def pipe(self) -> ColorPipeConfig:
        return self.color.pipe_config(self.train)


def _build(cls, data, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    hints = typing.get_type_hints(cls)
    kw = {}
    for key, value in data.items():
        hint = hints[key]
        if is_dataclass(hint):
            value = _build(hint, value, f"{where}.{key}")
        kw[key] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _plain(obj):
    if is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (tuple, list)):
        return [_plain(x) for x in obj]
    return obj


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    except FileNotFoundError as exc:
        raise scene_io.MissingFileError(f"config file not found: {path}") from exc
    return _build(RunConfig, data, "config")


def dump_run_config(config: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(config), indent=2) + "\n")
    return path


def check_run_config(config: RunConfig) -> RunConfig:
    config.train.check()
    config.pipe.rgb_matrix()
    if config.checkpoint_interval < 0:
        raise ConfigError("checkpoint_interval must be >= 0")
    if config.render.threads < 1:
        raise ConfigError("render.threads must be >= 1")
    return config


def _apply_flags(config: RunConfig, args) -> RunConfig:
    train = config.train
    if getattr(args, "stage", None):
        train = replace(train, conversion_stage=ConversionStage(args.stage))
    if getattr(args, "loss", None):
        train = replace(train, loss_mode=LossMode(args.loss))
    if getattr(args, "seed", None) is not None:
        train = replace(train, seed=args.seed)
    if getattr(args, "iterations", None) is not None:
        train = replace(train, iterations=args.iterations)
    config = replace(config, train=train)
    if getattr(args, "threads", None) is not None:
        config = replace(config, render=replace(config.render, threads=args.threads))
    if getattr(args, "bands", None):
        config = replace(config, bands=args.bands)
    if getattr(args, "out", None):
        config = replace(config, out=args.out)
    if getattr(args, "scene", None):
        config = replace(config, scene=args.scene)
    return check_run_config(config)


def _load_masked_scene(path, bands: str | None) -> scene_io.Scene:
    scene = scene_io.load_scene(path)
    if bands:
        scene = scene_io.select_bands(scene, scene_io.parse_band_mask(bands, scene.basis))
    return scene


def _load_cameras(path) -> list[tuple[str, Camera]]:
    """Cameras from a scene manifest (cube files are not read)."""
    path = Path(path)
    if not path.exists():
        raise scene_io.MissingFileError(f"camera manifest not found: {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != scene_io.SCENE_MAGIC:
        raise scene_io.MagicMismatchError(f"{path}: expected format {scene_io.SCENE_MAGIC!r}")
    return [(v["name"], Camera.from_dict(v["camera"])) for v in doc["views"]]


# ---------------------------------------------------------------- metrics output

def metric_records(metrics: dict, wavelengths, stage: str) -> list[dict]:
    records = [{"kind": "summary", "stage": stage, "views": metrics["views"],
                "psnr_ms": metrics["psnr_ms"], "ssim_ms": metrics["ssim_ms"],
                "psnr_rgb": metrics["psnr_rgb"], "ssim_rgb": metrics["ssim_rgb"]}]
    for i, (w, p) in enumerate(zip(wavelengths, metrics["psnr_ms_per_band"])):
        records.append({"kind": "band", "index": i, "wavelength_nm": w, "psnr": p})
    return records


def format_metrics(metrics: dict, wavelengths, stage: str) -> str:
    lines = [f"held-out metrics ({metrics['views']} views, {stage}-level RGB)",
             f"  spectral  PSNR {metrics['psnr_ms']:8.3f} dB   SSIM {metrics['ssim_ms']:.4f}",
             f"  RGB       PSNR {metrics['psnr_rgb']:8.3f} dB   SSIM {metrics['ssim_rgb']:.4f}",
             "  band  nm      PSNR (dB)"]
    for i, (w, p) in enumerate(zip(wavelengths, metrics["psnr_ms_per_band"])):
        lines.append(f"  {i:4d}  {w:6.1f}  {p:8.3f}")
    return "\n".join(lines)


def _write_metrics(out: Path, metrics: dict, wavelengths, stage: str) -> str:
    text = format_metrics(metrics, wavelengths, stage)
    report.write_jsonl(out / "metrics.jsonl", metric_records(metrics, wavelengths, stage))
    (out / "metrics.txt").write_text(text + "\n")
    if metrics["psnr_ms_per_band"]:
        report.plot_band_psnr(wavelengths, metrics["psnr_ms_per_band"], out / "band_psnr.png")
    return text


# ---------------------------------------------------------------- commands

def cmd_train(args) -> int:
    config = _apply_flags(load_run_config(args.config), args)
    if not config.scene:
        raise ConfigError("no scene given (set 'scene' in the config or pass --scene)")
    scene = _load_masked_scene(config.scene, config.bands)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    config = replace(config, scene=str(Path(config.scene).resolve()), out=str(out))
    dump_run_config(config, out / CONFIG_NAME)

    init = None
    if config.init_cloud:
        init = scene_io.load_cloud(config.init_cloud)
        if config.bands:
            init = init.with_bands(scene_io.parse_band_mask(config.bands, init.basis))

    def on_iteration(it, cloud, _):
        if config.checkpoint_interval and it % config.checkpoint_interval == 0:
            (out / "checkpoints").mkdir(exist_ok=True)
            scene_io.save_cloud(out / "checkpoints" / f"iter_{it:06d}.ply", cloud)

    cloud, rep = trainer.train(scene, config.train, color=config.pipe, settings=config.render,
                               init_cloud=init, on_iteration=on_iteration)
    scene_io.save_cloud(out / "cloud.ply", cloud)
    records = rep.log_records()
    report.write_jsonl(out / "train_log.jsonl", records)
    report.write_jsonl(out / "evals.jsonl", rep.evals)
    if records:
        report.plot_loss_curves(records, out / "loss.png")
    print(f"trained {config.train.iterations} iterations in {rep.wall_clock_s:.1f} s; {rep.final_count} Gaussians")
    if rep.evals:
        print(_write_metrics(out, rep.final_metrics, scene.basis.wavelengths_nm, config.train.conversion_stage.value))
    print(f"outputs in {out}")
    return 0


def cmd_render(args) -> int:
    config = _apply_flags(load_run_config(args.config), args)
    cloud = scene_io.load_cloud(args.checkpoint)
    if config.bands:
        cloud = cloud.with_bands(scene_io.parse_band_mask(config.bands, cloud.basis))
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    stage = config.train.conversion_stage
    for name, camera in _load_cameras(args.cameras):
        if args.rgb:
            data = trainer.render_rgb(cloud, camera, stage, config.pipe, config.render)
            rgb = RgbImage(data.astype(np.float32), ColorSpace.ENCODED if config.train.apply_gamma else ColorSpace.LINEAR)
            scene_io.save_rgb(out / f"{name}.npy", rgb)
            scene_io.save_rgb(out / f"{name}.png", rgb)
        else:
            image, _ = rasterizer.rasterize(cloud, camera, config.render)
            image.data = image.data.astype(np.float32)
            scene_io.save_cube(out / f"{name}.cube", image)
            report.plot_spectral_montage(image.data, cloud.basis.wavelengths_nm, out / f"{name}_bands.png")
        print(f"wrote {name}")
    return 0


def cmd_convert(args) -> int:
    config = _apply_flags(load_run_config(args.config), args)
    cube = scene_io.load_cube(args.cube)
    if config.bands:
        cube = cube.with_bands(scene_io.parse_band_mask(config.bands, cube.basis))
    rgb = colorpipe.convert_pixel_level(cube, config.pipe)
    rgb.data = rgb.data.astype(np.float32)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    scene_io.save_rgb(out, rgb)
    print(f"wrote {out} ({rgb.data.shape[0]}x{rgb.data.shape[1]})")
    return 0


def cmd_eval(args) -> int:
    config = _apply_flags(load_run_config(args.config), args)
    scene = _load_masked_scene(args.scene, config.bands)
    cloud = scene_io.load_cloud(args.checkpoint)
    if config.bands:
        cloud = cloud.with_bands(scene_io.parse_band_mask(config.bands, cloud.basis))
    if cloud.basis != scene.basis:
        raise ContractError("checkpoint and scene have different spectral bases")
    views = scene.views if args.split == "all" else scene.split(args.split)
    if not views:
        raise ContractError(f"scene has no '{args.split}' views")
    stage = config.train.conversion_stage
    metrics = trainer.evaluate(cloud, views, stage, config.pipe, config.render)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    print(_write_metrics(out, metrics, scene.basis.wavelengths_nm, stage.value))
    return 0


def cmd_synth(args) -> int:
    config = _apply_flags(load_run_config(args.config), args)
    scene = synth.synthesize(config.train.seed, args.n_gaussians, args.n_bands, args.n_views, args.resolution,
                             color=config.pipe, settings=config.render)
    if config.bands:
        scene = scene_io.select_bands(scene, scene_io.parse_band_mask(config.bands, scene.basis))
    path = scene_io.save_scene(scene, config.out)
    print(f"wrote {path} ({len(scene.views)} views, {scene.basis.band_count} bands, "
          f"{scene.cloud.count} ground-truth Gaussians, {len(scene.points)} seed points)")
    return 0


def cmd_import(args) -> int:
    wavelengths = [float(w) for w in args.wavelengths.split(",") if w.strip()]
    cube = scene_io.import_band_stack(args.images, wavelengths)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    scene_io.save_cube(out, cube)
    print(f"wrote {out} ({cube.height}x{cube.width}, {cube.basis.band_count} bands)")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; unknown keys are rejected")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--threads", type=int, help="rasterizer worker threads; 1 is the deterministic reference")
    common.add_argument("--stage", choices=[s.value for s in ConversionStage], help="spectral-to-RGB conversion stage")
    common.add_argument("--loss", choices=[m.value for m in LossMode], help="supervision mode")
    common.add_argument("--bands", help="band mask, e.g. '1-15', '0,2,4' or '431-808nm'")
    common.add_argument("--seed", type=int)

    parser = argparse.ArgumentParser(prog="specsplat", description="Multispectral Gaussian splatting.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="fit a cloud to a scene")
    p.add_argument("--scene", help="scene manifest (overrides the config)")
    p.add_argument("--iterations", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", parents=[common], help="render a checkpoint from manifest cameras")
    p.add_argument("checkpoint")
    p.add_argument("--cameras", required=True, help="scene manifest providing the cameras")
    kind = p.add_mutually_exclusive_group()
    kind.add_argument("--spectral", action="store_true", help="write spectral cubes (default)")
    kind.add_argument("--rgb", action="store_true", help="write display RGB images")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("convert", parents=[common], help="convert a spectral cube to RGB")
    p.add_argument("cube")
    p.add_argument("output", help="output image (.png or .npy)")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint against a scene")
    p.add_argument("checkpoint")
    p.add_argument("scene")
    p.add_argument("--split", choices=["test", "train", "all"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene with ground truth")
    p.add_argument("--n_gaussians", type=int, default=100)
    p.add_argument("--n_bands", type=int, default=16)
    p.add_argument("--n_views", type=int, default=12)
    p.add_argument("--resolution", type=int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("import", help="stack per-band images (PNG/TIFF/PFM) into a spectral cube")
    p.add_argument("output", help="cube file to write")
    p.add_argument("images", nargs="+", help="one grayscale image per band, in wavelength order")
    p.add_argument("--wavelengths", required=True, help="comma-separated band centres in nm")
    p.set_defaults(func=cmd_import)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SpecsplatError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"specsplat {args.command}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

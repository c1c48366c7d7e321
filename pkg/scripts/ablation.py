"""Regenerate the ablation tables as JSONL records plus a plain-text table.

    python scripts/ablation.py stage --out ablation/            # conversion stage x loss mode
    python scripts/ablation.py bands --out ablation/            # visible-only vs visible + NIR

Both run on a synthetic scene (or ``--scene manifest.json``) and report
held-out metrics, median over ``--seeds``.
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

import numpy as np

from specsplat import report, scene_io
from specsplat.core import ConversionStage, LossMode, TrainConfig
from specsplat.synth import synthesize
from specsplat.trainer import train

STAGE_ROWS = [
    ("PixelLevel-RgbOnly", ConversionStage.PIXEL, LossMode.RGB),
    ("PixelLevel-MsOnly", ConversionStage.PIXEL, LossMode.MS),
    ("PixelLevel-Dual", ConversionStage.PIXEL, LossMode.DUAL),
    ("GaussianLevel-RgbOnly", ConversionStage.GAUSSIAN, LossMode.RGB),
    ("GaussianLevel-Dual", ConversionStage.GAUSSIAN, LossMode.DUAL),
]
BAND_ROWS = ["415-680nm", "415-808nm"]
VISIBLE_MAX_NM = 700.0


def load(args):
    if args.scene:
        return scene_io.load_scene(args.scene)
    return synthesize(args.synth_seed, n_gaussians=args.n_gaussians, n_bands=16, n_views=args.n_views,
                      resolution=args.resolution)


def run(scene, stage, mode, seed, iterations):
    cfg = TrainConfig(iterations=iterations, conversion_stage=stage, loss_mode=mode, seed=seed, eval_interval=0)
    start = time.perf_counter()
    _, rep = train(scene, cfg)
    return rep.final_metrics, time.perf_counter() - start


def stage_table(scene, args):
    records = []
    for name, stage, mode in STAGE_ROWS:
        for seed in args.seeds:
            m, secs = run(scene, stage, mode, seed, args.iterations)
            records.append({"table": "stage", "row": name, "seed": seed, "psnr_rgb": m["psnr_rgb"],
                            "ssim_rgb": m["ssim_rgb"], "psnr_ms": m["psnr_ms"], "seconds": round(secs, 1)})
            print(f"{name:22s} seed {seed}: RGB {m['psnr_rgb']:.2f} dB, MS {m['psnr_ms']:.2f} dB")
    return records


def band_table(scene, args):
    records = []
    for text in BAND_ROWS:
        mask = scene_io.parse_band_mask(text, scene.basis)
        sub = scene_io.select_bands(scene, mask)
        visible = [i for i, w in enumerate(sub.basis.wavelengths_nm) if w <= VISIBLE_MAX_NM]
        for seed in args.seeds:
            m, secs = run(sub, ConversionStage.PIXEL, LossMode.DUAL, seed, args.iterations)
            vis = float(np.mean([m["psnr_ms_per_band"][i] for i in visible]))
            records.append({"table": "bands", "row": text, "seed": seed, "bands": len(mask),
                            "psnr_ms_visible": vis, "psnr_rgb": m["psnr_rgb"], "ssim_rgb": m["ssim_rgb"],
                            "seconds": round(secs, 1)})
            print(f"{text:12s} seed {seed}: visible-band PSNR {vis:.2f} dB, RGB {m['psnr_rgb']:.2f} dB")
    return records


def summarize(records, columns) -> str:
    rows = list(dict.fromkeys(r["row"] for r in records))
    lines = [f"{'row':24s}" + "".join(f"{c:>18s}" for c in columns)]
    for row in rows:
        sel = [r for r in records if r["row"] == row]
        lines.append(f"{row:24s}" + "".join(f"{np.median([r[c] for r in sel]):18.3f}" for c in columns))
    lines.append(f"median over seeds {sorted({r['seed'] for r in records})}")
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("table", choices=["stage", "bands"])
    ap.add_argument("--out", type=Path, default=Path("ablation"))
    ap.add_argument("--scene", help="scene manifest; default is a synthetic 16-band scene")
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--synth_seed", type=int, default=7)
    ap.add_argument("--n_gaussians", type=int, default=100)
    ap.add_argument("--n_views", type=int, default=12)
    ap.add_argument("--resolution", type=int, default=64)
    args = ap.parse_args(argv)

    scene = load(args)
    if args.table == "stage":
        records, columns = stage_table(scene, args), ["psnr_rgb", "ssim_rgb", "psnr_ms"]
    else:
        records, columns = band_table(scene, args), ["psnr_ms_visible", "psnr_rgb", "ssim_rgb"]
    args.out.mkdir(parents=True, exist_ok=True)
    report.write_jsonl(args.out / f"{args.table}.jsonl", records)
    text = summarize(records, columns)
    (args.out / f"{args.table}.txt").write_text(text)
    print(text, end="")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

import hashlib
import json

import numpy as np
import pytest

from specsplat import scene_io
from specsplat.cli import RunConfig, dump_run_config, load_run_config, main
from specsplat.colorpipe import ColorPipeConfig, get_pipe, resample_cmf
from specsplat.core import SpectralBasis, SpectralImage
from specsplat.report import read_jsonl

B16 = SpectralBasis.standard(16)


def tree_digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--seed", "2", "--n_gaussians", "6", "--n_bands", "4", "--n_views", "4",
                 "--resolution", "12", "--out", str(d)]) == 0
    return d


def run_train(scene_dir, out, *extra):
    return main(["train", "--scene", str(scene_dir / "scene.json"), "--iterations", "6", "--out", str(out),
                 "--threads", "1", *extra])


def test_synth_writes_complete_scene(scene_dir):
    scene = scene_io.load_scene(scene_dir / "scene.json")
    assert len(scene.views) == 4 and scene.basis.band_count == 4
    assert scene.cloud.count == 6 and scene.points is not None
    assert [v.split for v in scene.views].count("test") == 1


def test_convert_one_hot_cube(tmp_path):
    data = np.zeros((1, 1, 16), dtype=np.float32)
    data[0, 0, 6] = 1.0
    scene_io.save_cube(tmp_path / "one.cube", SpectralImage(data, B16))
    assert main(["convert", str(tmp_path / "one.cube"), str(tmp_path / "one.npy")]) == 0
    rgb = np.load(tmp_path / "one.npy")[0, 0]
    expect = get_pipe(ColorPipeConfig(), B16).xyz_to_rgb(resample_cmf(B16)[6])
    assert np.allclose(rgb, expect, atol=1e-6)


def test_eval_ground_truth_is_capped(scene_dir, tmp_path, capsys):
    assert main(["eval", str(scene_dir / "gt_cloud.ply"), str(scene_dir / "scene.json"), "--out", str(tmp_path)]) == 0
    summary = read_jsonl(tmp_path / "metrics.jsonl")[0]
    assert summary["psnr_ms"] == 100.0 and summary["psnr_rgb"] == 100.0
    bands = [r for r in read_jsonl(tmp_path / "metrics.jsonl") if r["kind"] == "band"]
    assert [r["psnr"] for r in bands] == [100.0] * 4
    assert "band" in capsys.readouterr().out


def test_train_is_deterministic_and_reproducible_from_config(scene_dir, tmp_path):
    before = tree_digest(scene_dir)
    assert run_train(scene_dir, tmp_path / "a") == 0
    assert run_train(scene_dir, tmp_path / "b") == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "metrics.txt").read_text() == (b / "metrics.txt").read_text()
    assert (a / "cloud.ply").read_bytes() == (b / "cloud.ply").read_bytes()
    for name in ("config.json", "train_log.jsonl", "evals.jsonl", "metrics.jsonl", "loss.png", "band_psnr.png"):
        assert (a / name).exists(), name
    # re-running from the written effective config reproduces the run
    assert main(["train", "--config", str(a / "config.json"), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "cloud.ply").read_bytes() == (a / "cloud.ply").read_bytes()
    assert (tmp_path / "c" / "metrics.jsonl").read_text() == (a / "metrics.jsonl").read_text()
    assert tree_digest(scene_dir) == before


def test_train_with_band_mask_and_flags(scene_dir, tmp_path):
    assert run_train(scene_dir, tmp_path, "--bands", "1-3", "--stage", "gaussian", "--loss", "ms") == 0
    cfg = json.loads((tmp_path / "config.json").read_text())
    assert cfg["bands"] == "1-3" and cfg["train"]["conversion_stage"] == "gaussian"
    assert scene_io.load_cloud(tmp_path / "cloud.ply").basis.band_count == 3


def test_render_spectral_and_rgb(scene_dir, tmp_path):
    before = tree_digest(scene_dir)
    ckpt, cams = str(scene_dir / "gt_cloud.ply"), str(scene_dir / "scene.json")
    assert main(["render", ckpt, "--cameras", cams, "--spectral", "--out", str(tmp_path / "s")]) == 0
    assert main(["render", ckpt, "--cameras", cams, "--rgb", "--out", str(tmp_path / "r")]) == 0
    scene = scene_io.load_scene(cams)
    v = scene.views[0]
    cube = scene_io.load_cube(tmp_path / "s" / f"{v.name}.cube")
    assert np.array_equal(cube.data, v.spectral.data)
    assert np.allclose(np.load(tmp_path / "r" / f"{v.name}.npy"), v.rgb.data, atol=1e-6)
    assert (tmp_path / "s" / f"{v.name}_bands.png").exists() and (tmp_path / "r" / f"{v.name}.png").exists()
    assert tree_digest(scene_dir) == before


def test_import_band_stack(tmp_path):
    from PIL import Image
    for i in range(3):
        Image.fromarray(np.full((4, 5), 50 * i, dtype=np.uint8)).save(tmp_path / f"b{i}.png")
    paths = [str(tmp_path / f"b{i}.png") for i in range(3)]
    assert main(["import", str(tmp_path / "x.cube"), *paths, "--wavelengths", "450,550,650"]) == 0
    cube = scene_io.load_cube(tmp_path / "x.cube")
    assert cube.basis.wavelengths_nm == (450.0, 550.0, 650.0)
    assert np.allclose(cube.data[0, 0], [0, 50 / 255, 100 / 255])


@pytest.mark.parametrize("argv_fn, fragment", [
    (lambda d, t: ["eval", str(t / "missing.ply"), str(d / "scene.json")], "MissingFileError"),
    (lambda d, t: ["train", "--out", str(t)], "ConfigError"),
    (lambda d, t: ["train", "--scene", str(d / "scene.json"), "--bands", "900-950nm", "--out", str(t)],
     "EmptyMaskError"),
    (lambda d, t: ["convert", str(d / "scene.json"), str(t / "x.png")], "MagicMismatchError"),
])
def test_errors_exit_nonzero_with_one_line(scene_dir, tmp_path, capsys, argv_fn, fragment):
    assert main(argv_fn(scene_dir, tmp_path)) == 1
    err = capsys.readouterr().err.strip()
    assert len(err.splitlines()) == 1 and fragment in err and err.startswith("specsplat ")


def test_unknown_config_key_rejected(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"iterations": 3, "learning_rate": 1}}))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_invalid_config_value_rejected(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"dssim_weight": 3}}))
    assert main(["train", "--config", str(tmp_path / "c.json")]) == 1
    assert "dssim_weight" in capsys.readouterr().err


def test_config_round_trip(tmp_path):
    cfg = RunConfig(scene="s.json", bands="1-3")
    cfg.train.densify.enabled = True
    cfg.color.white_point = "E"
    dump_run_config(cfg, tmp_path / "c.json")
    back = load_run_config(tmp_path / "c.json")
    assert back == cfg

import json

import numpy as np
import pytest

from conftest import front_camera, random_cloud
from specsplat import colorpipe, rasterizer, scene_io
from specsplat.colorpipe import ColorPipeConfig
from specsplat.core import GaussianCloud, RgbImage, SpectralBasis, SpectralImage
from specsplat.scene_io import (BandCountMismatchError, EmptyMaskError, MagicMismatchError, MissingColorError,
                                MissingFileError, PointSet, SceneFormatError, TruncatedPayloadError,
                                WavelengthMismatchError, WavelengthOrderError)
from specsplat.synth import synthesize

B16 = SpectralBasis.standard(16)


def write_ply(path, names, rows, ply_type="float", dtype="<f4"):
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rows)}"]
    header += [f"property {ply_type} {n}" for n in names] + ["end_header"]
    table = np.array([tuple(r) for r in rows], dtype=[(n, dtype) for n in names])
    path.write_bytes(("\n".join(header) + "\n").encode() + table.tobytes())


class TestCube:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        img = SpectralImage(rng.standard_normal((8, 8, 16)).astype(np.float32), B16)
        scene_io.save_cube(tmp_path / "a.cube", img)
        back = scene_io.load_cube(tmp_path / "a.cube")
        assert back.basis == B16 and back.data.tobytes() == img.data.tobytes()

    def test_magic_mismatch(self, tmp_path):
        (tmp_path / "a.cube").write_bytes(b"NOT-A-CUBE\n")
        with pytest.raises(MagicMismatchError):
            scene_io.load_cube(tmp_path / "a.cube")

    def test_truncated_payload_names_lengths(self, tmp_path, rng):
        scene_io.save_cube(tmp_path / "a.cube", SpectralImage(rng.uniform(size=(4, 4, 16)).astype(np.float32), B16))
        raw = (tmp_path / "a.cube").read_bytes()
        (tmp_path / "a.cube").write_bytes(raw[:-10])
        with pytest.raises(TruncatedPayloadError, match="1014 bytes, expected 1024"):
            scene_io.load_cube(tmp_path / "a.cube")

    def test_wavelength_disorder(self, tmp_path):
        scene_io.save_cube(tmp_path / "a.cube", SpectralImage(np.zeros((2, 2, 2), np.float32),
                                                              SpectralBasis((500.0, 600.0))))
        raw = (tmp_path / "a.cube").read_bytes().replace(b"500.0 600.0", b"600.0 500.0")
        (tmp_path / "a.cube").write_bytes(raw)
        with pytest.raises(WavelengthOrderError):
            scene_io.load_cube(tmp_path / "a.cube")

    def test_errors_are_distinct(self):
        kinds = {MagicMismatchError, TruncatedPayloadError, WavelengthOrderError, BandCountMismatchError}
        assert len(kinds) == 4 and all(issubclass(k, SceneFormatError) for k in kinds)


class TestCloud:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    def test_round_trip_bit_exact(self, tmp_path, rng, dtype):
        cloud = random_cloud(rng, count=7, degree=3, dtype=dtype)
        scene_io.save_cloud(tmp_path / "c.ply", cloud)
        back = scene_io.load_cloud(tmp_path / "c.ply")
        assert back.dtype == dtype and back.equals(cloud)
        for name, arr in cloud.params().items():
            assert getattr(back, name).tobytes() == arr.tobytes()

    def test_not_a_cloud(self, tmp_path):
        write_ply(tmp_path / "p.ply", ["x", "y", "z"], [(0, 0, 0)])
        with pytest.raises(MagicMismatchError):
            scene_io.load_cloud(tmp_path / "p.ply")


class TestPoints:
    def test_gray_point_keeps_luminance(self, tmp_path):
        write_ply(tmp_path / "p.ply", ["x", "y", "z", "red", "green", "blue"], [(0, 0, 0, 0.5, 0.5, 0.5)])
        pts = scene_io.ingest_points(tmp_path / "p.ply", B16)
        spectrum = pts.spectra[0]
        assert np.allclose(spectrum, spectrum[0])
        img = SpectralImage(spectrum[None, None, :], B16)
        rgb = colorpipe.convert_pixel_level(img, ColorPipeConfig()).data[0, 0]
        lum = lambda enc: scene_io.srgb_decode(enc) @ np.array([0.2126, 0.7152, 0.0722])
        assert lum(rgb) == pytest.approx(lum(np.full(3, 0.5)), rel=0.05)

    def test_uchar_colors(self, tmp_path):
        pts = PointSet(np.zeros((2, 3)), np.zeros((2, 16)))
        scene_io.write_points(tmp_path / "p.ply", pts, rgb=np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]]))
        # spectral columns win over RGB when both are present
        assert np.array_equal(scene_io.ingest_points(tmp_path / "p.ply", B16).spectra, pts.spectra)

    def test_n_channel_pass_through(self, tmp_path, rng):
        pts = PointSet(rng.standard_normal((5, 3)).astype(np.float32), rng.uniform(size=(5, 16)).astype(np.float32))
        scene_io.write_points(tmp_path / "p.ply", pts)
        back = scene_io.ingest_points(tmp_path / "p.ply", B16)
        assert np.array_equal(back.positions, pts.positions) and np.array_equal(back.spectra, pts.spectra)

    def test_n_channel_band_mismatch(self, tmp_path):
        scene_io.write_points(tmp_path / "p.ply", PointSet(np.zeros((1, 3)), np.zeros((1, 4))))
        with pytest.raises(BandCountMismatchError):
            scene_io.ingest_points(tmp_path / "p.ply", B16)

    def test_missing_color(self, tmp_path):
        write_ply(tmp_path / "p.ply", ["x", "y", "z"], [(0, 0, 0)])
        with pytest.raises(MissingColorError, match="missing color properties"):
            scene_io.ingest_points(tmp_path / "p.ply", B16)

    def test_unparseable(self, tmp_path):
        (tmp_path / "p.ply").write_bytes(b"garbage")
        with pytest.raises(SceneFormatError):
            scene_io.ingest_points(tmp_path / "p.ply", B16)


@pytest.fixture(scope="module")
def scene():
    return synthesize(3, n_gaussians=8, n_bands=16, n_views=4, resolution=12)


class TestManifest:
    def test_round_trip(self, tmp_path, scene):
        path = scene_io.save_scene(scene, tmp_path)
        back = scene_io.load_scene(path)
        assert back.basis == scene.basis and len(back.views) == 4
        for a, b in zip(scene.views, back.views):
            assert a.name == b.name and a.split == b.split
            assert np.array_equal(a.spectral.data, b.spectral.data)
            assert np.array_equal(a.rgb.data, b.rgb.data)
            assert np.array_equal(a.camera.world_to_camera, b.camera.world_to_camera)
        assert back.cloud.equals(scene.cloud)
        assert np.allclose(back.points.spectra, scene.points.spectra, atol=1e-7)
        assert back.extras["synthetic"]["seed"] == 3

    def test_band_count_mismatch(self, tmp_path, scene):
        path = scene_io.save_scene(scene, tmp_path)
        v = scene.views[0]
        scene_io.save_cube(tmp_path / "cubes" / f"{v.name}.cube", v.spectral.with_bands(range(15)))
        with pytest.raises(BandCountMismatchError):
            scene_io.load_scene(path)

    def test_wavelength_mismatch(self, tmp_path, scene):
        path = scene_io.save_scene(scene, tmp_path)
        doc = json.loads(path.read_text())
        doc["wavelengths_nm"][0] = 414.0
        path.write_text(json.dumps(doc))
        with pytest.raises(WavelengthMismatchError):
            scene_io.load_scene(path)

    def test_missing_file(self, tmp_path, scene):
        path = scene_io.save_scene(scene, tmp_path)
        (tmp_path / "cubes" / f"{scene.views[1].name}.cube").unlink()
        with pytest.raises(MissingFileError):
            scene_io.load_scene(path)

    def test_wrong_format(self, tmp_path):
        (tmp_path / "s.json").write_text(json.dumps({"format": "other"}))
        with pytest.raises(MagicMismatchError):
            scene_io.load_scene(tmp_path / "s.json")


class TestBandMasks:
    def test_full_mask_is_identity(self, scene):
        out = scene_io.select_bands(scene, range(16))
        assert out.basis == scene.basis and out.cloud.equals(scene.cloud)

    def test_drop_first_band(self, scene):
        mask = scene_io.parse_band_mask("431-808nm", scene.basis)
        out = scene_io.select_bands(scene, mask)
        assert out.basis.band_count == 15
        assert out.basis.wavelengths_nm[0] == 431.0 and out.basis.wavelengths_nm[-1] == 808.0
        assert out.views[0].spectral.data.shape[2] == 15 and out.points.spectra.shape[1] == 15
        assert out.cloud.sh_coeffs.shape[1] == 15

    def test_mask_commutes_with_render(self, scene):
        mask = [1, 4, 5, 9, 15]
        cam = scene.views[0].camera
        full, _ = rasterizer.rasterize(scene.cloud, cam)
        masked, _ = rasterizer.rasterize(scene_io.select_bands(scene, mask).cloud, cam)
        assert np.max(np.abs(masked.data - full.data[..., mask])) <= 1e-6

    @pytest.mark.parametrize("text,expect", [("0,3,5", [0, 3, 5]), ("1-3", [1, 2, 3]), ("680nm", [14]),
                                             ("415-447nm, 808nm", [0, 1, 2, 15])])
    def test_parse(self, text, expect):
        assert scene_io.parse_band_mask(text, B16) == expect

    def test_empty_mask(self, scene):
        with pytest.raises(EmptyMaskError):
            scene_io.select_bands(scene, [])
        with pytest.raises(EmptyMaskError):
            scene_io.parse_band_mask("900-950nm", B16)

    def test_out_of_range(self):
        with pytest.raises(SceneFormatError):
            scene_io.parse_band_mask("16", B16)


class TestImporters:
    def test_band_stack_png_and_pfm(self, tmp_path):
        from PIL import Image
        a = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
        Image.fromarray(a).save(tmp_path / "a.png")
        b = np.array([[0.25, 0.5], [0.75, 1.0]], dtype=np.float32)
        (tmp_path / "b.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + b[::-1].astype("<f4").tobytes())
        cube = scene_io.import_band_stack([tmp_path / "a.png", tmp_path / "b.pfm"], [500.0, 600.0])
        assert cube.data.shape == (2, 2, 2)
        assert np.allclose(cube.data[..., 0], a / 65535)
        assert np.array_equal(cube.data[..., 1], b)

    def test_band_stack_count_mismatch(self, tmp_path):
        with pytest.raises(BandCountMismatchError):
            scene_io.import_band_stack([tmp_path / "a.png"], [500.0, 600.0])

    def test_transforms_json(self, tmp_path):
        # OpenGL camera at (0, -3, 0) looking at the origin along +y, z up
        c2w = [[1, 0, 0, 0], [0, 0, -1, -3], [0, 1, 0, 0], [0, 0, 0, 1]]
        doc = {"camera_angle_x": 2 * np.arctan(0.5), "w": 10, "h": 10,
               "frames": [{"file_path": "./images/r_0", "transform_matrix": c2w}]}
        (tmp_path / "transforms.json").write_text(json.dumps(doc))
        [(name, cam)] = scene_io.import_transforms_json(tmp_path / "transforms.json")
        ref = front_camera(size=10)
        assert name == "r_0" and cam.fx == pytest.approx(10.0)
        assert np.allclose(cam.world_to_camera, ref.world_to_camera, atol=1e-12)


def test_rgb_npy_round_trip(tmp_path, rng):
    img = RgbImage(rng.uniform(size=(3, 4, 3)).astype(np.float32))
    scene_io.save_rgb(tmp_path / "x.npy", img)
    assert np.array_equal(scene_io.load_rgb(tmp_path / "x.npy").data, img.data)
    scene_io.save_rgb(tmp_path / "x.png", img)
    assert np.allclose(scene_io.load_rgb(tmp_path / "x.png").data, img.data, atol=0.5 / 255 + 1e-7)


def test_cloud_with_bands_in_round_trip(tmp_path, rng):
    cloud = random_cloud(rng, count=2, basis=B16).with_bands([0, 15])
    scene_io.save_cloud(tmp_path / "c.ply", cloud)
    assert scene_io.load_cloud(tmp_path / "c.ply").basis.wavelengths_nm == (415.0, 808.0)
    assert isinstance(cloud, GaussianCloud)


@pytest.mark.parametrize("loader", [scene_io.load_cube, scene_io.load_cloud, scene_io.load_rgb, scene_io.read_pfm])
def test_missing_input_is_named(tmp_path, loader):
    with pytest.raises(MissingFileError):
        loader(tmp_path / "nope.bin")

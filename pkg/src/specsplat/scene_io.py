"""Persistence and ingestion: spectral cubes, cloud checkpoints, scene manifests, point clouds.

File layouts are described in ``docs/formats.md``.
"""
from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .colorpipe import ColorPipeConfig, get_pipe
from .core import (Camera, ColorSpace, GaussianCloud, RgbImage, SpecsplatError, SpectralBasis, SpectralImage,
                   num_sh_coeffs)

CUBE_MAGIC = "MSGS-CUBE/1"
CLOUD_MAGIC = "MSGS-CLOUD/1"
SCENE_MAGIC = "MSGS-SCENE/1"


class SceneFormatError(SpecsplatError):
    """Malformed or inconsistent scene file."""


class MagicMismatchError(SceneFormatError):
    pass


class TruncatedPayloadError(SceneFormatError):
    pass


class WavelengthOrderError(SceneFormatError):
    pass


class BandCountMismatchError(SceneFormatError):
    pass


class WavelengthMismatchError(SceneFormatError):
    pass


class MissingColorError(SceneFormatError):
    pass


class MissingFileError(SceneFormatError, FileNotFoundError):
    pass


class EmptyMaskError(SceneFormatError, ValueError):
    pass


@dataclass
class PointSet:
    """Seed points: positions (P x 3) and base spectra (P x N) in [0, 1]."""

    positions: np.ndarray
    spectra: np.ndarray

    def __len__(self) -> int:
        return int(self.positions.shape[0])

    def __iter__(self):
        return iter(zip(self.positions, self.spectra))


@dataclass
class View:
    name: str
    camera: Camera
    spectral: SpectralImage | None
    rgb: RgbImage | None = None
    split: str = "train"


@dataclass
class Scene:
    basis: SpectralBasis
    views: list[View]
    points: PointSet | None = None
    cloud: GaussianCloud | None = None
    root: Path | None = None
    extras: dict = field(default_factory=dict)

    def split(self, name: str) -> list[View]:
        return [v for v in self.views if v.split == name]


# ---------------------------------------------------------------- cubes

def _parse_wavelengths(tokens: Sequence[str]) -> tuple[float, ...]:
    wl = tuple(float(t) for t in tokens)
    if any(b <= a for a, b in zip(wl, wl[1:])):
        raise WavelengthOrderError(f"cube wavelengths are not strictly increasing: {wl}")
    return wl


def save_cube(path, image: SpectralImage) -> None:
    """Write ``image`` as an MSGS-CUBE/1 file (float32 payload)."""
    data = np.ascontiguousarray(image.data, dtype="<f4")
    h, w, n = data.shape
    header = "\n".join([
        CUBE_MAGIC,
        f"height {h}",
        f"width {w}",
        f"bands {n}",
        "wavelengths " + " ".join(repr(float(x)) for x in image.basis.wavelengths_nm),
        "dtype float32",
        "byte_order little",
        "interleave bip",
        "end_header",
    ]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.tobytes())


def _read_header(f, magic: str, terminator: str = "end_header") -> list[str]:
    first = f.readline().decode("ascii", errors="replace").rstrip("\n")
    if first != magic:
        raise MagicMismatchError(f"expected magic {magic!r}, found {first[:40]!r}")
    lines = []
    while True:
        line = f.readline()
        if not line:
            raise TruncatedPayloadError("header ended before end_header")
        text = line.decode("ascii").rstrip("\n")
        if text == terminator:
            return lines
        lines.append(text)


def load_cube(path) -> SpectralImage:
    with open(_require(Path(path)), "rb") as f:
        fields_ = {}
        for line in _read_header(f, CUBE_MAGIC):
            key, _, rest = line.partition(" ")
            fields_[key] = rest.split()
        payload = f.read()
    try:
        h, w, n = int(fields_["height"][0]), int(fields_["width"][0]), int(fields_["bands"][0])
        wl = _parse_wavelengths(fields_["wavelengths"])
    except KeyError as exc:
        raise SceneFormatError(f"cube header missing field {exc}") from None
    if fields_.get("dtype", ["float32"])[0] != "float32" or fields_.get("byte_order", ["little"])[0] != "little":
        raise SceneFormatError("only little-endian float32 cubes are supported")
    if len(wl) != n:
        raise BandCountMismatchError(f"cube header lists {len(wl)} wavelengths for {n} bands")
    expected = 4 * h * w * n
    if len(payload) != expected:
        kind = TruncatedPayloadError if len(payload) < expected else SceneFormatError
        raise kind(f"cube payload is {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4").reshape(h, w, n).astype(np.float32)
    return SpectralImage(data, SpectralBasis(wl))


# ---------------------------------------------------------------- clouds

def _cloud_properties(cloud: GaussianCloud) -> list[str]:
    k = num_sh_coeffs(cloud.sh_degree)
    names = ["x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity"]
    names += [f"sh_{b}_{j}" for b in range(cloud.basis.band_count) for j in range(k)]
    return names


def save_cloud(path, cloud: GaussianCloud) -> None:
    """Write an MSGS-CLOUD/1 checkpoint (binary little-endian PLY)."""
    ply_type = {np.dtype(np.float32): "float", np.dtype(np.float64): "double"}[cloud.dtype]
    names = _cloud_properties(cloud)
    n = cloud.count
    table = np.concatenate([
        cloud.positions, cloud.log_scales, cloud.rotations, cloud.opacity_logits[:, None],
        cloud.sh_coeffs.reshape(n, -1),
    ], axis=1).astype(cloud.dtype.newbyteorder("<"))
    header = [
        "ply", "format binary_little_endian 1.0",
        f"comment {CLOUD_MAGIC}",
        f"comment sh_degree {cloud.sh_degree}",
        "comment wavelengths " + " ".join(repr(float(x)) for x in cloud.basis.wavelengths_nm),
        f"element vertex {n}",
    ] + [f"property {ply_type} {name}" for name in names] + ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(np.ascontiguousarray(table).tobytes())


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2", "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class _PlyVertexTable:
    comments: list[str]
    names: list[str]
    data: np.ndarray


def _read_ply_vertices(path) -> _PlyVertexTable:
    with open(_require(Path(path)), "rb") as f:
        first = f.readline().strip()
        if first != b"ply":
            raise MagicMismatchError(f"{path}: not a PLY file")
        fmt = None
        comments: list[str] = []
        elements: list[tuple[str, int, list[tuple[str, str]]]] = []
        while True:
            line = f.readline()
            if not line:
                raise TruncatedPayloadError(f"{path}: header ended before end_header")
            tokens = line.decode("ascii", errors="replace").split()
            if not tokens:
                continue
            if tokens[0] == "end_header":
                break
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "comment":
                comments.append(" ".join(tokens[1:]))
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    raise SceneFormatError(f"{path}: list properties are not supported")
                if not elements or tokens[1] not in _PLY_TYPES:
                    raise SceneFormatError(f"{path}: bad property line {line!r}")
                elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
        body = f.read()
    if not elements or elements[0][0] != "vertex":
        raise SceneFormatError(f"{path}: first element must be 'vertex'")
    _, count, props = elements[0]
    names = [p[0] for p in props]
    if fmt == "ascii":
        rows = body.decode("ascii").split("\n")
        values = [r.split() for r in rows if r.strip()][:count]
        if len(values) < count:
            raise TruncatedPayloadError(f"{path}: {len(values)} vertex rows, expected {count}")
        table = np.array(values, dtype=np.float64)
        data = np.zeros(count, dtype=[(n, t) for n, t in props])
        for i, n in enumerate(names):
            data[n] = table[:, i]
        return _PlyVertexTable(comments, names, data)
    order = {"binary_little_endian": "<", "binary_big_endian": ">"}.get(fmt)
    if order is None:
        raise SceneFormatError(f"{path}: unsupported PLY format {fmt!r}")
    dtype = np.dtype([(n, order + t) for n, t in props])
    expected = dtype.itemsize * count
    if len(body) < expected:
        raise TruncatedPayloadError(f"{path}: vertex payload is {len(body)} bytes, expected {expected}")
    return _PlyVertexTable(comments, names, np.frombuffer(body[:expected], dtype=dtype, count=count))


def load_cloud(path) -> GaussianCloud:
    ply = _read_ply_vertices(path)
    if CLOUD_MAGIC not in ply.comments:
        raise MagicMismatchError(f"{path}: missing '{CLOUD_MAGIC}' comment")
    meta = {c.split()[0]: c.split()[1:] for c in ply.comments if c.split()}
    degree = int(meta["sh_degree"][0])
    basis = SpectralBasis(_parse_wavelengths(meta["wavelengths"]))
    k = num_sh_coeffs(degree)
    sh_names = [n for n in ply.names if n.startswith("sh_")]
    if len(sh_names) != basis.band_count * k:
        raise BandCountMismatchError(
            f"{path}: {len(sh_names)} SH properties for {basis.band_count} bands x {k} coefficients")
    data = ply.data
    dtype = data.dtype[0].newbyteorder("=")
    col = lambda names: np.stack([data[n].astype(dtype) for n in names], axis=1)
    n = len(data)
    return GaussianCloud(
        positions=col(["x", "y", "z"]),
        log_scales=col(["scale_0", "scale_1", "scale_2"]),
        rotations=col(["rot_0", "rot_1", "rot_2", "rot_3"]),
        opacity_logits=data["opacity"].astype(dtype),
        sh_coeffs=col([f"sh_{b}_{j}" for b in range(basis.band_count) for j in range(k)]).reshape(n, basis.band_count, k),
        sh_degree=degree,
        basis=basis,
    )


# ---------------------------------------------------------------- points

def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    encoded = np.asarray(encoded, dtype=np.float64)
    return np.where(encoded <= 0.04045, encoded / 12.92, ((encoded + 0.055) / 1.055) ** 2.4)


def lift_rgb_to_spectrum(rgb: np.ndarray, basis: SpectralBasis, color: ColorPipeConfig = ColorPipeConfig()) -> np.ndarray:
    """Flat spectra whose luminance through the colour pipe matches sRGB colours.

    ``rgb`` is display-encoded in [0, 1].  Each colour becomes a flat
    spectrum of height ``Y / Y_unit``, where ``Y`` is the colour's linear
    luminance and ``Y_unit`` the luminance of a flat unit spectrum after the
    pipe's XYZ scaling.
    """
    lin = srgb_decode(rgb)
    y_target = lin @ np.array([0.2126, 0.7152, 0.0722])
    pipe = get_pipe(color, basis)
    y_unit = pipe.scene_white[1] * pipe.norm
    value = np.clip(y_target / y_unit, 0.0, 1.0)
    return np.repeat(value[:, None], basis.band_count, axis=1)


def _spectral_columns(names: Sequence[str]) -> list[str]:
    cols = [n for n in names if re.fullmatch(r"(spec|band)_\d+", n)]
    return sorted(cols, key=lambda n: int(n.split("_")[1]))


def ingest_points(path, basis: SpectralBasis | None = None,
                  color: ColorPipeConfig = ColorPipeConfig()) -> PointSet:
    """Seed points from a PLY file with RGB or N-channel per-point colours."""
    ply = _read_ply_vertices(path)
    data = ply.data
    if not all(n in ply.names for n in ("x", "y", "z")):
        raise SceneFormatError(f"{path}: missing x/y/z properties")
    positions = np.stack([data[n].astype(np.float64) for n in ("x", "y", "z")], axis=1)
    spec_cols = _spectral_columns(ply.names)
    if spec_cols:
        spectra = np.stack([data[n].astype(np.float64) for n in spec_cols], axis=1)
        if basis is not None and spectra.shape[1] != basis.band_count:
            raise BandCountMismatchError(
                f"{path}: {spectra.shape[1]} spectral channels, basis has {basis.band_count} bands")
        return PointSet(positions, spectra)
    rgb_names = next((c for c in (("red", "green", "blue"), ("r", "g", "b")) if all(n in ply.names for n in c)), None)
    if rgb_names is None:
        raise MissingColorError("missing color properties")
    if basis is None:
        raise SceneFormatError("lifting RGB colours to spectra needs a spectral basis")
    rgb = np.stack([data[n] for n in rgb_names], axis=1)
    rgb = rgb / 255.0 if rgb.dtype.kind in "ui" else rgb.astype(np.float64)
    return PointSet(positions, lift_rgb_to_spectrum(rgb, basis, color))


def write_points(path, points: PointSet, rgb: np.ndarray | None = None) -> None:
    """Binary PLY with ``spec_<i>`` float properties (and optional uchar RGB)."""
    n, bands = points.spectra.shape
    fields_ = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")] + [(f"spec_{i}", "<f4") for i in range(bands)]
    if rgb is not None:
        fields_ += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    table = np.zeros(n, dtype=fields_)
    for i, name in enumerate("xyz"):
        table[name] = points.positions[:, i]
    for i in range(bands):
        table[f"spec_{i}"] = points.spectra[:, i]
    if rgb is not None:
        q = np.clip(np.round(np.asarray(rgb) * 255), 0, 255).astype(np.uint8)
        for i, name in enumerate(("red", "green", "blue")):
            table[name] = q[:, i]
    ply_type = {"<f4": "float", "u1": "uchar"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {ply_type[t]} {name}" for name, t in fields_] + ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(table.tobytes())


# ---------------------------------------------------------------- RGB images

def save_rgb(path, image: RgbImage) -> None:
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, np.asarray(image.data, dtype=np.float32))
    else:
        from PIL import Image

        q = np.clip(np.round(np.clip(image.data, 0, 1) * 255), 0, 255).astype(np.uint8)
        Image.fromarray(q).save(path)


def load_rgb(path) -> RgbImage:
    path = _require(Path(path))
    if path.suffix == ".npy":
        data = np.load(path).astype(np.float32)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"))
        data = arr.astype(np.float32) / 255.0
    if data.ndim != 3 or data.shape[2] != 3:
        raise SceneFormatError(f"{path}: RGB image must be H x W x 3, got {data.shape}")
    return RgbImage(data, ColorSpace.ENCODED)


# ---------------------------------------------------------------- manifests

def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingFileError(f"referenced file does not exist: {path}")
    return path


def load_scene(manifest_path) -> Scene:
    manifest_path = Path(manifest_path)
    doc = json.loads(_require(manifest_path).read_text())
    if doc.get("format") != SCENE_MAGIC:
        raise MagicMismatchError(f"{manifest_path}: expected format {SCENE_MAGIC!r}")
    root = manifest_path.parent
    basis = SpectralBasis(_parse_wavelengths([str(w) for w in doc["wavelengths_nm"]]))
    views = []
    for entry in doc["views"]:
        cube = load_cube(_require(root / entry["cube"]))
        if cube.basis.band_count != basis.band_count:
            raise BandCountMismatchError(
                f"{entry['cube']}: cube has {cube.basis.band_count} bands, manifest declares {basis.band_count}")
        if cube.basis != basis:
            raise WavelengthMismatchError(f"{entry['cube']}: cube wavelengths differ from the manifest")
        rgb = load_rgb(_require(root / entry["rgb"])) if entry.get("rgb") else None
        camera = Camera.from_dict(entry["camera"])
        if (cube.height, cube.width) != (camera.height, camera.width):
            raise SceneFormatError(f"{entry['cube']}: image size does not match its camera")
        views.append(View(entry["name"], camera, cube, rgb, entry.get("split", "train")))
    points = ingest_points(_require(root / doc["points"]), basis) if doc.get("points") else None
    cloud = load_cloud(_require(root / doc["cloud"])) if doc.get("cloud") else None
    extras = {k: v for k, v in doc.items() if k not in ("format", "wavelengths_nm", "views", "points", "cloud")}
    return Scene(basis, views, points, cloud, root, extras)


def save_scene(scene: Scene, directory, name: str = "scene.json") -> Path:
    directory = Path(directory)
    (directory / "cubes").mkdir(parents=True, exist_ok=True)
    entries = []
    for view in scene.views:
        entry = {"name": view.name, "split": view.split, "camera": view.camera.to_dict(),
                 "cube": f"cubes/{view.name}.cube", "rgb": None}
        save_cube(directory / entry["cube"], view.spectral)
        if view.rgb is not None:
            (directory / "rgb").mkdir(exist_ok=True)
            entry["rgb"] = f"rgb/{view.name}.npy"
            save_rgb(directory / entry["rgb"], view.rgb)
            save_rgb(directory / f"rgb/{view.name}.png", view.rgb)
        entries.append(entry)
    doc = {"format": SCENE_MAGIC, "wavelengths_nm": list(scene.basis.wavelengths_nm), "views": entries}
    if scene.points is not None:
        write_points(directory / "points.ply", scene.points)
        doc["points"] = "points.ply"
    if scene.cloud is not None:
        save_cloud(directory / "gt_cloud.ply", scene.cloud)
        doc["cloud"] = "gt_cloud.ply"
    doc.update(scene.extras)
    path = directory / name
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


# ---------------------------------------------------------------- band masks

def parse_band_mask(text: str, basis: SpectralBasis) -> list[int]:
    """Band indices from ``"0,3,5"``, index ranges ``"1-14"`` or wavelength ranges ``"431-808nm"``."""
    wl = basis.wavelengths_nm
    picked: set[int] = set()
    for item in (t.strip() for t in text.split(",") if t.strip()):
        m = re.fullmatch(r"(\d+(?:\.\d+)?)\s*-\s*(\d+(?:\.\d+)?)\s*nm", item)
        if m:
            lo, hi = float(m.group(1)), float(m.group(2))
            picked.update(i for i, w in enumerate(wl) if lo <= w <= hi)
            continue
        m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", item)
        if m:
            picked.update(range(int(m.group(1)), int(m.group(2)) + 1))
            continue
        if item.endswith("nm"):
            target = float(item[:-2])
            picked.update(i for i, w in enumerate(wl) if w == target)
            continue
        picked.add(int(item))
    mask = sorted(picked)
    if not mask:
        raise EmptyMaskError(f"band mask {text!r} selects no bands")
    if mask[-1] >= basis.band_count or mask[0] < 0:
        raise SceneFormatError(f"band mask {text!r} references bands outside 0..{basis.band_count - 1}")
    return mask


def select_bands(scene: Scene, mask: Sequence[int]) -> Scene:
    """Restrict every spectral quantity of ``scene`` to the bands in ``mask``."""
    idx = sorted(set(int(i) for i in mask))
    if not idx:
        raise EmptyMaskError("band mask is empty")
    if idx[0] < 0 or idx[-1] >= scene.basis.band_count:
        raise SceneFormatError(f"band index out of range 0..{scene.basis.band_count - 1}")
    views = [replace(v, spectral=v.spectral.with_bands(idx) if v.spectral is not None else None) for v in scene.views]
    points = PointSet(scene.points.positions, scene.points.spectra[:, idx]) if scene.points is not None else None
    cloud = scene.cloud.with_bands(idx) if scene.cloud is not None else None
    return replace(scene, basis=scene.basis.subset(idx), views=views, points=points, cloud=cloud)


# ---------------------------------------------------------------- importers

def read_pfm(path) -> np.ndarray:
    """Single-channel or RGB PFM as float32, top row first."""
    with open(_require(Path(path)), "rb") as f:
        kind = f.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise MagicMismatchError(f"{path}: not a PFM file")
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline())
        channels = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    if data.size < w * h * channels:
        raise TruncatedPayloadError(f"{path}: PFM payload too short")
    img = data[: w * h * channels].reshape(h, w, channels)[::-1]
    return img.astype(np.float32)


def import_band_stack(paths: Sequence[os.PathLike], wavelengths: Sequence[float]) -> SpectralImage:
    """Stack one grayscale image per band (PNG/TIFF or PFM) into a cube.

    Integer images are scaled by their type's maximum value.
    """
    if len(paths) != len(wavelengths):
        raise BandCountMismatchError(f"{len(paths)} band images for {len(wavelengths)} wavelengths")
    planes = []
    for p in paths:
        p = Path(p)
        if p.suffix.lower() == ".pfm":
            img = read_pfm(p)
            plane = img[..., 0] if img.shape[2] == 1 else img.mean(axis=2)
        else:
            from PIL import Image

            with Image.open(p) as im:
                arr = np.asarray(im)
            if arr.ndim == 3:
                arr = arr[..., :3].mean(axis=2).astype(arr.dtype)
            plane = arr / np.iinfo(arr.dtype).max if arr.dtype.kind in "ui" else arr
        planes.append(np.asarray(plane, dtype=np.float32))
    if len({p.shape for p in planes}) != 1:
        raise SceneFormatError("band images differ in size")
    return SpectralImage(np.stack(planes, axis=2), SpectralBasis(tuple(wavelengths)))


def import_transforms_json(path, width: int | None = None, height: int | None = None) -> list[tuple[str, Camera]]:
    """Cameras from a NeRF-style ``transforms.json``.

    That convention stores OpenGL camera-to-world matrices (y up, z back);
    the y and z camera axes are flipped to reach this package's OpenCV
    world-to-camera form.
    """
    doc = json.loads(Path(path).read_text())
    w = int(width or doc.get("w"))
    h = int(height or doc.get("h"))
    fx = doc.get("fl_x") or 0.5 * w / np.tan(0.5 * doc["camera_angle_x"])
    fy = doc.get("fl_y") or (0.5 * h / np.tan(0.5 * doc["camera_angle_y"]) if "camera_angle_y" in doc else fx)
    cx, cy = doc.get("cx", w / 2), doc.get("cy", h / 2)
    cams = []
    for i, frame in enumerate(doc["frames"]):
        c2w = np.asarray(frame["transform_matrix"], dtype=np.float64)
        c2w[:3, 1:3] *= -1
        w2c = np.eye(4)
        w2c[:3, :3] = c2w[:3, :3].T
        w2c[:3, 3] = -c2w[:3, :3].T @ c2w[:3, 3]
        name = Path(frame.get("file_path", f"frame_{i:03d}")).stem
        cams.append((name, Camera(w, h, fx, fy, cx, cy, w2c)))
    return cams

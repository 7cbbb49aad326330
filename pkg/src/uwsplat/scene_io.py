"""Scene loading (COLMAP text + images + pseudo-depth) and checkpoint persistence."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera
from .errors import (MalformedLine, MissingFile, MissingInitialPoints, SizeMismatch,
                     UnreadableFile, UnsupportedCameraModel, VersionMismatch)
from .gaussians import GaussianCloud
from .medium import MediumNet

TEST_EVERY = 8
SIDECAR_MAGIC = b"UWGSMLP1"
CHECKPOINT_VERSION = 1


@dataclass
class View:
    name: str
    camera_id: int
    image: np.ndarray               # (H, W, 3) in [0, 1]
    depth: np.ndarray | None = None  # (H, W) in [0, 1]


@dataclass
class SceneBundle:
    cameras: list[Camera]
    views: list[View]
    init_points: np.ndarray
    init_colors: np.ndarray
    train_idx: list[int] = field(default_factory=list)
    test_idx: list[int] = field(default_factory=list)

    def __post_init__(self):
        ids = {c.id for c in self.cameras}
        for v in self.views:
            if v.camera_id not in ids:
                raise ValueError(f"view {v.name} references unknown camera {v.camera_id}")
            v.image = np.clip(v.image, 0.0, 1.0)
        if not self.train_idx and not self.test_idx:
            self.train_idx, self.test_idx = split_indices([v.name for v in self.views])

    def camera(self, cam_id: int) -> Camera:
        for c in self.cameras:
            if c.id == cam_id:
                return c
        raise KeyError(cam_id)

    def view_camera(self, i: int) -> Camera:
        return self.camera(self.views[i].camera_id)

    def scene_center_radius(self):
        """Bounding sphere (centre, radius) of camera centres and initial points."""
        pts = np.concatenate([np.stack([c.center for c in self.cameras]), self.init_points])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        center = 0.5 * (lo + hi)
        return center, float(np.linalg.norm(pts - center, axis=1).max())


def split_indices(names):
    """Every 8th image (in sorted-name order) goes to the test split."""
    order = sorted(range(len(names)), key=lambda i: names[i])
    test = sorted(order[k] for k in range(0, len(order), TEST_EVERY))
    train = sorted(set(range(len(names))) - set(test))
    return train, test


# ---------------------------------------------------------------------------
# COLMAP text


def _data_lines(path: Path):
    if not path.exists():
        raise MissingFile(str(path))
    with open(path) as f:
        for no, line in enumerate(f, start=1):
            yield no, line.rstrip("\n")


def read_cameras_txt(path):
    path = Path(path)
    cams = {}
    for no, line in _data_lines(path):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        try:
            cid, model, w, h = int(parts[0]), parts[1], int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except (ValueError, IndexError) as e:
            raise MalformedLine(path, no, str(e)) from None
        if model == "PINHOLE":
            if len(params) != 4:
                raise MalformedLine(path, no, "PINHOLE needs fx fy cx cy")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise MalformedLine(path, no, "SIMPLE_PINHOLE needs f cx cy")
            fx, cx, cy = params
            fy = fx
        else:
            raise UnsupportedCameraModel(f"{path}:{no}: camera model {model}")
        cams[cid] = dict(model=model, width=w, height=h, fx=fx, fy=fy, cx=cx, cy=cy)
    return cams


def read_images_txt(path):
    """Returns a list of (image_id, qvec, tvec, camera_id, name)."""
    path = Path(path)
    out = []
    lines = list(_data_lines(path))
    i = 0
    while i < len(lines):
        no, line = lines[i]
        s = line.strip()
        i += 1
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        if len(parts) < 10:
            raise MalformedLine(path, no, "expected IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME")
        try:
            iid = int(parts[0])
            q = np.array([float(v) for v in parts[1:5]])
            t = np.array([float(v) for v in parts[5:8]])
            cid = int(parts[8])
        except ValueError as e:
            raise MalformedLine(path, no, str(e)) from None
        name = " ".join(parts[9:])
        out.append((iid, q, t, cid, name))
        i += 1  # POINTS2D line, possibly empty
    return out


def read_points3d_txt(path):
    path = Path(path)
    xyz, rgb = [], []
    for no, line in _data_lines(path):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        parts = s.split()
        try:
            xyz.append([float(v) for v in parts[1:4]])
            rgb.append([int(v) for v in parts[4:7]])
            if len(xyz[-1]) != 3 or len(rgb[-1]) != 3:
                raise ValueError("too few fields")
        except ValueError as e:
            raise MalformedLine(path, no, str(e)) from None
    return np.array(xyz, dtype=np.float64).reshape(-1, 3), np.array(rgb).reshape(-1, 3) / 255.0


def read_colmap_model(dir_path):
    """Parse the three sparse-model text files without touching images."""
    d = Path(dir_path)
    cams = read_cameras_txt(d / "cameras.txt")
    images = read_images_txt(d / "images.txt")
    pts, cols = read_points3d_txt(d / "points3D.txt")
    cameras = []
    for iid, q, t, cid, name in images:
        if cid not in cams:
            raise MalformedLine(d / "images.txt", 0, f"unknown camera id {cid}")
        k = cams[cid]
        cameras.append(Camera(iid, k["width"], k["height"], k["fx"], k["fy"], k["cx"], k["cy"],
                              q / np.linalg.norm(q), t))
    return cameras, [im[4] for im in images], pts, cols


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError:
        raise MissingFile(str(path)) from None
    except OSError as e:
        raise UnreadableFile(f"{path}: {e}") from None
    return arr


def load_colmap(dir_path, load_depth=True) -> SceneBundle:
    """Load a COLMAP text model, its images/ folder and optional depths/ folder.

    Depth maps are looked up as depths/<stem>.png (16-bit) or depths/<stem>.f32.
    """
    d = Path(dir_path)
    cameras, names, pts, cols = read_colmap_model(d)
    if len(pts) == 0:
        raise MissingInitialPoints(f"{d / 'points3D.txt'} has no points")
    views = []
    for cam, name in zip(cameras, names):
        img = load_image(d / "images" / name)
        if img.shape[:2] != (cam.height, cam.width):
            raise SizeMismatch(f"{name}: image {img.shape[:2]} vs camera {(cam.height, cam.width)}")
        depth = None
        if load_depth:
            stem = Path(name).stem
            for cand in (d / "depths" / f"{stem}.png", d / "depths" / f"{stem}.f32"):
                if cand.exists():
                    depth = load_depth_map(cand, cam.width, cam.height)
                    break
        views.append(View(name, cam.id, img, depth))
    return SceneBundle(cameras, views, pts, cols)


def _fmt(x) -> str:
    return repr(float(x))


def write_colmap(bundle: SceneBundle, dir_path, write_images=True):
    """Serialize a bundle in the layout :func:`load_colmap` reads."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    intr = {}
    for c in bundle.cameras:
        key = (c.width, c.height, c.fx, c.fy, c.cx, c.cy)
        intr.setdefault(key, len(intr) + 1)
    with open(d / "cameras.txt", "w") as f:
        f.write("# Camera list with one line of data per camera:\n")
        f.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for (w, h, fx, fy, cx, cy), cid in intr.items():
            f.write(f"{cid} PINHOLE {w} {h} {_fmt(fx)} {_fmt(fy)} {_fmt(cx)} {_fmt(cy)}\n")
    by_id = {c.id: c for c in bundle.cameras}
    with open(d / "images.txt", "w") as f:
        f.write("# Image list with two lines of data per image:\n")
        f.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        f.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for v in bundle.views:
            c = by_id[v.camera_id]
            cid = intr[(c.width, c.height, c.fx, c.fy, c.cx, c.cy)]
            vals = " ".join(_fmt(x) for x in (*c.rotation, *c.translation))
            f.write(f"{c.id} {vals} {cid} {v.name}\n\n")
    with open(d / "points3D.txt", "w") as f:
        f.write("# 3D point list with one line of data per point:\n")
        f.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[]\n")
        rgb = np.clip(np.round(np.asarray(bundle.init_colors) * 255), 0, 255).astype(int)
        for i, (p, c) in enumerate(zip(bundle.init_points, rgb), start=1):
            f.write(f"{i} {_fmt(p[0])} {_fmt(p[1])} {_fmt(p[2])} {c[0]} {c[1]} {c[2]} 0.0\n")
    if write_images:
        (d / "images").mkdir(exist_ok=True)
        for v in bundle.views:
            img = np.clip(np.round(v.image * 255), 0, 255).astype(np.uint8)
            Image.fromarray(img).save(d / "images" / v.name)
            if v.depth is not None:
                (d / "depths").mkdir(exist_ok=True)
                save_depth_f32(d / "depths" / f"{Path(v.name).stem}.f32", v.depth)


# ---------------------------------------------------------------------------
# depth maps


def save_depth_f32(path, depth):
    np.asarray(depth, dtype="<f4").tofile(path)


def save_depth_png16(path, depth):
    arr = np.clip(np.round(np.asarray(depth, dtype=np.float64) * 65535), 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_depth_map(path, width, height) -> np.ndarray:
    """Read a 16-bit PNG or raw little-endian f32 plane and min-max normalize it."""
    path = Path(path)
    if not path.exists():
        raise UnreadableFile(f"{path}: no such file")
    if path.suffix.lower() == ".png":
        try:
            with Image.open(path) as im:
                arr = np.asarray(im, dtype=np.float64)
        except OSError as e:
            raise UnreadableFile(f"{path}: {e}") from None
        if arr.ndim != 2:
            raise UnreadableFile(f"{path}: expected a single-channel image")
    else:
        raw = path.read_bytes()
        if len(raw) != 4 * width * height:
            raise SizeMismatch(f"{path}: {len(raw)} bytes, expected {4 * width * height}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(height, width)
    if arr.shape != (height, width):
        raise SizeMismatch(f"{path}: shape {arr.shape}, expected {(height, width)}")
    if not np.all(np.isfinite(arr)):
        raise UnreadableFile(f"{path}: non-finite depth values")
    lo, hi = arr.min(), arr.max()
    if hi - lo <= 0:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# checkpoints

PLY_TYPES = {"float": "<f4", "double": "<f8", "uchar": "u1", "int": "<i4", "uint": "<u4",
             "float32": "<f4", "float64": "<f8", "char": "i1", "short": "<i2", "ushort": "<u2"}
_EXTRA = ("grad_accum", "coverage_accum", "view_accum", "max_screen_radius")


@dataclass
class Checkpoint:
    gaussians: GaussianCloud
    net: MediumNet | None
    iteration: int = 0
    config_hash: str = ""
    meta: dict = field(default_factory=dict)


def _ply_fields(cloud: GaussianCloud):
    n_rest = 3 * (cloud.sh_coeffs.shape[-1] - 1)
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    names += list(_EXTRA)
    return names


def write_ply(path, cloud: GaussianCloud):
    """Binary little-endian PLY with the usual 3DGS property names (plus accumulators)."""
    n = len(cloud)
    tname = "double" if cloud.dtype == np.float64 else "float"
    names = _ply_fields(cloud)
    dt = np.dtype([(k, PLY_TYPES[tname]) for k in names])
    rec = np.empty(n, dtype=dt)
    rec["x"], rec["y"], rec["z"] = cloud.positions.T
    rec["nx"] = rec["ny"] = rec["nz"] = 0
    for c in range(3):
        rec[f"f_dc_{c}"] = cloud.sh_coeffs[:, c, 0]
    rest = cloud.sh_coeffs[:, :, 1:].reshape(n, -1)  # channel-major, as 3DGS stores it
    for i in range(rest.shape[1]):
        rec[f"f_rest_{i}"] = rest[:, i]
    rec["opacity"] = cloud.logit_opacities
    for i in range(3):
        rec[f"scale_{i}"] = cloud.log_scales[:, i]
    for i in range(4):
        rec[f"rot_{i}"] = cloud.rotations[:, i]
    for k in _EXTRA:
        rec[k] = getattr(cloud, k)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {tname} {k}" for k in names]
    header += ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def read_ply(path) -> GaussianCloud:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise UnreadableFile(f"{path}: {e}") from None
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise VersionMismatch(f"{path}: not a PLY file")
    header = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise VersionMismatch(f"{path}: only binary little-endian PLY is supported")
    n, props = None, []
    for line in header:
        parts = line.split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            if parts[1] not in PLY_TYPES:
                raise VersionMismatch(f"{path}: unsupported property type {parts[1]}")
            props.append((parts[2], PLY_TYPES[parts[1]]))
    dt = np.dtype(props)
    body = data[end + len(b"end_header\n"):]
    if n is None or len(body) != n * dt.itemsize:
        raise VersionMismatch(f"{path}: vertex payload does not match header")
    rec = np.frombuffer(body, dtype=dt)
    names = dt.names
    n_rest = sum(1 for k in names if k.startswith("f_rest_"))
    B = n_rest // 3 + 1
    store = np.float64 if rec.dtype["x"] == np.dtype("<f8") else np.float32
    sh = np.zeros((n, 3, B), dtype=store)
    for c in range(3):
        sh[:, c, 0] = rec[f"f_dc_{c}"]
    if n_rest:
        rest = np.stack([rec[f"f_rest_{i}"] for i in range(n_rest)], -1)
        sh[:, :, 1:] = rest.reshape(n, 3, B - 1)
    cloud = GaussianCloud(
        positions=np.stack([rec["x"], rec["y"], rec["z"]], -1).astype(store),
        rotations=np.stack([rec[f"rot_{i}"] for i in range(4)], -1).astype(store),
        log_scales=np.stack([rec[f"scale_{i}"] for i in range(3)], -1).astype(store),
        logit_opacities=np.array(rec["opacity"], dtype=store),
        sh_coeffs=sh,
    )
    for k in _EXTRA:
        if k in names:
            setattr(cloud, k, np.array(rec[k], dtype=store))
    return cloud


def write_sidecar(path, net: MediumNet):
    """Magic, uint32 layer count, uint32 (rows, cols) per layer, then row-major f32."""
    order = net.param_order()
    with open(path, "wb") as f:
        f.write(SIDECAR_MAGIC)
        f.write(struct.pack("<I", len(order)))
        for k in order:
            r, c = net.params[k].shape
            f.write(struct.pack("<II", r, c))
        for k in order:
            f.write(np.ascontiguousarray(net.params[k], dtype="<f4").tobytes())


def read_sidecar(path):
    """Returns the list of weight matrices stored in a sidecar file."""
    data = Path(path).read_bytes()
    if data[:8] != SIDECAR_MAGIC:
        raise VersionMismatch(f"{path}: bad magic")
    (count,) = struct.unpack_from("<I", data, 8)
    off = 12
    if len(data) < off + 8 * count:
        raise VersionMismatch(f"{path}: truncated shape header")
    shapes = [struct.unpack_from("<II", data, off + 8 * i) for i in range(count)]
    off += 8 * count
    total = sum(r * c for r, c in shapes)
    if len(data) - off != 4 * total:
        raise VersionMismatch(f"{path}: parameter payload does not match declared shapes")
    flat = np.frombuffer(data, dtype="<f4", offset=off)
    out, i = [], 0
    for r, c in shapes:
        out.append(flat[i:i + r * c].reshape(r, c).copy())
        i += r * c
    return out


def save_checkpoint(path, ckpt: Checkpoint):
    """Write point_cloud.ply, medium.bin (if any) and meta.json into directory `path`."""
    if len(ckpt.gaussians) == 0:
        raise ValueError("refusing to save an empty cloud")
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / "point_cloud.ply", ckpt.gaussians)
    meta = dict(ckpt.meta)
    meta.update(format="uwsplat-checkpoint", version=CHECKPOINT_VERSION,
                iteration=int(ckpt.iteration), config_hash=ckpt.config_hash,
                has_medium=ckpt.net is not None)
    if ckpt.net is not None:
        write_sidecar(d / "medium.bin", ckpt.net)
        meta.update(z_freqs=ckpt.net.z_freqs, dir_freqs=ckpt.net.dir_freqs,
                    hidden=ckpt.net.hidden)
    (d / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_checkpoint(path) -> Checkpoint:
    d = Path(path)
    try:
        meta = json.loads((d / "meta.json").read_text())
    except FileNotFoundError:
        raise MissingFile(str(d / "meta.json")) from None
    if meta.get("format") != "uwsplat-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise VersionMismatch(f"{d}: unknown checkpoint format/version")
    cloud = read_ply(d / "point_cloud.ply")
    net = None
    if meta.get("has_medium"):
        mats = read_sidecar(d / "medium.bin")
        net = MediumNet(meta["z_freqs"], meta["dir_freqs"], meta["hidden"], dtype=np.float32)
        order = net.param_order()
        if len(mats) != len(order) or any(
                m.shape != net.params[k].shape for m, k in zip(mats, order)):
            raise VersionMismatch(f"{d}: sidecar layer shapes do not match the medium net")
        for m, k in zip(mats, order):
            net.params[k] = m
    iteration, config_hash = meta["iteration"], meta["config_hash"]
    for k in ("format", "version", "iteration", "config_hash", "has_medium"):
        meta.pop(k, None)
    return Checkpoint(cloud, net, iteration, config_hash, meta)


def minmax_or_zero(depth):
    """Min-max normalize a depth map (constant maps become zeros)."""
    d = np.asarray(depth, dtype=np.float64)
    lo, hi = d.min(), d.max()
    return np.zeros_like(d) if hi - lo <= 0 else (d - lo) / (hi - lo)

"""Datasets: the transforms.json loader, the analytic synthetic-scene generator
(the desk-scale ground-truth oracle), sparse SfM points, and PNG helpers.

All pose conversion between the OpenGL-style camera-to-world matrices stored in
transforms.json (camera looks down -z, y up) and this package's +z/y-down
convention happens here and nowhere else.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ParseError, UsageError
from .meshing import TriangleMesh, marching_cubes, read_mesh, write_mesh
from .scene import Camera


@dataclass
class Dataset:
    cameras: list
    images: list                     # H x W x 3 float in [0,1], composited
    masks: list | None               # H x W bool, or None
    sparse_depth: dict | None        # frame index -> (K,3) array of (u, v, z)
    gt_mesh: TriangleMesh | None
    bounds: np.ndarray               # (2,3)
    background: np.ndarray           # (3,)
    name: str = "dataset"
    test_cameras: list = dc_field(default_factory=list)
    test_images: list = dc_field(default_factory=list)
    test_masks: list = dc_field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cameras)

    @property
    def camera_extent(self) -> float:
        centers = np.stack([c.center for c in self.cameras])
        centroid = centers.mean(axis=0)
        return float(np.linalg.norm(centers - centroid, axis=1).max())


# ---------------------------------------------------------------------------
# PNG helpers
# ---------------------------------------------------------------------------

def read_png(path) -> np.ndarray:
    """PNG -> float array in [0,1]; RGBA kept as 4 channels."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    return arr.astype(np.float64) / 255.0


def write_png(path, img: np.ndarray) -> None:
    """Float image in [0,1] (HxW, HxWx3 or HxWx4) -> 8-bit PNG."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(path)


def write_raw_array(path, arr: np.ndarray) -> None:
    """Float32 dump for depth/normal maps (numpy .npy container)."""
    np.save(path, np.asarray(arr, dtype=np.float32))


# ---------------------------------------------------------------------------
# NeRF-synthetic layout
# ---------------------------------------------------------------------------

GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


def _c2w_gl_to_w2c(c2w_gl: np.ndarray) -> np.ndarray:
    c2w = np.asarray(c2w_gl, dtype=np.float64) @ GL_TO_CV
    w2c = np.eye(4)
    R = c2w[:3, :3].T
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ c2w[:3, 3]
    return w2c


def _w2c_to_c2w_gl(w2c: np.ndarray) -> np.ndarray:
    c2w = np.eye(4)
    R = w2c[:3, :3]
    c2w[:3, :3] = R.T
    c2w[:3, 3] = -R.T @ w2c[:3, 3]
    return c2w @ GL_TO_CV


def load_nerf_synthetic(root, split: str = "train", background=None) -> Dataset:
    """Load a transforms_{split}.json dataset (NeRF-synthetic schema).

    The alpha channel, when present, becomes the mask and the RGB is
    composited over the background (white by default; a meta.json written by
    the synthesizer can override background and bounds).
    """
    root = Path(root)
    tpath = root / f"transforms_{split}.json"
    if not tpath.exists():
        raise ParseError(f"{tpath}: transforms file not found")
    try:
        with open(tpath) as f:
            meta = json.load(f)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{tpath}: invalid JSON ({exc})") from exc
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise ParseError(f"{tpath}: missing camera_angle_x or frames")

    extras = {}
    if (root / "meta.json").exists():
        with open(root / "meta.json") as f:
            extras = json.load(f)
    if background is None:
        background = extras.get("background", [1.0, 1.0, 1.0])
    background = np.asarray(background, dtype=np.float64)
    bounds = np.asarray(extras.get("bounds", [[-1.5, -1.5, -1.5], [1.5, 1.5, 1.5]]),
                        dtype=np.float64)

    cameras, images, masks = [], [], []
    any_mask = False
    for frame in meta["frames"]:
        rel = frame["file_path"]
        img_path = root / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise ParseError(f"{tpath}: frame image missing: {img_path}")
        arr = read_png(img_path)
        h, w = arr.shape[:2]
        fx = 0.5 * w / np.tan(0.5 * float(meta["camera_angle_x"]))
        w2c = _c2w_gl_to_w2c(frame["transform_matrix"])
        cameras.append(Camera(w, h, fx, fx, w / 2.0, h / 2.0, w2c))
        if arr.ndim == 3 and arr.shape[2] == 4:
            alpha = arr[:, :, 3]
            rgb = arr[:, :, :3] * alpha[:, :, None] + background * (1.0 - alpha[:, :, None])
            masks.append(alpha > 0.5)
            any_mask = True
        else:
            rgb = arr[:, :, :3]
            masks.append(None)
        images.append(rgb)

    sparse = None
    spath = root / "sparse_depth.json"
    if split == "train" and spath.exists():
        with open(spath) as f:
            raw = json.load(f)
        sparse = {int(k): np.asarray(v, dtype=np.float64).reshape(-1, 3)
                  for k, v in raw.items()}

    gt_mesh = None
    gpath = root / "gt_mesh.ply"
    if gpath.exists():
        gt_mesh = read_mesh(gpath)

    return Dataset(cameras, images, masks if any_mask else None, sparse, gt_mesh,
                   bounds, background, name=f"{root.name}/{split}")


# ---------------------------------------------------------------------------
# analytic primitives
# ---------------------------------------------------------------------------

def sphere_sdf(p, radius=0.5, center=(0.0, 0.0, 0.0)):
    p = np.atleast_2d(p) - np.asarray(center)
    return np.linalg.norm(p, axis=1) - radius


def box_sdf(p, half_extents=(0.3, 0.25, 0.25), center=(0.0, 0.0, 0.0)):
    p = np.abs(np.atleast_2d(p) - np.asarray(center)) - np.asarray(half_extents)
    outside = np.linalg.norm(np.maximum(p, 0.0), axis=1)
    inside = np.minimum(np.max(p, axis=1), 0.0)
    return outside + inside


def torus_sdf(p, major=0.45, minor=0.15, center=(0.0, 0.0, 0.0)):
    p = np.atleast_2d(p) - np.asarray(center)
    q = np.stack([np.linalg.norm(p[:, :2], axis=1) - major, p[:, 2]], axis=1)
    return np.linalg.norm(q, axis=1) - minor


class AnalyticSdf:
    """Closed-form scene SDF with finite-difference gradients; meshable."""

    def __init__(self, fn, bounds=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))):
        self._fn = fn
        self.bounds = np.asarray(bounds, dtype=np.float64)

    def eval(self, x):
        single = np.asarray(x).ndim == 1
        v = self._fn(np.atleast_2d(np.asarray(x, dtype=np.float64)))
        return float(v[0]) if single else v

    def grad(self, x, h=1e-5):
        x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = np.empty_like(x2)
        for k in range(3):
            dp = x2.copy()
            dm = x2.copy()
            dp[:, k] += h
            dm[:, k] -= h
            g[:, k] = (self._fn(dp) - self._fn(dm)) / (2 * h)
        return g[0] if np.asarray(x).ndim == 1 else g


def make_primitive(primitive: str, params: dict | None = None) -> AnalyticSdf:
    params = dict(params or {})
    if primitive == "sphere":
        r = params.get("radius", 0.5)
        if r <= 0:
            raise UsageError("sphere radius must be positive")
        return AnalyticSdf(lambda p: sphere_sdf(p, r))
    if primitive == "box":
        he = params.get("half_extents", (0.35, 0.3, 0.25))
        if np.any(np.asarray(he) <= 0):
            raise UsageError("box half extents must be positive")
        return AnalyticSdf(lambda p: box_sdf(p, he))
    if primitive == "torus":
        major = params.get("major", 0.45)
        minor = params.get("minor", 0.15)
        if minor <= 0 or major <= minor:
            raise UsageError("torus needs major > minor > 0")
        return AnalyticSdf(lambda p: torus_sdf(p, major, minor))
    if primitive == "union":
        r = params.get("radius", 0.35)
        he = params.get("half_extents", (0.3, 0.25, 0.25))
        sc = params.get("sphere_center", (-0.3, 0.0, 0.05))
        bc = params.get("box_center", (0.3, 0.0, 0.0))
        if r <= 0 or np.any(np.asarray(he) <= 0):
            raise UsageError("union needs positive radius and half extents")
        return AnalyticSdf(lambda p: np.minimum(sphere_sdf(p, r, sc), box_sdf(p, he, bc)))
    raise UsageError(f"unknown primitive {primitive!r} "
                     "(choose sphere, box, torus or union)")


# ---------------------------------------------------------------------------
# synthetic scene rendering (sphere tracing + Lambertian shading)
# ---------------------------------------------------------------------------

_LIGHTS = [
    (np.array([0.55, -0.45, 0.70]), np.array([0.95, 0.93, 0.88])),
    (np.array([-0.65, 0.35, 0.35]), np.array([0.30, 0.34, 0.42])),
]
_AMBIENT = 0.18


def _albedo(p: np.ndarray) -> np.ndarray:
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    r = 0.55 + 0.30 * np.sin(3.1 * x + 1.3) * np.sin(2.3 * y + 0.7)
    g = 0.50 + 0.30 * np.sin(2.6 * y + 2.1) * np.sin(2.9 * z + 1.1)
    b = 0.45 + 0.30 * np.sin(2.2 * z + 0.4) * np.sin(3.3 * x + 2.6)
    return np.stack([r, g, b], axis=1)


def _sphere_trace(sdf: AnalyticSdf, origins, dirs, t_near, t_far,
                  max_steps=192, tol=5e-5):
    t = np.maximum(t_near, 0.0).copy()
    hit = np.zeros(len(origins), dtype=bool)
    active = t < t_far
    for _ in range(max_steps):
        if not active.any():
            break
        p = origins[active] + t[active, None] * dirs[active]
        f = sdf.eval(p)
        newly_hit = f < tol
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[idx] += np.maximum(f, tol) * 0.95
        still = ~newly_hit & (t[idx] < t_far[idx])
        active[idx] = still
    return hit, t


def _view_ring(n_views: int, distance: float, rng) -> list:
    """Deterministic golden-angle spiral of look-at cameras around the origin."""
    golden = np.pi * (3.0 - np.sqrt(5.0))
    phase = rng.uniform(0.0, 2 * np.pi)
    cams = []
    for i in range(n_views):
        az = phase + i * golden
        sin_el = -0.65 + 1.3 * ((i + 0.5) / n_views)
        el = np.arcsin(sin_el)
        pos = distance * np.array([np.cos(el) * np.cos(az),
                                   np.cos(el) * np.sin(az),
                                   np.sin(el)])
        cams.append(pos)
    return cams


def synth_scene(primitive: str = "union", params: dict | None = None,
                n_views: int = 32, resolution: int = 64, rng=0,
                n_test_views: int = 8, distance: float = 2.4, fov_x: float = 0.85,
                gt_mesh_resolution: int = 256, sparse_per_view: int = 200) -> Dataset:
    """Ray-traced dataset of an analytic SDF scene, with ground truth attached.

    Cameras sit on a golden-angle spiral looking at the origin; images are
    sphere-traced and Lambertian-shaded under two directional lights; masks are
    hit masks; the ground-truth mesh is marching cubes on the analytic SDF; the
    sparse depth pseudo-SfM set holds camera-space z at random foreground
    pixels. Everything is deterministic given the seed.
    """
    if n_views < 2:
        raise UsageError("synth_scene needs n_views >= 2")
    if isinstance(rng, (int, np.integer)) or rng is None:
        rng = np.random.default_rng(rng)
    sdf = make_primitive(primitive, params)
    positions = _view_ring(n_views + n_test_views, distance, rng)
    cameras = [Camera.look_at(p, (0, 0, 0), width=resolution, height=resolution,
                              fov_x=fov_x) for p in positions]

    images, masks, depths = [], [], []
    for cam in cameras:
        us, vs = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
        uv = np.stack([us.ravel(), vs.ravel()], axis=1)
        origins, dirs = cam.pixel_rays(uv)
        from .volumetric import intersect_aabb
        t0, t1 = intersect_aabb(origins, dirs, sdf.bounds[0], sdf.bounds[1])
        hit0 = t1 > t0
        hit = np.zeros(len(uv), dtype=bool)
        t = np.zeros(len(uv))
        if hit0.any():
            h, tt = _sphere_trace(sdf, origins[hit0], dirs[hit0], t0[hit0], t1[hit0])
            hit[np.flatnonzero(hit0)[h]] = True
            t[hit0] = tt
        img = np.zeros((len(uv), 3))
        if hit.any():
            p = origins[hit] + t[hit, None] * dirs[hit]
            n = sdf.grad(p)
            n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)
            shade = np.full((len(p), 3), _AMBIENT)
            for ldir, lcol in _LIGHTS:
                ld = ldir / np.linalg.norm(ldir)
                shade += np.maximum(n @ ld, 0.0)[:, None] * lcol
            img[hit] = np.clip(_albedo(p) * shade, 0.0, 1.0)
        images.append(img.reshape(cam.height, cam.width, 3))
        masks.append(hit.reshape(cam.height, cam.width))
        zc = np.zeros(len(uv))
        if hit.any():
            zc[hit] = (origins[hit] + t[hit, None] * dirs[hit] - cam.center) \
                @ cam.rotation[2]
        depths.append(zc.reshape(cam.height, cam.width))

    sparse = {}
    for i in range(n_views):
        ys, xs = np.nonzero(masks[i])
        if len(xs) == 0:
            sparse[i] = np.zeros((0, 3))
            continue
        k = min(sparse_per_view, len(xs))
        pick = rng.choice(len(xs), size=k, replace=False)
        sparse[i] = np.stack([xs[pick] + 0.5, ys[pick] + 0.5,
                              depths[i][ys[pick], xs[pick]]], axis=1)

    gt_mesh = marching_cubes(sdf, gt_mesh_resolution)
    return Dataset(cameras[:n_views], images[:n_views], masks[:n_views], sparse,
                   gt_mesh, sdf.bounds.copy(), np.zeros(3),
                   name=f"synth-{primitive}",
                   test_cameras=cameras[n_views:], test_images=images[n_views:],
                   test_masks=masks[n_views:])


def write_synth_dataset(ds: Dataset, out_dir, camera_fov_x: float = 0.85,
                        extra_meta: dict | None = None) -> None:
    """Write a synth_scene dataset in the NeRF-synthetic directory layout."""
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)

    def dump_split(name, cameras, images, masks):
        frames = []
        for i, cam in enumerate(cameras):
            rel = f"./{name}/r_{i}"
            rgba = np.concatenate([images[i],
                                   masks[i][:, :, None].astype(np.float64)], axis=2)
            write_png(out / f"{name}/r_{i}.png", rgba)
            frames.append({"file_path": rel,
                           "transform_matrix": _w2c_to_c2w_gl(cam.world_to_camera).tolist()})
        fov = 2.0 * np.arctan(0.5 * cameras[0].width / cameras[0].fx)
        with open(out / f"transforms_{name}.json", "w") as f:
            json.dump({"camera_angle_x": fov, "frames": frames}, f, indent=1)

    dump_split("train", ds.cameras, ds.images, ds.masks)
    dump_split("test", ds.test_cameras, ds.test_images, ds.test_masks)
    with open(out / "sparse_depth.json", "w") as f:
        json.dump({str(k): v.tolist() for k, v in (ds.sparse_depth or {}).items()}, f)
    meta = {"background": ds.background.tolist(), "bounds": ds.bounds.tolist()}
    meta.update(extra_meta or {})
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=1)
    if ds.gt_mesh is not None:
        write_mesh(ds.gt_mesh, out / "gt_mesh.ply")


# ---------------------------------------------------------------------------
# sparse SfM points
# ---------------------------------------------------------------------------

_PLY_SCALARS = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("u1", 1), "uint8": ("u1", 1),
    "char": ("i1", 1), "int8": ("i1", 1),
    "short": ("<i2", 2), "ushort": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4), "uint": ("<u4", 4),
}


def load_sfm_points(path):
    """PLY point cloud -> (points (N,3), colors (N,3) in [0,1] or None)."""
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.find(b"end_header")
    if end < 0:
        raise ParseError(f"{path}: no end_header in PLY")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end:]
    body = body[body.find(b"\n") + 1:]
    fmt = None
    props = []
    count = 0
    in_vertex = False
    for ln, line in enumerate(header, 1):
        tok = line.strip().split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise ParseError(f"{path}:{ln}: list property in vertex element")
            if tok[1] not in _PLY_SCALARS:
                raise ParseError(f"{path}:{ln}: unsupported property type {tok[1]}")
            props.append((tok[2], tok[1]))
    if fmt is None:
        raise ParseError(f"{path}: missing format line")
    names = [p[0] for p in props]
    for needed in ("x", "y", "z"):
        if needed not in names:
            raise ParseError(f"{path}: vertex element lacks '{needed}'")
    if fmt == "ascii":
        lines = body.decode("ascii").splitlines()
        rows = []
        for i in range(count):
            parts = lines[i].split()
            if len(parts) != len(props):
                raise ParseError(f"{path}: vertex {i} has {len(parts)} fields, "
                                 f"expected {len(props)}")
            rows.append([float(v) for v in parts])
        arr = np.asarray(rows, dtype=np.float64).reshape(count, len(props))
        cols = {nm: arr[:, i] for i, nm in enumerate(names)}
        scale = {nm: (255.0 if typ in ("uchar", "uint8") else 1.0)
                 for nm, typ in props}
    elif fmt == "binary_little_endian":
        dtype = np.dtype([(nm, _PLY_SCALARS[typ][0]) for nm, typ in props])
        rec = np.frombuffer(body, dtype=dtype, count=count)
        cols = {nm: rec[nm].astype(np.float64) for nm in names}
        scale = {nm: (255.0 if typ in ("uchar", "uint8") else 1.0)
                 for nm, typ in props}
    else:
        raise ParseError(f"{path}: unsupported PLY format {fmt}")
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)
    colors = None
    if all(c in cols for c in ("red", "green", "blue")):
        colors = np.stack([cols["red"] / scale["red"],
                           cols["green"] / scale["green"],
                           cols["blue"] / scale["blue"]], axis=1)
    return pts, colors

"""Procedural scenes, an analytic ray-trace renderer, the orbit camera rig,
and on-disk dataset persistence.

Scenes are small unions of solid-colored spheres and axis-aligned boxes, all
contained in the unit sphere so a fixed camera orbit with a fixed near/far
range covers every surface point. Rendering intersects rays analytically, so
depth maps are exact to float precision — useful both as training ground
truth and as the reference when judging generated geometry.

Disk layout (all within one dataset directory)::

    manifest.json            scene list, cameras, near/far, image size
    scene_0000/rgb_00.png    8-bit RGB
    scene_0000/depth_00.f32  16-byte header (magic 'MVDF', u32 height,
                             u32 width, little-endian) + H*W float32 LE
                             row-major normalized depth
    scene_0000/mask_00.u8    16-byte header (magic 'MVMK', u32 height,
                             u32 width) + H*W bytes, 1 = foreground

RGB pixels live in [-1, 1] in memory and as [0, 255] in the PNG. Depth is
normalized affinely from metric [near, far] to [-1, 1]; background pixels
carry the +1 far sentinel.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import geometry as geo
from .errors import CorruptManifest, InvalidBounds, InvalidRadius

_DEPTH_MAGIC = b"MVDF"
_MASK_MAGIC = b"MVMK"

# fixed directional light, world frame, pointing from the scene toward the sun
_LIGHT = np.array([0.3, -0.5, 0.8])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)

_AMBIENT = 0.25
_DIFFUSE = 0.75


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray  # albedo in [0, 1]

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center) + self.radius)


@dataclass(frozen=True)
class Box:
    center: np.ndarray
    half_extent: np.ndarray
    color: np.ndarray

    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.center) + np.linalg.norm(self.half_extent))


Primitive = Sphere | Box


@dataclass(frozen=True)
class Scene:
    """A non-empty union of primitives, all inside the unit sphere."""

    primitives: tuple

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for p in self.primitives:
            if p.bounding_radius() > 1.0 + 1e-9:
                raise ValueError(f"primitive extends outside the unit sphere: {p}")


@dataclass(frozen=True)
class RenderedView:
    """One posed RGB-D observation.

    rgb: (H, W, 3) float32 in [-1, 1]; depth: (H, W) float32 normalized to
    [-1, 1] with +1 on background; mask: (H, W) bool foreground flag.
    """

    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    camera: geo.Camera


def normalize_depth(z, near: float, far: float):
    """Affine map [near, far] -> [-1, 1]."""
    if not near < far:
        raise InvalidBounds(f"near {near} must be < far {far}")
    return 2.0 * (np.asarray(z) - near) / (far - near) - 1.0


def denormalize_depth(d, near: float, far: float):
    """Inverse of :func:`normalize_depth`."""
    if not near < far:
        raise InvalidBounds(f"near {near} must be < far {far}")
    return (np.asarray(d) + 1.0) * 0.5 * (far - near) + near


def random_scene(rng: np.random.Generator) -> Scene:
    """Seeded composite of 2-5 primitives with margin inside the unit sphere."""
    n = int(rng.integers(2, 6))
    prims = []
    for _ in range(n):
        color = rng.uniform(0.2, 1.0, size=3)
        if rng.random() < 0.5:
            radius = float(rng.uniform(0.15, 0.45))
            center = _random_point_in_ball(rng, 0.95 - radius)
            prims.append(Sphere(center, radius, color))
        else:
            half = rng.uniform(0.1, 0.35, size=3)
            center = _random_point_in_ball(rng, 0.95 - float(np.linalg.norm(half)))
            prims.append(Box(center, half, color))
    return Scene(tuple(prims))


def _random_point_in_ball(rng: np.random.Generator, radius: float) -> np.ndarray:
    while True:
        p = rng.uniform(-1.0, 1.0, size=3)
        if np.dot(p, p) <= 1.0:
            return p * radius


def default_intrinsics(width: int, height: int, radius: float = 2.0, fill: float = 0.8) -> np.ndarray:
    """Pinhole intrinsics sized so the unit sphere fills ``fill`` of the image.

    The unit sphere seen from distance ``radius`` subtends a half-angle
    asin(1/radius); the focal length maps its tangent to ``fill`` of the
    half-width.
    """
    half_angle = math.asin(min(1.0, 1.0 / radius))
    f = fill * (min(width, height) / 2.0) / math.tan(half_angle)
    return np.array([
        [f, 0.0, (width - 1) / 2.0],
        [0.0, f, (height - 1) / 2.0],
        [0.0, 0.0, 1.0],
    ])


def make_rig(num_views: int = 16, elevation_deg: float = 30.0, radius: float = 2.0,
             image_size: int = 32) -> list[geo.Camera]:
    """Orbit of cameras at fixed elevation, azimuths evenly covering 360 degrees,
    all looking at the origin with the world +z axis up.

    Raises
    ------
    InvalidRadius
        If radius <= 1 (the camera would sit inside the scene sphere).
    """
    if num_views < 1:
        raise ValueError("num_views must be >= 1")
    if radius <= 1.0:
        raise InvalidRadius(f"rig radius {radius} must exceed the unit scene sphere")
    K = default_intrinsics(image_size, image_size, radius)
    el = math.radians(elevation_deg)
    cams = []
    for i in range(num_views):
        az = 2.0 * math.pi * i / num_views
        pos = radius * np.array([
            math.cos(el) * math.cos(az),
            math.cos(el) * math.sin(az),
            math.sin(el),
        ])
        cams.append(geo.look_at_camera(pos, [0.0, 0.0, 0.0], K, image_size, image_size))
    return cams


# -- ray tracing ----------------------------------------------------------

def _intersect_sphere(origin, dirs, sphere: Sphere):
    oc = origin - sphere.center
    b = dirs @ oc
    c = float(oc @ oc) - sphere.radius ** 2
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    s = -b - sq
    hit &= s > 1e-6
    return np.where(hit, s, np.inf)


def _intersect_box(origin, dirs, box: Box):
    lo = box.center - box.half_extent
    hi = box.center + box.half_extent
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    # along zero-direction axes the ray is parallel to the slab: inside iff
    # origin between the planes, encoded as -inf/+inf bounds
    para = dirs == 0.0
    inside = (origin >= lo) & (origin <= hi)
    t_lo = np.where(para, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    t_hi = np.where(para, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    tn = t_lo.max(axis=-1)
    tf = t_hi.min(axis=-1)
    hit = (tn <= tf) & (tn > 1e-6)
    return np.where(hit, tn, np.inf)


def _normal_at(prim: Primitive, points: np.ndarray) -> np.ndarray:
    if isinstance(prim, Sphere):
        n = points - prim.center
        return n / np.linalg.norm(n, axis=-1, keepdims=True)
    q = (points - prim.center) / prim.half_extent
    axis = np.argmax(np.abs(q), axis=-1)
    n = np.zeros_like(points)
    rows = np.arange(points.shape[0])
    n[rows, axis] = np.sign(q[rows, axis])
    return n


def render(scene: Scene, camera: geo.Camera, near: float = 1.0, far: float = 3.0) -> RenderedView:
    """Ray-trace one view: nearest-hit Lambertian shading and exact depth.

    Depth is the camera-frame z of the hit point (not ray length), so
    ``geometry.unproject`` maps (pixel, metric depth) back onto the surface.
    """
    H, W = camera.height, camera.width
    uu, vv = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    pixels = np.stack([uu, vv], axis=-1).reshape(-1, 2)
    origin = camera.center
    _, dirs = geo.rays_for_pixels(camera, pixels)

    s_best = np.full(pixels.shape[0], np.inf)
    idx_best = np.full(pixels.shape[0], -1, dtype=np.intp)
    for k, prim in enumerate(scene.primitives):
        if isinstance(prim, Sphere):
            s = _intersect_sphere(origin, dirs, prim)
        else:
            s = _intersect_box(origin, dirs, prim)
        closer = s < s_best
        s_best = np.where(closer, s, s_best)
        idx_best = np.where(closer, k, idx_best)

    mask = idx_best >= 0
    points = origin + dirs * np.where(mask, s_best, 0.0)[:, None]

    rgb01 = np.zeros((pixels.shape[0], 3))
    for k, prim in enumerate(scene.primitives):
        sel = idx_best == k
        if not np.any(sel):
            continue
        n = _normal_at(prim, points[sel])
        lam = _AMBIENT + _DIFFUSE * np.maximum(0.0, n @ _LIGHT)
        rgb01[sel] = prim.color * lam[:, None]

    z = (points @ camera.rotation.T + camera.translation)[:, 2]
    depth_norm = np.where(mask, normalize_depth(z, near, far), 1.0)

    return RenderedView(
        rgb=(rgb01 * 2.0 - 1.0).reshape(H, W, 3).astype(np.float32),
        depth=depth_norm.reshape(H, W).astype(np.float32),
        mask=mask.reshape(H, W),
        camera=camera,
    )


# -- persistence ----------------------------------------------------------

def _scene_to_manifest(scene: Scene) -> list[dict]:
    out = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            out.append({"kind": "sphere", "center": [float(x) for x in p.center],
                        "radius": float(p.radius), "color": [float(x) for x in p.color]})
        else:
            out.append({"kind": "box", "center": [float(x) for x in p.center],
                        "half_extent": [float(x) for x in p.half_extent],
                        "color": [float(x) for x in p.color]})
    return out


def _scene_from_manifest(entries: list) -> Scene:
    prims = []
    for e in entries:
        kind = e.get("kind")
        if kind == "sphere":
            prims.append(Sphere(np.array(e["center"]), float(e["radius"]), np.array(e["color"])))
        elif kind == "box":
            prims.append(Box(np.array(e["center"]), np.array(e["half_extent"]), np.array(e["color"])))
        else:
            raise CorruptManifest(f"unknown primitive kind {kind!r}")
    return Scene(tuple(prims))


def _write_header(fh, magic: bytes, height: int, width: int):
    fh.write(magic + struct.pack("<III", height, width, 0))


def _read_header(fh, magic: bytes, path) -> tuple[int, int]:
    head = fh.read(16)
    if len(head) != 16 or head[:4] != magic:
        raise CorruptManifest(f"{path}: bad or missing {magic.decode()} header")
    h, w, _ = struct.unpack("<III", head[4:])
    return h, w


def write_view(dirpath: str, view_idx: int, view: RenderedView):
    """Write rgb_VV.png / depth_VV.f32 / mask_VV.u8 for one view."""
    rgb8 = np.clip(np.round((view.rgb.astype(np.float64) + 1.0) * 0.5 * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(rgb8).save(os.path.join(dirpath, f"rgb_{view_idx:02d}.png"))
    h, w = view.depth.shape
    with open(os.path.join(dirpath, f"depth_{view_idx:02d}.f32"), "wb") as fh:
        _write_header(fh, _DEPTH_MAGIC, h, w)
        fh.write(view.depth.astype("<f4").tobytes())
    with open(os.path.join(dirpath, f"mask_{view_idx:02d}.u8"), "wb") as fh:
        _write_header(fh, _MASK_MAGIC, h, w)
        fh.write(view.mask.astype(np.uint8).tobytes())


def read_view(dirpath: str, view_idx: int, camera: geo.Camera) -> RenderedView:
    path = os.path.join(dirpath, f"rgb_{view_idx:02d}.png")
    rgb8 = np.asarray(Image.open(path).convert("RGB"))
    rgb = (rgb8.astype(np.float32) / 255.0) * 2.0 - 1.0
    dpath = os.path.join(dirpath, f"depth_{view_idx:02d}.f32")
    with open(dpath, "rb") as fh:
        h, w = _read_header(fh, _DEPTH_MAGIC, dpath)
        depth = np.frombuffer(fh.read(h * w * 4), dtype="<f4").reshape(h, w)
    mpath = os.path.join(dirpath, f"mask_{view_idx:02d}.u8")
    with open(mpath, "rb") as fh:
        h2, w2 = _read_header(fh, _MASK_MAGIC, mpath)
        mask = np.frombuffer(fh.read(h2 * w2), dtype=np.uint8).reshape(h2, w2) != 0
    if rgb.shape[:2] != (h, w) or (h2, w2) != (h, w):
        raise CorruptManifest(f"{dirpath} view {view_idx}: rgb/depth/mask shapes disagree")
    return RenderedView(rgb=rgb, depth=depth.copy(), mask=mask, camera=camera)


@dataclass
class Dataset:
    """Handle over a dataset directory; views load lazily from disk."""

    path: str
    near: float
    far: float
    cameras: list
    scenes: list = field(repr=False)

    @property
    def num_scenes(self) -> int:
        return len(self.scenes)

    @property
    def num_views(self) -> int:
        return len(self.cameras)

    def scene_dir(self, scene_idx: int) -> str:
        return os.path.join(self.path, f"scene_{scene_idx:04d}")

    def load_view(self, scene_idx: int, view_idx: int) -> RenderedView:
        return read_view(self.scene_dir(scene_idx), view_idx, self.cameras[view_idx])

    def load_scene_views(self, scene_idx: int) -> list[RenderedView]:
        return [self.load_view(scene_idx, v) for v in range(self.num_views)]


def write_dataset(path: str, scenes: list[Scene], rig: list[geo.Camera],
                  near: float = 1.0, far: float = 3.0) -> Dataset:
    """Render every scene under every rig camera and persist to ``path``."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "version": 1,
        "near": near,
        "far": far,
        "cameras": [geo.camera_to_manifest(c) for c in rig],
        "scenes": [],
    }
    for si, scene in enumerate(scenes):
        sdir = os.path.join(path, f"scene_{si:04d}")
        os.makedirs(sdir, exist_ok=True)
        for vi, cam in enumerate(rig):
            write_view(sdir, vi, render(scene, cam, near, far))
        manifest["scenes"].append({"name": f"scene_{si:04d}",
                                   "primitives": _scene_to_manifest(scene)})
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return read_dataset(path)


def read_dataset(path: str) -> Dataset:
    """Open a dataset directory, validating the manifest against the files.

    Raises
    ------
    CorruptManifest
        On missing fields or when per-scene file counts disagree with the
        manifest camera count.
    """
    mpath = os.path.join(path, "manifest.json")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise CorruptManifest(f"{mpath}: manifest not found") from None
    except json.JSONDecodeError as e:
        raise CorruptManifest(f"{mpath}: invalid JSON ({e})") from None
    for key in ("near", "far", "cameras", "scenes"):
        if key not in manifest:
            raise CorruptManifest(f"{mpath}: missing field '{key}'")
    cameras = [geo.camera_from_manifest(e) for e in manifest["cameras"]]
    scenes = [_scene_from_manifest(s["primitives"]) for s in manifest["scenes"]]
    n_views = len(cameras)
    for si in range(len(scenes)):
        sdir = os.path.join(path, f"scene_{si:04d}")
        for pattern in ("rgb_{:02d}.png", "depth_{:02d}.f32", "mask_{:02d}.u8"):
            count = sum(os.path.exists(os.path.join(sdir, pattern.format(v)))
                        for v in range(n_views))
            if count != n_views:
                raise CorruptManifest(
                    f"{sdir}: found {count} files matching {pattern!r}, manifest promises {n_views}")
    return Dataset(path=path, near=float(manifest["near"]), far=float(manifest["far"]),
                   cameras=cameras, scenes=scenes)

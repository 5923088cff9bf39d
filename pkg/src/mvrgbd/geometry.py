"""Full perspective camera model: projection, unprojection, ray generation,
plucker line embeddings, and relative poses.

Conventions
-----------
* Pixel (0, 0) is the *center* of the top-left pixel; continuous coordinates
  are allowed, so the image spans ``[-0.5, W - 0.5] x [-0.5, H - 0.5]``.
* Poses are stored world-to-camera; +z is the viewing direction, so visible
  points have positive camera-frame depth.
* All math runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, DegenerateRay, NonPositiveDepth, OutOfBounds

_EPS_DEPTH = 1e-9
_EPS_ORTHO = 1e-9


@dataclass(frozen=True)
class Camera:
    """Calibrated pinhole camera.

    Parameters
    ----------
    intrinsics : (3, 3) array
        ``[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`` in pixels.
    world_to_cam : (4, 4) array
        Rigid transform taking world points into the camera frame.
    width, height : int
        Image size in pixels.
    """

    intrinsics: np.ndarray
    world_to_cam: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        T = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "world_to_cam", T)
        R = T[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) >= _EPS_ORTHO:
            raise ValueError("world_to_cam rotation block is not orthonormal")
        if np.linalg.det(R) <= 0:
            raise ValueError("world_to_cam rotation block has negative determinant")
        if not (np.allclose(T[3], [0, 0, 0, 1])):
            raise ValueError("world_to_cam last row must be [0, 0, 0, 1]")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        """(3, 3) world-to-camera rotation."""
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        """(3,) world-to-camera translation."""
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """(3,) camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def cam_to_world(self) -> np.ndarray:
        """(4, 4) inverse pose."""
        T = np.eye(4)
        T[:3, :3] = self.rotation.T
        T[:3, 3] = self.center
        return T

    def compose(self, rigid: np.ndarray) -> "Camera":
        """Camera viewing the world pre-transformed by ``rigid`` (4x4)."""
        return Camera(self.intrinsics, self.world_to_cam @ np.asarray(rigid, dtype=np.float64),
                      self.width, self.height)


@dataclass(frozen=True)
class Ray:
    """Oriented ray with a unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64).reshape(3)
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class PluckerEmbedding:
    """6-dof line representation: (unit direction, origin x direction).

    Invariant under sliding the origin along the line.
    """

    direction: np.ndarray
    moment: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "direction", np.asarray(self.direction, dtype=np.float64).reshape(3))
        object.__setattr__(self, "moment", np.asarray(self.moment, dtype=np.float64).reshape(3))

    def as_array(self) -> np.ndarray:
        """Flat (6,) layout ``[direction, moment]``."""
        return np.concatenate([self.direction, self.moment])


def project(camera: Camera, point_world) -> tuple[np.ndarray, float]:
    """Project a world point; returns ``(pixel (2,), camera-frame depth)``.

    Raises
    ------
    BehindCamera
        If the camera-frame z is <= 1e-9.
    """
    p = np.asarray(point_world, dtype=np.float64).reshape(3)
    pc = camera.rotation @ p + camera.translation
    z = pc[2]
    if z <= _EPS_DEPTH:
        raise BehindCamera(f"camera-frame depth {z:.3g} <= {_EPS_DEPTH}")
    u = camera.fx * pc[0] / z + camera.cx
    v = camera.fy * pc[1] / z + camera.cy
    return np.array([u, v]), float(z)


def project_points(camera: Camera, points_world: np.ndarray):
    """Vectorized projection with a validity mask instead of raising.

    Parameters
    ----------
    points_world : (..., 3) array

    Returns
    -------
    pixels : (..., 2) array
        Valid only where ``valid``; elsewhere filled with 0.
    depths : (...) array
        Camera-frame z (may be <= 0 where invalid).
    valid : (...) bool array
        True where depth > 1e-9.
    """
    p = np.asarray(points_world, dtype=np.float64)
    pc = p @ camera.rotation.T + camera.translation
    z = pc[..., 2]
    valid = z > _EPS_DEPTH
    safe_z = np.where(valid, z, 1.0)
    u = camera.fx * pc[..., 0] / safe_z + camera.cx
    v = camera.fy * pc[..., 1] / safe_z + camera.cy
    pixels = np.stack([np.where(valid, u, 0.0), np.where(valid, v, 0.0)], axis=-1)
    return pixels, z, valid


def unproject(camera: Camera, pixel, depth: float) -> np.ndarray:
    """World point whose projection reproduces ``(pixel, depth)``.

    Raises
    ------
    NonPositiveDepth
        If ``depth <= 0``.
    """
    if depth <= 0:
        raise NonPositiveDepth(f"depth {depth} <= 0")
    px = np.asarray(pixel, dtype=np.float64).reshape(2)
    x = (px[0] - camera.cx) / camera.fx * depth
    y = (px[1] - camera.cy) / camera.fy * depth
    pc = np.array([x, y, depth])
    return camera.rotation.T @ (pc - camera.translation)


def unproject_points(camera: Camera, pixels: np.ndarray, depths: np.ndarray) -> np.ndarray:
    """Vectorized :func:`unproject` for (..., 2) pixels and (...) depths."""
    px = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    x = (px[..., 0] - camera.cx) / camera.fx * d
    y = (px[..., 1] - camera.cy) / camera.fy * d
    pc = np.stack([x, y, d], axis=-1)
    return (pc - camera.translation) @ camera.rotation


def in_image_bounds(camera: Camera, pixels: np.ndarray) -> np.ndarray:
    """True where continuous pixel coordinates fall inside the image."""
    px = np.asarray(pixels, dtype=np.float64)
    return (
        (px[..., 0] >= -0.5)
        & (px[..., 0] <= camera.width - 0.5)
        & (px[..., 1] >= -0.5)
        & (px[..., 1] <= camera.height - 0.5)
    )


def ray_for_pixel(camera: Camera, pixel) -> Ray:
    """Viewing ray through a (possibly fractional) pixel.

    Origin is the camera center; direction is unit length in world frame.

    Raises
    ------
    OutOfBounds
        If the pixel lies outside ``[-0.5, W-0.5] x [-0.5, H-0.5]``.
    """
    px = np.asarray(pixel, dtype=np.float64).reshape(2)
    if not in_image_bounds(camera, px):
        raise OutOfBounds(f"pixel {px.tolist()} outside {camera.width}x{camera.height} image")
    d_cam = np.array([(px[0] - camera.cx) / camera.fx, (px[1] - camera.cy) / camera.fy, 1.0])
    d_world = camera.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(camera.center, d_world)


def rays_for_pixels(camera: Camera, pixels: np.ndarray):
    """Vectorized ray generation; no bounds check.

    Returns ``(origins (..., 3), directions (..., 3))`` with unit directions.
    The origin is the camera center broadcast to the pixel shape.
    """
    px = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack(
        [(px[..., 0] - camera.cx) / camera.fx, (px[..., 1] - camera.cy) / camera.fy,
         np.ones(px.shape[:-1])],
        axis=-1,
    )
    d_world = d_cam @ camera.rotation
    d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape)
    return origins, d_world


def plucker(ray: Ray) -> PluckerEmbedding:
    """Plucker embedding ``(direction, origin x direction)`` of a ray."""
    return PluckerEmbedding(ray.direction, np.cross(ray.origin, ray.direction))


def plucker_arrays(origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Vectorized plucker embedding for already-unit directions.

    Returns (..., 6) arrays laid out ``[direction, moment]``.
    """
    return np.concatenate([directions, np.cross(origins, directions)], axis=-1)


def ray_to_camera_center(point_world, camera: Camera) -> Ray:
    """Ray from a world point toward the camera center.

    Raises
    ------
    DegenerateRay
        If the point coincides with the camera center (< 1e-12 apart).
    """
    p = np.asarray(point_world, dtype=np.float64).reshape(3)
    delta = camera.center - p
    norm = np.linalg.norm(delta)
    if norm < 1e-12:
        raise DegenerateRay("point coincides with the camera center")
    return Ray(p, delta / norm)


def rays_to_camera_center(points_world: np.ndarray, camera: Camera):
    """Vectorized :func:`ray_to_camera_center` with a validity mask.

    Returns ``(directions (..., 3), valid (...))``; degenerate points get a
    zero direction and ``valid = False``.
    """
    p = np.asarray(points_world, dtype=np.float64)
    delta = camera.center - p
    norm = np.linalg.norm(delta, axis=-1)
    valid = norm >= 1e-12
    safe = np.where(valid, norm, 1.0)
    return delta / safe[..., None], valid


def relative_transform(target: Camera, reference: Camera) -> np.ndarray:
    """4x4 transform mapping reference-camera coordinates into target-camera
    coordinates (``target.world_to_cam @ inv(reference.world_to_cam)``)."""
    return target.world_to_cam @ reference.cam_to_world


def look_at_camera(position, target, intrinsics, width: int, height: int,
                   world_up=(0.0, 0.0, 1.0)) -> Camera:
    """Camera at ``position`` looking at ``target``.

    Camera frame: +x right, +y down, +z forward (toward the target).

    Raises
    ------
    ValueError
        If the viewing direction is parallel to ``world_up``.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("camera position coincides with the look-at target")
    forward = forward / norm
    up = np.asarray(world_up, dtype=np.float64)
    right = np.cross(forward, up)
    rnorm = np.linalg.norm(right)
    if rnorm < 1e-9:
        raise ValueError("viewing direction is parallel to world_up")
    right = right / rnorm
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    t = -R @ position
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return Camera(np.asarray(intrinsics, dtype=np.float64), T, width, height)


def camera_to_manifest(camera: Camera) -> dict:
    """Serialize for the dataset manifest: row-major 9 + 16 numbers."""
    return {
        "intrinsics": [float(x) for x in camera.intrinsics.reshape(-1)],
        "world_to_cam": [float(x) for x in camera.world_to_cam.reshape(-1)],
        "width": camera.width,
        "height": camera.height,
    }


def camera_from_manifest(entry: dict) -> Camera:
    """Inverse of :func:`camera_to_manifest`."""
    from .errors import CorruptManifest

    for key, n in (("intrinsics", 9), ("world_to_cam", 16)):
        if key not in entry:
            raise CorruptManifest(f"camera entry missing field '{key}'")
        if len(entry[key]) != n:
            raise CorruptManifest(f"camera field '{key}' must have {n} numbers, got {len(entry[key])}")
    for key in ("width", "height"):
        if key not in entry:
            raise CorruptManifest(f"camera entry missing field '{key}'")
    return Camera(
        np.array(entry["intrinsics"], dtype=np.float64).reshape(3, 3),
        np.array(entry["world_to_cam"], dtype=np.float64).reshape(4, 4),
        int(entry["width"]),
        int(entry["height"]),
    )

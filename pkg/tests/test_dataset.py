"""Scene generation, rig construction, renderer oracles, and disk round trips."""

from __future__ import annotations

import math
import os

import numpy as np
import pytest

from mvrgbd import dataset as ds
from mvrgbd import geometry as geo
from mvrgbd.errors import CorruptManifest, InvalidBounds, InvalidRadius
from reference import box_sdf, sphere_sdf


def axis_camera(distance: float = 2.0, image_size: int = 33) -> geo.Camera:
    """Camera on the +z axis looking at the origin (odd size -> integer center pixel)."""
    K = ds.default_intrinsics(image_size, image_size)
    return geo.look_at_camera([0.0, 0.0, distance], [0.0, 0.0, 0.0], K,
                              image_size, image_size, world_up=(0.0, 1.0, 0.0))


def test_make_rig_defaults():
    rig = ds.make_rig()
    assert len(rig) == 16
    for i, cam in enumerate(rig):
        c = cam.center
        assert abs(np.linalg.norm(c) - 2.0) < 1e-9
        # 30 degree elevation: z = r * sin(30) = 1
        assert abs(c[2] - 1.0) < 1e-9
        az = math.atan2(c[1], c[0]) % (2 * math.pi)
        assert abs(az - 2 * math.pi * i / 16) % (2 * math.pi) < 1e-9
        # central ray passes through the origin
        ray = geo.ray_for_pixel(cam, [cam.cx, cam.cy])
        residual = np.linalg.norm(np.cross(ray.direction, -ray.origin))
        assert residual < 1e-9
    with pytest.raises(InvalidRadius):
        ds.make_rig(radius=1.0)
    with pytest.raises(ValueError):
        ds.make_rig(num_views=0)


def test_rig_unit_sphere_fill_fraction():
    cam = ds.make_rig(image_size=32)[0]
    # unit sphere silhouette radius in pixels vs 80% of half-width
    half_angle = math.asin(0.5)
    assert abs(cam.fx * math.tan(half_angle) - 0.8 * 16) < 1e-9


def test_render_unit_sphere_center_depth():
    scene = ds.Scene((ds.Sphere(np.zeros(3), 1.0, np.array([0.8, 0.2, 0.2])),))
    cam = axis_camera()
    view = ds.render(scene, cam)
    # center pixel hits the sphere apex: metric depth 2 - 1 = 1 -> normalized -1
    cu, cv = int(cam.cx), int(cam.cy)
    assert view.mask[cv, cu]
    assert view.depth[cv, cu] == pytest.approx(-1.0, abs=1e-6)
    metric = ds.denormalize_depth(view.depth[cv, cu], 1.0, 3.0)
    assert metric == pytest.approx(1.0, abs=1e-6)


def test_render_box_face_shading_by_hand():
    color = np.array([0.5, 0.9, 0.3])
    scene = ds.Scene((ds.Box(np.zeros(3), np.array([0.3, 0.3, 0.3]), color),))
    K = ds.default_intrinsics(33, 33)
    cam = geo.look_at_camera([2.0, 0.0, 0.0], [0.0, 0.0, 0.0], K, 33, 33)
    view = ds.render(scene, cam)
    cu, cv = int(cam.cx), int(cam.cy)
    assert view.mask[cv, cu]
    # front face x = +0.3: depth 1.7, normal +x, light normalize([.3,-.5,.8])
    assert ds.denormalize_depth(view.depth[cv, cu], 1.0, 3.0) == pytest.approx(1.7, abs=1e-5)
    lam = 0.25 + 0.75 * (0.3 / math.sqrt(0.98))
    np.testing.assert_allclose(view.rgb[cv, cu], color * lam * 2.0 - 1.0, atol=1e-5)


def test_render_background_sentinel():
    scene = ds.Scene((ds.Sphere(np.zeros(3), 0.3, np.array([1.0, 1.0, 1.0])),))
    view = ds.render(scene, axis_camera())
    bg = ~view.mask
    assert bg.any() and view.mask.any()
    assert np.all(view.depth[bg] == 1.0)
    assert np.all(view.depth[view.mask] < 1.0)
    np.testing.assert_array_equal(view.rgb[bg], -1.0)


def _union_sdf(points: np.ndarray, scene: ds.Scene) -> np.ndarray:
    vals = []
    for p in scene.primitives:
        if isinstance(p, ds.Sphere):
            vals.append(sphere_sdf(points, p.center, p.radius))
        else:
            vals.append(box_sdf(points, p.center, p.half_extent))
    return np.min(vals, axis=0)


def test_unprojected_depth_lies_on_surfaces():
    rng = np.random.default_rng(300)
    rig = ds.make_rig()
    for _ in range(3):
        scene = ds.random_scene(rng)
        for cam in (rig[0], rig[7]):
            view = ds.render(scene, cam)
            vs, us = np.nonzero(view.mask)
            pixels = np.stack([us, vs], axis=-1).astype(np.float64)
            z = ds.denormalize_depth(view.depth[vs, us].astype(np.float64), 1.0, 3.0)
            points = geo.unproject_points(cam, pixels, z)
            residual = np.abs(_union_sdf(points, scene))
            assert residual.max() < 1e-5


def _photometric_warp_error(scene: ds.Scene, cam_a: geo.Camera, cam_b: geo.Camera):
    """(co-visible count, mean |rgb_b - rgb_a|) for view a warped into view b."""
    near, far = 1.0, 3.0
    a, b = ds.render(scene, cam_a), ds.render(scene, cam_b)
    vs, us = np.nonzero(a.mask)
    pixels = np.stack([us, vs], axis=-1).astype(np.float64)
    z = ds.denormalize_depth(a.depth[vs, us].astype(np.float64), near, far)
    points = geo.unproject_points(cam_a, pixels, z)
    pix_b, z_b, valid = geo.project_points(cam_b, points)
    inb = valid & geo.in_image_bounds(cam_b, pix_b)
    pb = np.round(pix_b[inb]).astype(int)
    pb[:, 0] = np.clip(pb[:, 0], 0, cam_b.width - 1)
    pb[:, 1] = np.clip(pb[:, 1], 0, cam_b.height - 1)
    sampled_depth = ds.denormalize_depth(b.depth[pb[:, 1], pb[:, 0]].astype(np.float64), near, far)
    covis = b.mask[pb[:, 1], pb[:, 0]] & (np.abs(sampled_depth - z_b[inb]) < 0.02 * (far - near))
    diff = np.abs(b.rgb[pb[covis, 1], pb[covis, 0]] - a.rgb[vs, us][inb][covis])
    return int(covis.sum()), float(diff.mean())


def test_ground_truth_photo_consistency():
    """Warping one view into another via exact depth reproduces RGB closely.

    Shading is view-independent, so on co-visible pixels the only error
    sources are quantization and nearest-pixel resampling.
    """
    sphere = ds.Scene((ds.Sphere(np.array([0.05, -0.05, 0.0]), 0.8, np.array([0.9, 0.4, 0.3])),))
    box = ds.Scene((ds.Box(np.zeros(3), np.array([0.4, 0.35, 0.3]), np.array([0.3, 0.7, 0.9])),))
    rig = ds.make_rig()
    for scene in (sphere, box):
        for i, j in ((2, 3), (5, 6), (0, 15)):
            covis, err = _photometric_warp_error(scene, rig[i], rig[j])
            assert covis > 50  # the views genuinely overlap
            assert err < 0.05


def test_random_scene_seeded_and_bounded():
    a = ds.random_scene(np.random.default_rng(42))
    b = ds.random_scene(np.random.default_rng(42))
    assert len(a.primitives) == len(b.primitives)
    for pa, pb in zip(a.primitives, b.primitives):
        assert type(pa) is type(pb)
        np.testing.assert_array_equal(pa.center, pb.center)
    for _ in range(20):
        scene = ds.random_scene(np.random.default_rng(None))
        assert 2 <= len(scene.primitives) <= 5
        for p in scene.primitives:
            assert p.bounding_radius() <= 1.0


def test_scene_validation():
    with pytest.raises(ValueError):
        ds.Scene(())
    with pytest.raises(ValueError):
        ds.Scene((ds.Sphere(np.array([0.8, 0.0, 0.0]), 0.5, np.ones(3)),))


def test_depth_normalization_roundtrip():
    d = np.linspace(1.0, 3.0, 101)
    back = ds.denormalize_depth(ds.normalize_depth(d, 1.0, 3.0), 1.0, 3.0)
    assert np.max(np.abs(back - d)) < 1e-6
    assert ds.normalize_depth(1.0, 1.0, 3.0) == -1.0
    assert ds.normalize_depth(3.0, 1.0, 3.0) == 1.0
    with pytest.raises(InvalidBounds):
        ds.normalize_depth(d, 3.0, 1.0)


def test_dataset_roundtrip(tmp_path):
    rng = np.random.default_rng(302)
    scenes = [ds.random_scene(rng) for _ in range(2)]
    rig = ds.make_rig(num_views=4)
    out = str(tmp_path / "data")
    ds.write_dataset(out, scenes, rig)
    data = ds.read_dataset(out)
    assert data.num_scenes == 2 and data.num_views == 4
    assert data.near == 1.0 and data.far == 3.0
    for si in range(2):
        for vi in range(4):
            orig = ds.render(scenes[si], rig[vi])
            back = data.load_view(si, vi)
            np.testing.assert_array_equal(back.depth, orig.depth)  # bit-exact
            np.testing.assert_array_equal(back.mask, orig.mask)
            assert np.max(np.abs(back.rgb - orig.rgb)) <= 1.0 / 255.0 + 1e-9
            assert np.array_equal(back.camera.world_to_cam, rig[vi].world_to_cam)
    # scene parameters survive the manifest
    for orig_scene, back_scene in zip(scenes, data.scenes):
        for pa, pb in zip(orig_scene.primitives, back_scene.primitives):
            assert type(pa) is type(pb)
            np.testing.assert_allclose(pb.center, pa.center, atol=1e-15)


def test_read_dataset_detects_missing_files(tmp_path):
    scenes = [ds.random_scene(np.random.default_rng(303))]
    out = str(tmp_path / "data")
    ds.write_dataset(out, scenes, ds.make_rig(num_views=3))
    os.remove(os.path.join(out, "scene_0000", "depth_01.f32"))
    with pytest.raises(CorruptManifest):
        ds.read_dataset(out)


def test_read_dataset_missing_manifest(tmp_path):
    with pytest.raises(CorruptManifest):
        ds.read_dataset(str(tmp_path))

"""Evaluation metrics: PSNR, SSIM, symmetric Chamfer, photo-consistency.

All image metrics operate on [0, 1] arrays; :func:`composite_white` maps a
generated or rendered RGB-D view there, painting background pixels white.
Chamfer uses exact nearest neighbors (a k-d tree picks the neighbor, the
distance itself is recomputed with plain array arithmetic so the result is
bit-identical to a brute-force scan).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d
from scipy.spatial import cKDTree

from . import dataset as ds
from . import geometry as geo
from .engine import PointCloud
from .errors import EmptyCloud, NoOverlap, ShapeMismatch, TooSmall
from .frustum import ViewSet


def composite_white(rgb: np.ndarray, depth: np.ndarray | None = None,
                    near: float = 1.0, far: float = 3.0,
                    threshold: float = 0.98) -> np.ndarray:
    """[-1, 1] RGB to a [0, 1] image, background composited to white.

    Background is decided by the same rule the cloud extraction uses:
    denormalized depth at or beyond ``threshold * far``. With no depth the
    image is only remapped.
    """
    out = np.clip((np.asarray(rgb, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    if depth is not None:
        metric = ds.denormalize_depth(np.asarray(depth, dtype=np.float64), near, far)
        out[metric >= threshold * far] = 1.0
    return out


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10*log10(1/MSE) for [0, 1] images, capped at 100 dB near-zero MSE."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr over {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_window() -> np.ndarray:
    half = (_SSIM_WINDOW - 1) / 2.0
    x = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(x ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_single(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> float:
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    mu_a = convolve2d(a, window, mode="valid")
    mu_b = convolve2d(b, window, mode="valid")
    var_a = convolve2d(a * a, window, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, window, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, window, mode="valid") - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5) on [0, 1] images.

    Multi-channel inputs are scored per channel and averaged.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim over {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ShapeMismatch(f"ssim expects (H, W) or (H, W, C), got {a.shape}")
    if a.shape[0] < _SSIM_WINDOW or a.shape[1] < _SSIM_WINDOW:
        raise TooSmall(f"image {a.shape[:2]} smaller than the "
                       f"{_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    window = _gaussian_window()
    return float(np.mean([_ssim_single(a[..., c], b[..., c], window)
                          for c in range(a.shape[2])]))


def chamfer(a: PointCloud, b: PointCloud) -> float:
    """Symmetric Chamfer: half the sum of both mean nearest-neighbor L2s.

    The k-d tree only chooses neighbor indices; distances are recomputed
    from the coordinates so the value matches a brute-force double loop bit
    for bit.
    """
    if a.empty or b.empty:
        raise EmptyCloud("chamfer needs two non-empty clouds")
    pa = a.points
    pb = b.points
    idx_ab = cKDTree(pb).query(pa, k=1)[1]
    idx_ba = cKDTree(pa).query(pb, k=1)[1]
    d_ab = np.sqrt(((pa - pb[idx_ab]) ** 2).sum(axis=1))
    d_ba = np.sqrt(((pb - pa[idx_ba]) ** 2).sum(axis=1))
    return 0.5 * float(d_ab.mean() + d_ba.mean())


def reprojection_consistency(viewset: ViewSet, near: float = 1.0, far: float = 3.0,
                             threshold: float = 0.98) -> float:
    """Mean absolute RGB error over depth-verified cross-view correspondences.

    For every ordered view pair, foreground pixels of the first view are
    unprojected with their depth and projected into the second; where the
    second view's nearest-pixel depth agrees within 2% of the depth range
    (the occlusion test), the [0, 1] RGB values are compared. Lower is more
    consistent; 0 means every surviving correspondence matches exactly.

    Raises
    ------
    NoOverlap
        When no correspondence passes the occlusion test in any pair.
    """
    cameras = viewset.target_cameras
    images = viewset.target_images
    n = len(cameras)
    if n < 2:
        raise ShapeMismatch("consistency needs at least two views")
    tolerance = 0.02 * (far - near)

    metric = [ds.denormalize_depth(images[v][:, :, 3].astype(np.float64), near, far)
              for v in range(n)]
    rgb01 = [np.clip((images[v][:, :, :3].astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)
             for v in range(n)]

    total_error = 0.0
    total_count = 0
    for i in range(n):
        keep = metric[i] < threshold * far
        if not keep.any():
            continue
        rows, cols = np.nonzero(keep)
        pixels = np.stack([cols, rows], axis=-1).astype(np.float64)
        world = geo.unproject_points(cameras[i], pixels, metric[i][keep])
        for j in range(n):
            if j == i:
                continue
            proj, z, ok = geo.project_points(cameras[j], world)
            ok = ok & geo.in_image_bounds(cameras[j], proj)
            if not ok.any():
                continue
            u = np.clip(np.round(proj[ok, 0]).astype(int), 0, cameras[j].width - 1)
            v = np.clip(np.round(proj[ok, 1]).astype(int), 0, cameras[j].height - 1)
            agrees = np.abs(z[ok] - metric[j][v, u]) <= tolerance
            if not agrees.any():
                continue
            src = rgb01[i][rows[ok], cols[ok]][agrees]
            dst = rgb01[j][v, u][agrees]
            total_error += float(np.abs(src - dst).sum())
            total_count += int(agrees.sum()) * 3
    if total_count == 0:
        raise NoOverlap("no correspondence passed the occlusion test")
    return total_error / total_count


@dataclass
class MetricReport:
    """Per-view and summary scores, serializable to CSV and JSON."""

    per_view_psnr: list
    per_view_ssim: list
    chamfer: float | None = None
    reprojection: float | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_view_psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.per_view_ssim))

    def to_dict(self) -> dict:
        return {
            "per_view": [{"view": i, "psnr": p, "ssim": s}
                         for i, (p, s) in enumerate(zip(self.per_view_psnr,
                                                        self.per_view_ssim))],
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "chamfer": self.chamfer,
            "reprojection": self.reprojection,
        }

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["row", "psnr", "ssim"])
            for i, (p, s) in enumerate(zip(self.per_view_psnr, self.per_view_ssim)):
                writer.writerow([f"view_{i}", f"{p:.6f}", f"{s:.6f}"])
            writer.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}"])
            if self.chamfer is not None:
                writer.writerow(["chamfer", f"{self.chamfer:.6f}", ""])
            if self.reprojection is not None:
                writer.writerow(["reprojection", f"{self.reprojection:.6f}", ""])


def compare_viewsets(generated: ViewSet, reference: ViewSet,
                     near: float = 1.0, far: float = 3.0) -> MetricReport:
    """Score generated views against ground truth views of the same cameras.

    PSNR/SSIM per view on white-composited images, Chamfer between the two
    extracted clouds, and the reprojection consistency of the generated set.
    """
    from .engine import extract_pointcloud

    gen = generated.target_images
    ref = reference.target_images
    if gen.shape != ref.shape:
        raise ShapeMismatch(f"generated {gen.shape} vs reference {ref.shape}")
    ps, ss = [], []
    for v in range(gen.shape[0]):
        a = composite_white(gen[v][:, :, :3], gen[v][:, :, 3], near, far)
        b = composite_white(ref[v][:, :, :3], ref[v][:, :, 3], near, far)
        ps.append(psnr(a, b))
        ss.append(ssim(a, b))
    report = MetricReport(per_view_psnr=ps, per_view_ssim=ss)
    cloud_gen = extract_pointcloud(generated, near=near, far=far)
    cloud_ref = extract_pointcloud(reference, near=near, far=far)
    if not cloud_gen.empty and not cloud_ref.empty:
        report.chamfer = chamfer(cloud_gen, cloud_ref)
    try:
        report.reprojection = reprojection_consistency(generated, near, far)
    except NoOverlap:
        report.reprojection = None
    return report

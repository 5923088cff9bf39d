"""Depth-guided cross-view feature aggregation.

For each ray of a target view and each sampled depth, the 3D point is
projected into every view (the conditioning input plus all noisy targets),
features are gathered bilinearly, and a small transformer turns the per-view
tokens ``{feature, point-to-camera plucker, query-ray plucker}`` into one
aggregated feature and a weight per view. The weighted sum over views fills
one cell of the target's feature frustum.

Tokens are processed in a canonical order (sorted by their raw byte
patterns) so the result is reproducible bit for bit no matter how the
caller orders the views; the weighted sum and attention are
order-invariant mathematically, and the canonical order makes them
order-invariant in floating point too.
"""

from __future__ import annotations

import time
import tracemalloc
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import nn
from .autodiff import Tensor
from .errors import ShapeMismatch


@dataclass
class ViewSet:
    """One conditioning view plus N posed target images.

    ``input_rgb`` is (H, W, 3) in [-1, 1]; ``target_images`` is (N, H, W, 4)
    RGB-D where the depth channel is normalized for clean data and unbounded
    while noisy. Optional feature planes (e.g. a denoiser's first-conv
    activations) ride along and are gathered together with the raw channels;
    they may be autodiff tensors, in which case gradients flow through the
    gather.
    """

    input_rgb: np.ndarray
    input_camera: geo.Camera
    target_images: np.ndarray
    target_cameras: tuple
    masks: np.ndarray | None = None
    input_features: Tensor | None = None
    target_features: Tensor | None = None

    def __post_init__(self):
        self.target_cameras = tuple(self.target_cameras)
        n, h, w, c = self.target_images.shape
        if c != 4:
            raise ShapeMismatch(f"target images must be RGB-D, got {c} channels")
        if n < 1:
            raise ShapeMismatch("need at least one target view")
        if n != len(self.target_cameras):
            raise ShapeMismatch(f"{n} target images vs {len(self.target_cameras)} cameras")
        if self.input_rgb.shape != (h, w, 3):
            raise ShapeMismatch(f"input {self.input_rgb.shape} vs targets {(h, w)}")
        if self.target_features is not None:
            if self.input_features is None:
                raise ShapeMismatch("input_features required when target_features given")
            if self.target_features.shape[0] != n:
                raise ShapeMismatch("feature planes must cover every target view")
        self._stack = None

    @property
    def num_targets(self) -> int:
        return self.target_images.shape[0]

    @property
    def image_hw(self) -> tuple[int, int]:
        return self.target_images.shape[1], self.target_images.shape[2]

    @property
    def cameras(self) -> list:
        return [self.input_camera, *self.target_cameras]

    @property
    def feature_channels(self) -> int:
        base = 4
        if self.input_features is not None:
            base += self.input_features.shape[0]
        return base

    def feature_stack(self) -> Tensor:
        """(N+1, C, H, W) gatherable planes: raw channels (input first, with a
        zero depth slot) plus any attached feature maps."""
        if self._stack is not None:
            return self._stack
        h, w = self.image_hw
        dtype = self.target_images.dtype
        inp = np.concatenate([self.input_rgb.transpose(2, 0, 1),
                              np.zeros((1, h, w), dtype=dtype)], axis=0)
        raw = np.concatenate([inp[None], self.target_images.transpose(0, 3, 1, 2)], axis=0)
        stack = Tensor(np.ascontiguousarray(raw))
        if self.input_features is not None:
            feats = ad.concat([ad.reshape(self.input_features,
                                          (1,) + tuple(self.input_features.shape)),
                               self.target_features], axis=0)
            stack = ad.concat([stack, feats], axis=1)
        self._stack = stack
        return stack


@dataclass
class SampleBundle:
    """Per-view gathered evidence for one (ray, depth) location."""

    features: np.ndarray          # (N+1, C) — zeros where invalid
    reference_plucker: np.ndarray  # (N+1, 6) rays from the point to each camera
    query_plucker: np.ndarray      # (6,) the target ray
    validity: np.ndarray           # (N+1,) bool


@dataclass
class AggregateResult:
    value: np.ndarray    # (C_out,)
    weights: np.ndarray  # (N+1,) — zeros when all_invalid
    all_invalid: bool


@dataclass
class FeatureFrustum:
    """Aggregated features for one target view: values (D, H', W', C)."""

    values: Tensor
    valid: np.ndarray              # (D, H', W') — any source view contributed
    weights: np.ndarray | None = None  # (D, H', W', N+1) view weights


@dataclass(frozen=True)
class AggregatorConfig:
    in_channels: int
    hidden: int = 64
    out_channels: int = 64
    heads: int = 4
    layers: int = 3
    time_dim: int = 32

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def token_dim(self) -> int:
        # validity flag + gathered feature + reference and query pluckers
        return 1 + self.in_channels + 12


class _TransformerBlock(nn.Module):
    def __init__(self, hidden: int, heads: int, rng: np.random.Generator, dtype):
        self.ln1 = nn.LayerNorm(hidden, dtype=dtype)
        self.qkv = nn.Linear(hidden, 3 * hidden, rng, dtype=dtype)
        self.proj = nn.Linear(hidden, hidden, rng, dtype=dtype)
        self.ln2 = nn.LayerNorm(hidden, dtype=dtype)
        self.fc1 = nn.Linear(hidden, 2 * hidden, rng, dtype=dtype)
        self.fc2 = nn.Linear(2 * hidden, hidden, rng, dtype=dtype)
        self.heads = heads

    def __call__(self, x: Tensor) -> Tensor:
        g, t, h = x.shape
        hd = h // self.heads
        qkv = self.qkv(self.ln1(x))
        q = ad.transpose(ad.reshape(qkv[:, :, 0:h], (g, t, self.heads, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(qkv[:, :, h:2 * h], (g, t, self.heads, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(qkv[:, :, 2 * h:], (g, t, self.heads, hd)), (0, 2, 1, 3))
        att = nn.scaled_dot_attention(q, k, v)
        merged = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (g, t, h))
        x = ad.add(x, self.proj(merged))
        return ad.add(x, self.fc2(ad.silu(self.fc1(self.ln2(x)))))


class Aggregator(nn.Module):
    """3-layer transformer over the N+1 view tokens (plus one time token),
    emitting a per-view weight and a per-view feature; the output is the
    weight-softmaxed sum of features over valid views."""

    def __init__(self, config: AggregatorConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.embed = nn.Linear(config.token_dim, config.hidden, rng, dtype=dtype)
        self.time_proj = nn.Linear(config.time_dim, config.hidden, rng, dtype=dtype)
        self.blocks = [_TransformerBlock(config.hidden, config.heads, rng, dtype)
                       for _ in range(config.layers)]
        self.w_head = nn.Linear(config.hidden, 1, rng, dtype=dtype)
        self.f_head = nn.Linear(config.hidden, config.out_channels, rng, dtype=dtype)
        self.dtype = dtype

    def forward_groups(self, feats: Tensor, ref_plucker: np.ndarray,
                       query_plucker: np.ndarray, valid: np.ndarray, t: int):
        """Aggregate G independent token groups.

        feats: (V, G, C_in) tensor; ref_plucker: (V, G, 6); query_plucker
        (G, 6); valid: (V, G) bool. Returns (values (G, C_out) tensor,
        weights (G, V) array in the caller's view order, any_valid (G,)).
        """
        cfg = self.config
        v_views, g = valid.shape
        dtype = self.dtype
        vcol = np.ascontiguousarray(valid.T, dtype=dtype)[..., None]
        ref = np.ascontiguousarray(ref_plucker.transpose(1, 0, 2), dtype=dtype)
        qt = np.ascontiguousarray(
            np.broadcast_to(query_plucker[:, None, :], (g, v_views, 6)), dtype=dtype)
        tokens = ad.concat([Tensor(vcol), ad.transpose(feats, (1, 0, 2)),
                            Tensor(ref), Tensor(qt)], axis=-1)

        # canonical token order: sort each group by raw bytes so any caller
        # ordering of the views yields bit-identical arithmetic
        raw = np.ascontiguousarray(tokens.data)
        keys = raw.view(f"V{raw.shape[-1] * raw.dtype.itemsize}")[..., 0]
        order = np.argsort(keys, axis=1, kind="stable")
        flat = (np.arange(g)[:, None] * v_views + order).reshape(-1)
        dim = tokens.shape[-1]
        sorted_tokens = ad.reshape(
            ad.index_select(ad.reshape(tokens, (g * v_views, dim)), flat, 0),
            (g, v_views, dim))
        valid_sorted = np.take_along_axis(valid.T, order, axis=1)

        x = self.embed(sorted_tokens)
        temb = nn.sinusoidal_embedding(np.array([float(t)]), cfg.time_dim, dtype=dtype)
        ttok = ad.reshape(self.time_proj(Tensor(temb)), (1, 1, cfg.hidden))
        x = ad.concat([x, ad.mul(ttok, np.ones((g, 1, 1), dtype=dtype))], axis=1)
        for blk in self.blocks:
            x = blk(x)
        view_tok = x[:, :v_views, :]

        logits = ad.reshape(self.w_head(view_tok), (g, v_views))
        bias = np.where(valid_sorted, 0.0, -1e30).astype(dtype)
        w_sorted = ad.softmax(ad.add(logits, bias), axis=-1)
        f = self.f_head(view_tok)
        any_valid = valid.any(axis=0)
        gate = any_valid.astype(dtype)[:, None]
        values = ad.mul(ad.sum_(ad.mul(f, ad.reshape(w_sorted, (g, v_views, 1))), axis=1), gate)

        weights = np.zeros((g, v_views), dtype=dtype)
        np.put_along_axis(weights, order, w_sorted.data.astype(dtype, copy=False), axis=1)
        weights[~any_valid] = 0.0
        return values, weights, any_valid


def gather(viewset: ViewSet, point_world, query_ray: geo.Ray) -> SampleBundle:
    """Project one world point into every view and sample features there.

    Out-of-image or behind-camera views contribute zero features with
    ``validity`` false; nothing raises.
    """
    point = np.asarray(point_world, dtype=np.float64).reshape(1, 3)
    with ad.no_grad():
        stack = viewset.feature_stack()
    planes = stack.data
    v_views, c = planes.shape[0], planes.shape[1]
    feats = np.zeros((v_views, c), dtype=planes.dtype)
    validity = np.zeros(v_views, dtype=bool)
    ref = np.zeros((v_views, 6))
    for v, cam in enumerate(viewset.cameras):
        pixels, _, ok = geo.project_points(cam, point)
        ok = ok & geo.in_image_bounds(cam, pixels)
        dirs, dvalid = geo.rays_to_camera_center(point, cam)
        ref[v] = np.concatenate([dirs[0], np.cross(point[0], dirs[0])])
        if ok[0] and dvalid[0]:
            validity[v] = True
            with ad.no_grad():
                feats[v] = ad.gather_bilinear(Tensor(planes[v:v + 1]), pixels[None]).data[0, 0]
    return SampleBundle(features=feats, reference_plucker=ref,
                        query_plucker=geo.plucker(query_ray).as_array(), validity=validity)


def aggregate(bundle: SampleBundle, t: int, aggregator: Aggregator) -> AggregateResult:
    """Weighted transformer aggregation of one token group."""
    feats = Tensor(np.ascontiguousarray(bundle.features[:, None, :], dtype=aggregator.dtype))
    with ad.no_grad():
        values, weights, any_valid = aggregator.forward_groups(
            feats, bundle.reference_plucker[:, None, :], bundle.query_plucker[None, :],
            bundle.validity[:, None], t)
    return AggregateResult(value=values.data[0], weights=weights[0],
                           all_invalid=not bool(any_valid[0]))


def _grid_pixels(camera: geo.Camera, grid_hw: tuple[int, int]) -> np.ndarray:
    """Full-resolution pixel coordinates of coarse grid cell centers, (H'*W', 2)."""
    gh, gw = grid_hw
    js = (np.arange(gw) + 0.5) * (camera.width / gw) - 0.5
    is_ = (np.arange(gh) + 0.5) * (camera.height / gh) - 0.5
    uu, vv = np.meshgrid(js, is_)
    return np.stack([uu, vv], axis=-1).reshape(-1, 2)


def _gather_points(viewset: ViewSet, points: np.ndarray):
    """Gather features for (M, 3) world points from every view.

    Returns (features tensor (V, M, C), reference pluckers (V, M, 6),
    valid (V, M)). Gradients flow into the view-set feature planes.
    """
    stack = viewset.feature_stack()
    cams = viewset.cameras
    v_views, m = len(cams), points.shape[0]
    coords = np.zeros((v_views, m, 2))
    valid = np.zeros((v_views, m), dtype=bool)
    ref = np.zeros((v_views, m, 6))
    for v, cam in enumerate(cams):
        pixels, _, ok = geo.project_points(cam, points)
        ok = ok & geo.in_image_bounds(cam, pixels)
        dirs, dvalid = geo.rays_to_camera_center(points, cam)
        coords[v] = pixels
        valid[v] = ok & dvalid
        ref[v] = np.concatenate([dirs, np.cross(points, dirs)], axis=-1)
    feats = ad.gather_bilinear(stack, coords)
    feats = ad.mul(feats, valid[..., None].astype(stack.dtype))
    return feats, ref, valid


def build_frusta(viewset: ViewSet, target_indices, depths: np.ndarray, t: int,
                 aggregator: Aggregator, keep_weights: bool = False) -> list[FeatureFrustum]:
    """Build frustums for several target views with one aggregator pass.

    depths: (K, H', W', D) metric camera-z samples, one slab per requested
    target view, ordered like ``target_indices``.
    """
    target_indices = list(target_indices)
    if depths.ndim != 4 or depths.shape[0] != len(target_indices):
        raise ShapeMismatch(f"depths {depths.shape} vs {len(target_indices)} targets")
    k, gh, gw, d = depths.shape
    rays = gh * gw
    pts = []
    qplks = []
    for slot, ti in enumerate(target_indices):
        cam = viewset.target_cameras[ti]
        pix = _grid_pixels(cam, (gh, gw))
        _, dirs = geo.rays_for_pixels(cam, pix)
        qplk = geo.plucker_arrays(np.broadcast_to(cam.center, dirs.shape), dirs)
        p = geo.unproject_points(cam, pix[:, None, :], depths[slot].reshape(rays, d))
        pts.append(p.reshape(rays * d, 3))
        qplks.append(np.repeat(qplk, d, axis=0))
    points = np.concatenate(pts, axis=0)
    query = np.concatenate(qplks, axis=0)

    feats, ref, valid = _gather_points(viewset, points)
    values, weights, any_valid = aggregator.forward_groups(feats, ref, query, valid, t)

    c_out = values.shape[-1]
    v_views = valid.shape[0]
    out = []
    for slot in range(k):
        lo, hi = slot * rays * d, (slot + 1) * rays * d
        vals = ad.transpose(ad.reshape(values[lo:hi], (gh, gw, d, c_out)), (2, 0, 1, 3))
        frustum_valid = any_valid[lo:hi].reshape(gh, gw, d).transpose(2, 0, 1)
        w = None
        if keep_weights:
            w = weights[lo:hi].reshape(gh, gw, d, v_views).transpose(2, 0, 1, 3)
        out.append(FeatureFrustum(values=vals, valid=frustum_valid, weights=w))
    return out


def build_frustum(viewset: ViewSet, target_index: int, depths: np.ndarray, t: int,
                  aggregator: Aggregator, keep_weights: bool = False) -> FeatureFrustum:
    """Frustum for one target view from per-ray depth samples (H', W', D)."""
    if depths.ndim != 3:
        raise ShapeMismatch(f"depths must be (H', W', D), got {depths.shape}")
    return build_frusta(viewset, [target_index], depths[None], t, aggregator,
                        keep_weights=keep_weights)[0]


def build_frustum_dense(viewset: ViewSet, target_index: int, d_dense: int, t: int,
                        aggregator: Aggregator, near: float, far: float,
                        grid_hw: tuple[int, int], keep_weights: bool = False) -> FeatureFrustum:
    """Baseline frustum: depths at ``d_dense`` cell centers evenly covering
    [near, far] on every ray, instead of depth-guided samples."""
    if d_dense < 1:
        raise ValueError("d_dense must be >= 1")
    centers = near + (far - near) * (np.arange(d_dense) + 0.5) / d_dense
    depths = np.broadcast_to(centers, grid_hw + (d_dense,)).copy()
    return build_frustum(viewset, target_index, depths, t, aggregator,
                         keep_weights=keep_weights)


def benchmark_frustum(viewset: ViewSet, target_index: int, t: int, aggregator: Aggregator,
                      sparse_depths: np.ndarray, dense_counts=(8, 16, 32, 64),
                      near: float = 1.0, far: float = 3.0, repeats: int = 3) -> list[dict]:
    """Wall-clock and peak-memory comparison of depth-guided vs dense sampling.

    Returns one row per configuration: mode, depth count, best seconds over
    ``repeats``, and tracemalloc peak MB.
    """
    rows = []

    def run(label, d_count, fn):
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            with ad.no_grad():
                fn()
            best = min(best, time.perf_counter() - t0)
        tracemalloc.start()
        with ad.no_grad():
            fn()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        rows.append({"mode": label, "depth_samples": d_count,
                     "seconds": best, "peak_mb": peak / 1e6})

    grid_hw = sparse_depths.shape[:2]
    run("guided", sparse_depths.shape[2],
        lambda: build_frustum(viewset, target_index, sparse_depths, t, aggregator))
    for dc in dense_counts:
        run("dense", dc,
            lambda dc=dc: build_frustum_dense(viewset, target_index, dc, t, aggregator,
                                              near, far, grid_hw))
    return rows

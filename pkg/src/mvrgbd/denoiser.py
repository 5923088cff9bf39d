"""Noise-prediction UNet over jointly generated RGB-D views.

One network denoises all target views of a scene at once (views ride the
batch axis). Each view sees three kinds of conditioning:

* a time/pose embedding (sinusoidal step features plus the flattened
  relative transform target-from-input) injected through per-block
  feature-wise scale/shift,
* the input view itself, whose first-conv features are concatenated with
  the noisy target's at the stem,
* a frustum of multi-view evidence attended to at the coarse level by
  per-location cross-attention (the frustum tokens for a grid cell are its
  depth samples; invalid samples are masked out).

The first convolution (``feature_conv``) is shared between the stem and the
frustum gather: the same per-view activation planes that enter the UNet are
what the sampler interpolates at reprojected points, so gather gradients
train the tap. The cross-attention output projection starts at zero, which
makes the network bitwise identical to its frustum-free ablation at
initialization.

Dropping the conditioning view (for classifier-free guidance) means a zero
input image, a zeroed pose part of the embedding (the step part stays), and
no frustum attention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry as geo
from . import nn
from . import schedule as sched
from .autodiff import Tensor
from .errors import ConfigError, ShapeMismatch
from .frustum import Aggregator, AggregatorConfig, FeatureFrustum, ViewSet, build_frusta


@dataclass(frozen=True)
class DenoiserConfig:
    """Shape of the denoiser; defaults fit a small-compute single-core build."""

    image_size: int = 32
    base_channels: int = 48
    channel_mult: tuple = (1, 2, 2)
    heads: int = 4
    feature_channels: int = 32      # first-conv tap width, shared with the gather
    emb_dim: int = 128
    time_dim: int = 64
    pose_dim: int = 16              # flattened 4x4 relative transform
    frustum_grid: int = 16
    agg_hidden: int = 48
    agg_out: int = 64
    agg_layers: int = 2
    agg_time_dim: int = 32
    use_frustum_attention: bool = True

    def __post_init__(self):
        if self.image_size % 4:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 4")
        if len(self.channel_mult) != 3:
            raise ConfigError("channel_mult must list three levels (full, half, quarter)")
        for m in self.channel_mult:
            if self.base_channels * m % 8:
                raise ConfigError("all channel counts must be divisible by 8")
        if self.frustum_grid != self.image_size // 2:
            raise ConfigError(
                f"frustum_grid {self.frustum_grid} must match the half-resolution "
                f"level {self.image_size // 2} where cross-attention runs")
        for name in ("base_channels", "heads", "feature_channels", "emb_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        c1 = self.base_channels * self.channel_mult[1]
        if c1 % self.heads:
            raise ConfigError(f"half-resolution width {c1} not divisible by {self.heads} heads")

    @property
    def level_channels(self) -> tuple:
        return tuple(self.base_channels * m for m in self.channel_mult)

    @property
    def gather_channels(self) -> int:
        """Channels per view seen by the frustum gather: RGB-D + tap features."""
        return 4 + self.feature_channels


class ResBlock(nn.Module):
    """norm-silu-conv twice with a scale/shift injection in between."""

    def __init__(self, c_in: int, c_out: int, emb_dim: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.norm1 = nn.GroupNorm(c_in, dtype=dtype)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, rng, dtype=dtype)
        self.film = nn.Linear(emb_dim, 2 * c_out, rng, dtype=dtype)
        self.norm2 = nn.GroupNorm(c_out, dtype=dtype)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng, zero_init=True, dtype=dtype)
        self.skip = nn.Conv2d(c_in, c_out, 1, rng, dtype=dtype) if c_in != c_out else None
        self.c_out = c_out
        self.dtype = dtype

    def __call__(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(ad.silu(self.norm1(x)))
        ss = self.film(ad.silu(emb))
        n = ss.shape[0]
        scale = ad.reshape(ss[:, :self.c_out], (n, self.c_out, 1, 1))
        shift = ad.reshape(ss[:, self.c_out:], (n, self.c_out, 1, 1))
        h = ad.add(ad.mul(h, ad.add(scale, np.asarray(1.0, dtype=self.dtype))), shift)
        h = self.conv2(ad.silu(self.norm2(h)))
        skip = x if self.skip is None else self.skip(x)
        return ad.add(h, skip)


class FrustumAttention(nn.Module):
    """Per-location cross-attention from a feature map to its frustum tokens.

    Each grid cell queries only its own depth samples. Invalid samples get a
    large negative score bias; cells with no valid sample contribute nothing.
    The output projection is zero-initialized so an untrained block is an
    exact identity.
    """

    def __init__(self, channels: int, kv_dim: int, heads: int, rng: np.random.Generator,
                 dtype=np.float32):
        self.norm = nn.GroupNorm(channels, dtype=dtype)
        self.q = nn.Conv2d(channels, channels, 1, rng, dtype=dtype)
        self.kv = nn.Linear(kv_dim, 2 * channels, rng, dtype=dtype)
        self.out = nn.Conv2d(channels, channels, 1, rng, zero_init=True, dtype=dtype)
        self.heads = heads
        self.channels = channels

    def __call__(self, x: Tensor, tokens: Tensor, valid: np.ndarray) -> Tensor:
        n, c, gh, gw = x.shape
        d = tokens.shape[1]
        if tokens.shape[:4] != (n, d, gh, gw):
            raise ShapeMismatch(f"frustum tokens {tokens.shape} vs map {x.shape}")
        hw = gh * gw
        hd = c // self.heads

        q = self.q(self.norm(x))                                    # (N, C, gh, gw)
        q = ad.transpose(ad.reshape(q, (n, c, hw)), (0, 2, 1))      # (N, HW, C)
        q = ad.reshape(q, (n * hw, self.heads, 1, hd))

        kv = self.kv(tokens)                                        # (N, D, gh, gw, 2C)
        kv = ad.transpose(kv, (0, 2, 3, 1, 4))                      # (N, gh, gw, D, 2C)
        kv = ad.reshape(kv, (n * hw, d, 2, self.heads, hd))
        k = ad.transpose(kv[:, :, 0], (0, 2, 1, 3))                 # (N*HW, h, D, hd)
        v = ad.transpose(kv[:, :, 1], (0, 2, 1, 3))

        bias = np.where(valid, 0.0, -1e30).astype(x.dtype)          # (N, D, gh, gw)
        bias = bias.transpose(0, 2, 3, 1).reshape(n * hw, 1, 1, d)
        att = nn.scaled_dot_attention(q, k, v, bias)                # (N*HW, h, 1, hd)

        att = ad.reshape(att, (n, hw, c))
        att = ad.reshape(ad.transpose(att, (0, 2, 1)), (n, c, gh, gw))
        # mask after the projection so cells with no valid sample receive
        # nothing at all, bias included
        any_valid = valid.any(axis=1).reshape(n, 1, gh, gw).astype(x.dtype)
        return ad.add(x, ad.mul(self.out(att), any_valid))


class Denoiser(nn.Module):
    """Predicts the injected noise for every target view of one scene."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        c0, c1, c2 = config.level_channels
        f = config.feature_channels

        self.feature_conv = nn.Conv2d(4, f, 3, rng, dtype=dtype)
        self.aggregator = Aggregator(
            AggregatorConfig(in_channels=config.gather_channels,
                             hidden=config.agg_hidden,
                             out_channels=config.agg_out,
                             heads=config.heads,
                             layers=config.agg_layers,
                             time_dim=config.agg_time_dim), rng, dtype=dtype)

        self.cond1 = nn.Linear(config.time_dim + config.pose_dim, config.emb_dim, rng, dtype=dtype)
        self.cond2 = nn.Linear(config.emb_dim, config.emb_dim, rng, dtype=dtype)

        self.stem = nn.Conv2d(2 * f, c0, 3, rng, dtype=dtype)
        self.down0 = ResBlock(c0, c0, config.emb_dim, rng, dtype)
        self.down1 = ResBlock(c0, c1, config.emb_dim, rng, dtype)
        self.attn_down = FrustumAttention(c1, config.agg_out, config.heads, rng, dtype)
        self.mid0 = ResBlock(c1, c2, config.emb_dim, rng, dtype)
        self.mid1 = ResBlock(c2, c2, config.emb_dim, rng, dtype)
        self.up1 = ResBlock(c2 + c1, c1, config.emb_dim, rng, dtype)
        self.attn_up = FrustumAttention(c1, config.agg_out, config.heads, rng, dtype)
        self.up0 = ResBlock(c1 + c0, c0, config.emb_dim, rng, dtype)
        self.out_norm = nn.GroupNorm(c0, dtype=dtype)
        self.out_conv = nn.Conv2d(c0, 4, 3, rng, zero_init=True, dtype=dtype)

    # -- conditioning -----------------------------------------------------

    def embed(self, t: int, rel_cam: np.ndarray | None, n: int) -> Tensor:
        """(N, emb_dim) conditioning vector; ``rel_cam=None`` drops the pose."""
        tvec = nn.sinusoidal_embedding(np.full(n, float(t)), self.config.time_dim,
                                       dtype=self.dtype)
        if rel_cam is None:
            rel_cam = np.zeros((n, self.config.pose_dim), dtype=self.dtype)
        rel_cam = np.asarray(rel_cam, dtype=self.dtype)
        if rel_cam.shape != (n, self.config.pose_dim):
            raise ShapeMismatch(f"rel_cam {rel_cam.shape}, want ({n}, {self.config.pose_dim})")
        cond = Tensor(np.concatenate([tvec, rel_cam], axis=1))
        return self.cond2(ad.silu(self.cond1(cond)))

    def feature_planes(self, images) -> Tensor:
        """First-conv activations for (B, 4, H, W) images."""
        return self.feature_conv(ad.as_tensor(images))

    def pad_input(self, input_rgb: np.ndarray) -> np.ndarray:
        """(H, W, 3) conditioning image -> (4, H, W) with a zero depth slot."""
        h, w, _ = input_rgb.shape
        chw = np.ascontiguousarray(input_rgb.transpose(2, 0, 1), dtype=self.dtype)
        return np.concatenate([chw, np.zeros((1, h, w), dtype=self.dtype)], axis=0)

    # -- the UNet ---------------------------------------------------------

    def forward(self, x_t, input_rgb: np.ndarray | None, rel_cam: np.ndarray | None,
                t: int, frusta: list | None = None,
                features: tuple | None = None) -> Tensor:
        """Noise estimate (N, 4, H, W) for noisy views ``x_t`` at step ``t``.

        ``input_rgb=None`` runs the unconditional branch (zero image, no pose,
        no frustum). ``features`` optionally reuses precomputed first-conv
        planes ``(target_planes, input_plane)`` so the caller can share them
        with the frustum gather.
        """
        x_t = ad.as_tensor(np.asarray(x_t, dtype=self.dtype) if not isinstance(x_t, Tensor)
                           else x_t)
        n, c, hh, ww = x_t.shape
        size = self.config.image_size
        if (c, hh, ww) != (4, size, size):
            raise ShapeMismatch(f"x_t {x_t.shape}, want (N, 4, {size}, {size})")

        if input_rgb is None:
            rel_cam = None
            frusta = None
            y = np.zeros((4, size, size), dtype=self.dtype)
        else:
            y = self.pad_input(input_rgb)

        if features is None:
            fx = self.feature_planes(x_t)
            fy = self.feature_planes(y[None])
        else:
            fx, fy = features
        fy = ad.mul(fy, np.ones((n, 1, 1, 1), dtype=self.dtype))    # broadcast over views

        emb = self.embed(t, rel_cam, n)
        h = self.stem(ad.concat([fx, fy], axis=1))
        h0 = self.down0(h, emb)                                     # (N, c0, S, S)
        h1 = self.down1(ad.avgpool2x(h0), emb)                      # (N, c1, S/2, S/2)

        use_frustum = (frusta is not None and self.config.use_frustum_attention)
        if use_frustum:
            tokens, valid = self._stack_frusta(frusta, n)
            h1 = self.attn_down(h1, tokens, valid)

        h2 = self.mid0(ad.avgpool2x(h1), emb)                       # (N, c2, S/4, S/4)
        h2 = self.mid1(h2, emb)

        u1 = self.up1(ad.concat([ad.upsample_nearest2x(h2), h1], axis=1), emb)
        if use_frustum:
            u1 = self.attn_up(u1, tokens, valid)
        u0 = self.up0(ad.concat([ad.upsample_nearest2x(u1), h0], axis=1), emb)
        return self.out_conv(ad.silu(self.out_norm(u0)))

    def _stack_frusta(self, frusta: list, n: int):
        if len(frusta) != n:
            raise ShapeMismatch(f"{len(frusta)} frusta for {n} views")
        g = self.config.frustum_grid
        for fr in frusta:
            if fr.values.shape[1:3] != (g, g):
                raise ShapeMismatch(
                    f"frustum grid {fr.values.shape[1:3]}, config wants {(g, g)}")
        tokens = ad.concat([ad.reshape(fr.values, (1,) + tuple(fr.values.shape))
                            for fr in frusta], axis=0)              # (N, D, g, g, C)
        valid = np.stack([fr.valid for fr in frusta])               # (N, D, g, g)
        return tokens, valid

    # -- glue for training and sampling -----------------------------------

    def build_viewset(self, input_rgb: np.ndarray, input_camera: geo.Camera,
                      target_cameras, x_t: np.ndarray):
        """ViewSet over the noisy views with shared first-conv feature planes.

        Returns ``(viewset, (target_planes, input_plane))`` so the planes can
        be passed straight back into :meth:`forward`.
        """
        y = self.pad_input(input_rgb)
        x_t = np.asarray(x_t, dtype=self.dtype)
        stacked = np.concatenate([y[None], x_t], axis=0)            # (N+1, 4, H, W)
        planes = self.feature_planes(stacked)
        vs = ViewSet(
            input_rgb=np.ascontiguousarray(input_rgb, dtype=self.dtype),
            input_camera=input_camera,
            target_images=np.ascontiguousarray(x_t.transpose(0, 2, 3, 1)),
            target_cameras=target_cameras,
            input_features=planes[0],
            target_features=planes[1:],
        )
        return vs, (planes[1:], planes[0:1])

    def guidance_depths(self, x_t: np.ndarray, t: int, noise_schedule: sched.NoiseSchedule,
                        params: sched.DepthSampleParams, rng: np.random.Generator | None,
                        near: float, far: float) -> np.ndarray:
        """Metric depth samples (N, grid, grid, D) from the noisy depth channel.

        The depth channel is pooled to the frustum grid, turned into an
        expected clean depth, perturbed per the sampling parameters in the
        normalized depth space, then mapped to metric range. ``rng=None``
        collapses every sample onto the expected depth.
        """
        n = x_t.shape[0]
        g = self.config.frustum_grid
        factor = self.config.image_size // g
        d_t = x_t[:, 3]
        pooled = d_t.reshape(n, g, factor, g, factor).mean(axis=(2, 4))
        if rng is None:
            center = np.clip(sched.expected_depth(pooled, t, noise_schedule), -1.0, 1.0)
            normed = np.repeat(center[..., None], params.D, axis=-1)
        else:
            normed = sched.sample_depths(pooled, t, params, noise_schedule, rng,
                                         near=-1.0, far=1.0)
        metric = near + (normed + 1.0) * 0.5 * (far - near)
        return np.ascontiguousarray(metric, dtype=self.dtype)

    def predict(self, input_rgb: np.ndarray, input_camera: geo.Camera, target_cameras,
                x_t: np.ndarray, t: int, noise_schedule: sched.NoiseSchedule,
                depth_params: sched.DepthSampleParams, rng: np.random.Generator | None,
                near: float, far: float) -> Tensor:
        """Conditional noise estimate with the frustum built from ``x_t`` itself."""
        rel = np.stack([geo.relative_transform(tc, input_camera).reshape(-1)
                        for tc in target_cameras]).astype(self.dtype)
        if not self.config.use_frustum_attention:
            return self.forward(x_t, input_rgb, rel, t, frusta=None)
        vs, planes = self.build_viewset(input_rgb, input_camera, target_cameras, x_t)
        depths = self.guidance_depths(x_t, t, noise_schedule, depth_params, rng, near, far)
        frusta = build_frusta(vs, range(len(target_cameras)), depths, t, self.aggregator)
        return self.forward(x_t, input_rgb, rel, t, frusta=frusta, features=planes)


def noise_loss(eps_hat: Tensor, eps: np.ndarray) -> Tensor:
    """Mean squared error, accumulated in sorted per-view order.

    Sorting the per-view means before the final reduction makes the scalar
    loss bit-identical under any reordering of the views.
    """
    eps = np.asarray(eps, dtype=eps_hat.dtype)
    if eps.shape != tuple(eps_hat.shape):
        raise ShapeMismatch(f"eps {eps.shape} vs prediction {eps_hat.shape}")
    n = eps.shape[0]
    diff = ad.sub(eps_hat, eps)
    per_view = ad.mean(ad.reshape(ad.square(diff), (n, -1)), axis=1)
    order = np.argsort(per_view.data, kind="stable")
    return ad.mean(ad.index_select(per_view, order, axis=0))

"""Training, joint multi-view ancestral sampling, and cloud extraction.

Training draws a scene and a view subset per step (first view conditions,
the rest are denoising targets), noises the targets at a uniformly sampled
step, and fits the injected noise with exact tape gradients. Sampling runs
the reverse chain jointly over every requested view, rebuilding the frustum
conditioning from the current noisy depths at each step and applying
classifier-free guidance. The generated depths unproject directly into a
colored point cloud.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import dataset as ds
from . import geometry as geo
from . import nn
from . import schedule as sched
from .denoiser import Denoiser, noise_loss
from .errors import ConfigError, NonFiniteLoss, ShapeMismatch
from .frustum import ViewSet, build_frusta


# -- optimizer -------------------------------------------------------------

class Adam(object):
    """Adam with bias correction; skips parameters without gradients."""

    def __init__(self, params, lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            p.data -= scale * m / (np.sqrt(v) + self.eps)


# -- training --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 1
    learning_rate: float = 1e-4
    views_per_sample: int = 5       # first view conditions, the rest are targets
    cfg_dropout: float = 0.1        # chance a step trains the unconditional branch
    seed: int = 0
    checkpoint_every: int = 0       # 0: only the final checkpoint
    out_dir: str | None = None      # None: no files, just the returned curve

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.views_per_sample < 2:
            raise ConfigError("views_per_sample needs an input view plus a target")
        if not 0.0 <= self.cfg_dropout <= 1.0:
            raise ConfigError("cfg_dropout must lie in [0, 1]")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")


def _stack_targets(views) -> np.ndarray:
    """RGB-D planes (N, 4, H, W) from rendered views (depth already normalized)."""
    return np.stack([np.concatenate([v.rgb.transpose(2, 0, 1), v.depth[None]], 0)
                     for v in views]).astype(np.float32)


def train(model: Denoiser, data: ds.Dataset, config: TrainConfig,
          noise_schedule: sched.NoiseSchedule,
          depth_params: sched.DepthSampleParams | None = None) -> np.ndarray:
    """Fit the denoiser on a dataset; returns the per-step loss curve.

    Per step: draw ``batch_size`` scenes, for each a ``views_per_sample``-view
    subset (first = input), a uniform diffusion step, and fresh noise; with
    probability ``cfg_dropout`` the conditioning is dropped entirely so the
    same weights learn the unconditional branch. One rng seeded from
    ``config.seed`` drives everything, so a rerun reproduces the loss curve
    bit for bit.

    Writes ``loss.csv`` and checkpoints under ``config.out_dir`` when set;
    raises :class:`NonFiniteLoss` naming the step if the loss leaves the
    reals.
    """
    if data.num_views < config.views_per_sample:
        raise ConfigError(
            f"dataset has {data.num_views} views per scene, "
            f"config wants {config.views_per_sample}")
    depth_params = depth_params or sched.DepthSampleParams()
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=config.learning_rate)
    losses = np.zeros(config.steps)
    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)

    for step in range(1, config.steps + 1):
        model.zero_grad()
        total = 0.0
        for _ in range(config.batch_size):
            scene = int(rng.integers(data.num_scenes))
            picked = rng.choice(data.num_views, size=config.views_per_sample,
                                replace=False)
            views = [data.load_view(scene, int(v)) for v in picked]
            x0 = _stack_targets(views[1:])
            t = int(rng.integers(1, noise_schedule.T + 1))
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            x_t = sched.forward_noise(x0, t, eps, noise_schedule)

            if rng.uniform() < config.cfg_dropout:
                eps_hat = model.forward(x_t, None, None, t)
            else:
                eps_hat = model.predict(
                    views[0].rgb, views[0].camera,
                    [v.camera for v in views[1:]], x_t, t, noise_schedule,
                    depth_params, rng, data.near, data.far)
            loss = noise_loss(eps_hat, eps)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteLoss(f"step {step}: loss is {value}")
            ad.backward(ad.mul(loss, 1.0 / config.batch_size))
            total += value
        opt.step()
        losses[step - 1] = total / config.batch_size

        if (config.out_dir and config.checkpoint_every
                and step % config.checkpoint_every == 0):
            nn.save_state(model, os.path.join(config.out_dir, f"model_{step:06d}.ckpt"),
                          meta={"step": step, "loss": losses[step - 1]})

    if config.out_dir:
        nn.save_state(model, os.path.join(config.out_dir, "model_final.ckpt"),
                      meta={"step": config.steps, "loss": losses[-1]})
        with open(os.path.join(config.out_dir, "loss.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for i, value in enumerate(losses, start=1):
                writer.writerow([i, f"{value:.8f}"])
    return losses


# -- sampling --------------------------------------------------------------

@dataclass
class SampleResult:
    """Jointly generated RGB-D views plus optional mid-chain snapshots."""

    views: np.ndarray               # (N, 4, H, W) in [-1, 1]
    cameras: list
    input_rgb: np.ndarray
    input_camera: geo.Camera
    snapshots: dict = field(default_factory=dict)   # t -> state entering step t

    def viewset(self) -> ViewSet:
        return ViewSet(
            input_rgb=self.input_rgb,
            input_camera=self.input_camera,
            target_images=np.ascontiguousarray(self.views.transpose(0, 2, 3, 1)),
            target_cameras=list(self.cameras),
        )


def sample(model: Denoiser, input_rgb: np.ndarray, input_camera: geo.Camera,
           target_cameras, noise_schedule: sched.NoiseSchedule,
           omega: float = 2.0, seed: int = 0,
           depth_params: sched.DepthSampleParams | None = None,
           near: float = 1.0, far: float = 3.0,
           snapshot_steps=(), x_init: np.ndarray | None = None) -> SampleResult:
    """Ancestral reverse chain over all target views at once.

    Every step rebuilds the frustum conditioning from the current noisy
    depths (clamped to [-1, 1.05] for the depth-centering only, since early
    states are pure noise) and blends conditional and unconditional noise
    estimates with guidance weight ``omega``. ``snapshot_steps`` collects
    copies of the state entering the named steps; ``x_init`` replaces the
    seeded Gaussian start (shape (N, 4, H, W)).
    """
    depth_params = depth_params or sched.DepthSampleParams()
    target_cameras = list(target_cameras)
    n = len(target_cameras)
    size = model.config.image_size
    rng = np.random.default_rng(seed)
    if x_init is None:
        x = rng.standard_normal((n, 4, size, size))
    else:
        if x_init.shape != (n, 4, size, size):
            raise ShapeMismatch(f"x_init {x_init.shape}, want {(n, 4, size, size)}")
        x = np.array(x_init, dtype=np.float64)
    rel = np.stack([geo.relative_transform(tc, input_camera).reshape(-1)
                    for tc in target_cameras]).astype(model.dtype)
    wanted = set(int(s) for s in snapshot_steps)
    snapshots = {}

    with ad.no_grad():
        for t in range(noise_schedule.T, 0, -1):
            if t in wanted:
                snapshots[t] = x.copy()
            x_in = x.astype(model.dtype)
            if model.config.use_frustum_attention:
                x_guide = x_in.copy()
                x_guide[:, 3] = np.clip(x_guide[:, 3], -1.0, 1.05)
                vs, planes = model.build_viewset(input_rgb, input_camera,
                                                 target_cameras, x_in)
                depths = model.guidance_depths(x_guide, t, noise_schedule,
                                               depth_params, rng, near, far)
                frusta = build_frusta(vs, range(n), depths, t, model.aggregator)
                eps_c = model.forward(x_in, input_rgb, rel, t,
                                      frusta=frusta, features=planes).data
            else:
                eps_c = model.forward(x_in, input_rgb, rel, t).data
            eps_u = model.forward(x_in, None, None, t).data
            eps = sched.cfg_combine(eps_c, eps_u, omega)
            x = sched.ancestral_step(x, eps, t, noise_schedule, rng)

    return SampleResult(
        views=np.clip(x, -1.0, 1.0).astype(np.float32),
        cameras=target_cameras,
        input_rgb=np.asarray(input_rgb),
        input_camera=input_camera,
        snapshots=snapshots,
    )


# -- point clouds ----------------------------------------------------------

@dataclass
class PointCloud:
    """World-space points with [0, 1] colors."""

    points: np.ndarray              # (M, 3) float64
    colors: np.ndarray              # (M, 3) float64

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] != self.colors.shape[0]:
            raise ShapeMismatch(
                f"{self.points.shape[0]} points vs {self.colors.shape[0]} colors")

    @property
    def empty(self) -> bool:
        return self.points.shape[0] == 0

    def __len__(self) -> int:
        return self.points.shape[0]


def rendered_to_viewset(views) -> ViewSet:
    """ViewSet whose targets are all the given rendered views (first conditions)."""
    return ViewSet(
        input_rgb=views[0].rgb,
        input_camera=views[0].camera,
        target_images=np.ascontiguousarray(
            _stack_targets(views).transpose(0, 2, 3, 1)),
        target_cameras=[v.camera for v in views],
    )


def extract_pointcloud(viewset: ViewSet, depth_threshold: float = 0.98,
                       near: float = 1.0, far: float = 3.0) -> PointCloud:
    """Unproject every foreground pixel of every view into one colored cloud.

    A pixel is foreground when its denormalized depth is positive and below
    ``depth_threshold * far`` (the background sentinel sits exactly at far).
    An all-background viewset yields an empty cloud — check ``cloud.empty``.
    """
    all_points, all_colors = [], []
    for v, camera in enumerate(viewset.target_cameras):
        image = viewset.target_images[v]
        metric = ds.denormalize_depth(image[:, :, 3].astype(np.float64), near, far)
        keep = (metric < depth_threshold * far) & (metric > 0.0)
        if not keep.any():
            continue
        rows, cols = np.nonzero(keep)
        pixels = np.stack([cols, rows], axis=-1).astype(np.float64)
        points = geo.unproject_points(camera, pixels, metric[keep])
        colors = np.clip((image[rows, cols, :3].astype(np.float64) + 1.0) / 2.0,
                         0.0, 1.0)
        all_points.append(points)
        all_colors.append(colors)
    if not all_points:
        return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)))
    return PointCloud(np.concatenate(all_points), np.concatenate(all_colors))


def write_ply(path, cloud: PointCloud) -> None:
    """ASCII PLY with ``x y z red green blue`` vertex rows."""
    color_bytes = np.clip(np.round(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(cloud.points, color_bytes):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path) -> PointCloud:
    """Read a cloud written by :func:`write_ply`."""
    with open(path, "r", encoding="ascii") as fh:
        if fh.readline().strip() != "ply" or fh.readline().strip() != "format ascii 1.0":
            raise ValueError(f"{path}: not an ASCII PLY file")
        n = 0
        for line in fh:
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line == "end_header":
                break
        points = np.zeros((n, 3))
        colors = np.zeros((n, 3))
        for i in range(n):
            parts = fh.readline().split()
            points[i] = [float(x) for x in parts[:3]]
            colors[i] = [int(x) / 255.0 for x in parts[3:6]]
    return PointCloud(points, colors)

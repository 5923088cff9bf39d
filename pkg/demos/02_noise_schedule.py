"""Walk the forward diffusion process over a rendered RGB-D view.

Shows the three quantities the rest of the library leans on:

  * the linear beta schedule and its cumulative alpha-bar decay,
  * forward_noise corrupting a clean view at increasing t,
  * expected_depth / sample_depths turning a noisy depth channel into the
    spread of metric depth hypotheses that later feeds the frustum sampler.

Writes a corruption strip to demos/out/02_noise_schedule/ and prints a
small Monte-Carlo check that the implemented identities hold.
"""

import os

import numpy as np
from PIL import Image

import mvrgbd as mv
from mvrgbd.schedule import DepthSampleParams, expected_depth, sample_depths

SEED = 3
T = 100
NEAR, FAR = 1.0, 3.0
OUT = os.path.join(os.path.dirname(__file__), "out", "02_noise_schedule")


def main():
    os.makedirs(OUT, exist_ok=True)
    sched = mv.linear_schedule(T=T)
    print(f"linear schedule: T={T}, beta {sched.beta[0]:.4f} -> {sched.beta[-1]:.4f}")
    for t in (1, T // 4, T // 2, 3 * T // 4, T):
        print(f"  t={t:3d}  alpha_bar={sched.alpha_bar[t - 1]:.6f}")

    rng = np.random.default_rng(SEED)
    scene = mv.random_scene(rng)
    cam = mv.make_rig(num_views=8, image_size=64)[1]
    view = mv.render(scene, cam, near=NEAR, far=FAR)
    x0 = np.concatenate([view.rgb, view.depth[..., None]], axis=2)

    tiles = []
    for t in (1, T // 4, T // 2, 3 * T // 4, T):
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        xt = mv.forward_noise(x0, t, eps, sched)
        rgb = np.clip((xt[..., :3] + 1.0) * 0.5, 0.0, 1.0)
        tiles.append((rgb * 255).round().astype(np.uint8))
    strip = np.concatenate(tiles, axis=1)
    path = os.path.join(OUT, "forward_strip.png")
    Image.fromarray(strip).save(path)
    print(f"wrote {path} (t = 1 .. {T} left to right)")

    # the depth channel of x_t, rescaled by 1/sqrt(alpha_bar), is an unbiased
    # estimate of the clean depth -- verify by Monte Carlo at one foreground pixel
    ij = np.argwhere(view.mask)[len(np.argwhere(view.mask)) // 2]
    d0 = float(x0[ij[0], ij[1], 3])
    t = T // 3
    draws = []
    for _ in range(2000):
        eps = rng.standard_normal(x0.shape).astype(np.float32)
        xt = mv.forward_noise(x0, t, eps, sched)
        draws.append(expected_depth(xt[ij[0], ij[1], 3], t, sched))
    err = abs(np.mean(draws) - d0)
    print(f"expected_depth MC at t={t}: |mean - d0| = {err:.4f} over 2000 draws")

    # depth hypotheses spread around the estimate, clipped to [near, far];
    # late in the chain the spread is wide, near the end it hugs the estimate
    params = DepthSampleParams(k=1.0, D=5)
    for t in (T // 2, T // 10):
        ab = sched.alpha_bar[t - 1]
        d_t = np.asarray(np.sqrt(ab) * d0 + np.sqrt(1 - ab) * rng.standard_normal(),
                         dtype=np.float32)
        # d_t lives in normalized depth, so the bounds do too
        hyp = sample_depths(d_t, t, params, sched, rng, -1.0, 1.0)
        metric = mv.denormalize_depth(np.sort(hyp.ravel()), NEAR, FAR)
        print(f"sample_depths at t={t:3d}: {np.round(metric, 3)} "
              f"(metric, true {mv.denormalize_depth(d0, NEAR, FAR):.3f})")


if __name__ == "__main__":
    main()

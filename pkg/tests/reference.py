"""Independent oracles used by the test suite.

Everything here is deliberately written the slow, obvious way (scalar loops,
central differences, linear scans) so tests compare the library against
implementations that share no code with it.
"""

from __future__ import annotations

import numpy as np


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar f at x, elementwise in float64."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a-b| / max(floor, |a|, |b|), elementwise then reduced."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def brute_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Half the sum of both directed mean nearest-neighbour distances (unsquared)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2))
    return 0.5 * float(d.min(axis=1).mean() + d.min(axis=0).mean())


def parse_ascii_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Minimal, independent ASCII PLY reader.

    Returns (positions (N, 3) float64, colors (N, 3) uint8). Raises ValueError
    on anything that is not a plain vertex-only ASCII PLY with x y z
    red green blue properties in that order.
    """
    with open(path, "r", encoding="ascii") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError("missing ply magic")
        fmt = fh.readline().strip()
        if fmt != "format ascii 1.0":
            raise ValueError(f"unsupported format line: {fmt!r}")
        n_vertex = None
        props = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("unterminated header")
            line = line.strip()
            if line.startswith("comment"):
                continue
            if line.startswith("element vertex"):
                n_vertex = int(line.split()[-1])
                continue
            if line.startswith("element"):
                raise ValueError(f"unexpected element: {line!r}")
            if line.startswith("property"):
                props.append(tuple(line.split()[1:]))
                continue
            if line == "end_header":
                break
        expected = [("float", "x"), ("float", "y"), ("float", "z"),
                    ("uchar", "red"), ("uchar", "green"), ("uchar", "blue")]
        if n_vertex is None or props != expected:
            raise ValueError(f"unexpected vertex layout: {props}")
        pos = np.zeros((n_vertex, 3), dtype=np.float64)
        col = np.zeros((n_vertex, 3), dtype=np.uint8)
        for i in range(n_vertex):
            parts = fh.readline().split()
            if len(parts) != 6:
                raise ValueError(f"bad vertex row {i}")
            pos[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
            col[i] = [int(parts[3]), int(parts[4]), int(parts[5])]
        return pos, col


def sphere_sdf(points: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(points - center, axis=-1) - radius


def box_sdf(points: np.ndarray, center: np.ndarray, half_extent: np.ndarray) -> np.ndarray:
    q = np.abs(points - center) - half_extent
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


# -- scalar frustum pipeline ----------------------------------------------
# Everything below re-derives the frustum math from camera manifest numbers
# and parameter arrays with plain loops in float64, sharing no code with the
# library implementation.

def ref_camera_parts(camera):
    K = np.asarray(camera.intrinsics, dtype=np.float64)
    T = np.asarray(camera.world_to_cam, dtype=np.float64)
    return K, T[:3, :3], T[:3, 3]


def ref_project(camera, p):
    """(u, v, z) from first principles; z may be <= 0."""
    K, R, t = ref_camera_parts(camera)
    pc = R @ np.asarray(p, dtype=np.float64) + t
    z = pc[2]
    if z <= 1e-9:
        return 0.0, 0.0, z
    return K[0, 0] * pc[0] / z + K[0, 2], K[1, 1] * pc[1] / z + K[1, 2], z


def ref_contains(camera, p) -> bool:
    u, v, z = ref_project(camera, p)
    if z <= 1e-9:
        return False
    return -0.5 <= u <= camera.width - 0.5 and -0.5 <= v <= camera.height - 0.5


def ref_unproject(camera, u, v, z):
    K, R, t = ref_camera_parts(camera)
    pc = np.array([(u - K[0, 2]) / K[0, 0] * z, (v - K[1, 2]) / K[1, 1] * z, z])
    return R.T @ (pc - t)


def ref_camera_center(camera):
    _, R, t = ref_camera_parts(camera)
    return -R.T @ t


def ref_bilinear(plane: np.ndarray, x: float, y: float) -> np.ndarray:
    """plane: (C, H, W); clamped bilinear sample at continuous (x, y)."""
    C, H, W = plane.shape
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    fx, fy = x - x0, y - y0
    out = np.zeros(C)
    for c in range(C):
        out[c] = ((1 - fx) * (1 - fy) * plane[c, y0, x0]
                  + fx * (1 - fy) * plane[c, y0, x1]
                  + (1 - fx) * fy * plane[c, y1, x0]
                  + fx * fy * plane[c, y1, x1])
    return out


def ref_sinusoidal(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / half)
    args = t * freqs
    return np.concatenate([np.sin(args), np.cos(args)])


def ref_layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        mu = x[i].mean()
        var = ((x[i] - mu) ** 2).mean()
        out[i] = (x[i] - mu) / np.sqrt(var + eps) * gamma + beta
    return out


def _lin(layer):
    w = np.asarray(layer.weight.data, dtype=np.float64)
    b = np.asarray(layer.bias.data, dtype=np.float64)
    return w, b


def ref_aggregate_group(agg, feats: np.ndarray, ref_plk: np.ndarray, query_plk: np.ndarray,
                        valid: np.ndarray, t: int):
    """One token group through the aggregator, loops and float64 throughout.

    Returns (value (C,), weights (V,), f_per_view (V, C)).
    """
    cfg = agg.config
    V = valid.shape[0]
    tokens = np.zeros((V, cfg.token_dim))
    for v in range(V):
        tokens[v] = np.concatenate([[1.0 if valid[v] else 0.0],
                                    feats[v], ref_plk[v], query_plk])
    we, be = _lin(agg.embed)
    x = np.stack([tokens[v] @ we + be for v in range(V)])
    wt, bt = _lin(agg.time_proj)
    x = np.concatenate([x, (ref_sinusoidal(float(t), cfg.time_dim) @ wt + bt)[None]], axis=0)

    heads = cfg.heads
    hd = cfg.hidden // heads
    T = x.shape[0]
    for blk in agg.blocks:
        g1 = np.asarray(blk.ln1.gamma.data, dtype=np.float64)
        b1 = np.asarray(blk.ln1.beta.data, dtype=np.float64)
        h1 = ref_layernorm(x, g1, b1)
        wq, bq = _lin(blk.qkv)
        qkv = np.stack([h1[i] @ wq + bq for i in range(T)])
        q, k, v = qkv[:, :cfg.hidden], qkv[:, cfg.hidden:2 * cfg.hidden], qkv[:, 2 * cfg.hidden:]
        att_out = np.zeros((T, cfg.hidden))
        for h in range(heads):
            qs = q[:, h * hd:(h + 1) * hd]
            ks = k[:, h * hd:(h + 1) * hd]
            vs = v[:, h * hd:(h + 1) * hd]
            for i in range(T):
                scores = np.array([qs[i] @ ks[j] for j in range(T)]) / np.sqrt(hd)
                scores -= scores.max()
                e = np.exp(scores)
                a = e / e.sum()
                att_out[i, h * hd:(h + 1) * hd] = sum(a[j] * vs[j] for j in range(T))
        wp, bp = _lin(blk.proj)
        x = x + np.stack([att_out[i] @ wp + bp for i in range(T)])
        g2 = np.asarray(blk.ln2.gamma.data, dtype=np.float64)
        b2 = np.asarray(blk.ln2.beta.data, dtype=np.float64)
        h2 = ref_layernorm(x, g2, b2)
        w1, b1_ = _lin(blk.fc1)
        w2, b2_ = _lin(blk.fc2)
        mid = np.stack([h2[i] @ w1 + b1_ for i in range(T)])
        mid = mid * (1.0 / (1.0 + np.exp(-mid)))
        x = x + np.stack([mid[i] @ w2 + b2_ for i in range(T)])

    view_tok = x[:V]
    ww, bw = _lin(agg.w_head)
    logits = np.array([(view_tok[v] @ ww + bw)[0] for v in range(V)])
    logits = np.where(valid, logits, -np.inf)
    if valid.any():
        shifted = logits - logits[valid].max()
        e = np.where(valid, np.exp(shifted), 0.0)
        weights = e / e.sum()
    else:
        weights = np.zeros(V)
    wf, bf = _lin(agg.f_head)
    f = np.stack([view_tok[v] @ wf + bf for v in range(V)])
    value = sum(weights[v] * f[v] for v in range(V)) if valid.any() else np.zeros(f.shape[1])
    return value, weights, f


def ref_build_frustum(viewset, target_index: int, depths: np.ndarray, t: int, agg):
    """Loop-everything frustum: returns (D, H', W', C_out) float64 array."""
    planes = viewset.feature_stack().data.astype(np.float64)
    cams = viewset.cameras
    V = len(cams)
    gh, gw, D = depths.shape
    cam = viewset.target_cameras[target_index]
    c_out = agg.config.out_channels
    out = np.zeros((D, gh, gw, c_out))
    center = ref_camera_center(cam)
    K, R, _ = ref_camera_parts(cam)
    for i in range(gh):
        for j in range(gw):
            u = (j + 0.5) * (cam.width / gw) - 0.5
            v = (i + 0.5) * (cam.height / gh) - 0.5
            d_cam = np.array([(u - K[0, 2]) / K[0, 0], (v - K[1, 2]) / K[1, 1], 1.0])
            d_world = R.T @ d_cam
            d_world = d_world / np.linalg.norm(d_world)
            qplk = np.concatenate([d_world, np.cross(center, d_world)])
            for d in range(D):
                p = ref_unproject(cam, u, v, depths[i, j, d])
                feats = np.zeros((V, planes.shape[1]))
                refp = np.zeros((V, 6))
                valid = np.zeros(V, dtype=bool)
                for n, c in enumerate(cams):
                    cc = ref_camera_center(c)
                    delta = cc - p
                    norm = np.linalg.norm(delta)
                    if norm >= 1e-12:
                        rd = delta / norm
                        refp[n] = np.concatenate([rd, np.cross(p, rd)])
                    if ref_contains(c, p) and norm >= 1e-12:
                        valid[n] = True
                        pu, pv, _ = ref_project(c, p)
                        feats[n] = ref_bilinear(planes[n], pu, pv)
                value, _, _ = ref_aggregate_group(agg, feats, refp, qplk, valid, t)
                out[d, i, j] = value
    return out

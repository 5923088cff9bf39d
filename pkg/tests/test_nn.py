"""Layer behaviors, embedding values, and checkpoint io."""

from __future__ import annotations

import numpy as np
import pytest

from mvrgbd import autodiff as ad
from mvrgbd import nn
from mvrgbd.errors import CorruptCheckpoint
from reference import ref_sinusoidal


def test_linear_applies_affine_map():
    rng = np.random.default_rng(0)
    lin = nn.Linear(5, 3, rng, dtype=np.float64)
    x = rng.standard_normal((4, 5))
    out = lin(ad.Tensor(x)).data
    np.testing.assert_allclose(out, x @ lin.weight.data + lin.bias.data, atol=1e-12)


def test_conv2d_zero_init_and_default_padding():
    rng = np.random.default_rng(1)
    conv = nn.Conv2d(3, 6, 3, rng, zero_init=True)
    assert not conv.weight.data.any() and not conv.bias.data.any()
    x = ad.Tensor(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
    assert nn.Conv2d(3, 6, 3, rng)(x).shape == (2, 6, 8, 8)  # same-size output
    assert nn.Conv2d(3, 6, 1, rng)(x).shape == (2, 6, 8, 8)


def test_group_norm_normalizes_per_group():
    rng = np.random.default_rng(2)
    gn = nn.GroupNorm(8, groups=4, dtype=np.float64)
    x = rng.standard_normal((3, 8, 5, 5)) * 4.0 + 2.0
    out = gn(ad.Tensor(x)).data
    grouped = out.reshape(3, 4, -1)
    np.testing.assert_allclose(grouped.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(grouped.var(axis=-1), 1.0, atol=1e-4)
    with pytest.raises(ValueError):
        nn.GroupNorm(10, groups=4)


def test_layer_norm_normalizes_last_axis():
    rng = np.random.default_rng(3)
    ln = nn.LayerNorm(16, dtype=np.float64)
    x = rng.standard_normal((2, 7, 16)) * 3.0 - 1.0
    out = ln(ad.Tensor(x)).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_sinusoidal_embedding_matches_reference():
    steps = np.array([0.0, 1.0, 17.0, 99.0])
    emb = nn.sinusoidal_embedding(steps, 32, dtype=np.float64)
    assert emb.shape == (4, 32)
    for i, t in enumerate(steps):
        np.testing.assert_allclose(emb[i], ref_sinusoidal(float(t), 32), atol=1e-12)
    with pytest.raises(ValueError):
        nn.sinusoidal_embedding(steps, 15)


def test_scaled_dot_attention_matches_manual_softmax():
    rng = np.random.default_rng(4)
    q = rng.standard_normal((2, 3, 4))
    k = rng.standard_normal((2, 5, 4))
    v = rng.standard_normal((2, 5, 6))
    out = nn.scaled_dot_attention(ad.Tensor(q), ad.Tensor(k), ad.Tensor(v)).data
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(4.0)
    w = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w /= w.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(out, w @ v, atol=1e-12)


def test_scaled_dot_attention_mask_excludes_keys():
    rng = np.random.default_rng(5)
    q = rng.standard_normal((1, 2, 4))
    k = rng.standard_normal((1, 3, 4))
    v = rng.standard_normal((1, 3, 4))
    bias = np.array([[[0.0, -1e30, 0.0]] * 2])
    out = nn.scaled_dot_attention(ad.Tensor(q), ad.Tensor(k), ad.Tensor(v), bias).data
    # with key 1 excluded the result must equal attention over keys {0, 2}
    sub = nn.scaled_dot_attention(
        ad.Tensor(q), ad.Tensor(k[:, [0, 2]]), ad.Tensor(v[:, [0, 2]])).data
    np.testing.assert_allclose(out, sub, atol=1e-12)


class _Stack(nn.Module):
    def __init__(self, rng, dtype=np.float32):
        self.head = nn.Linear(6, 4, rng, dtype=dtype)
        self.conv = nn.Conv2d(2, 3, 3, rng, dtype=dtype)
        self.norm = nn.GroupNorm(8, dtype=dtype)
        self.blocks = [nn.Linear(4, 4, rng, dtype=dtype) for _ in range(2)]


def test_named_parameters_are_ordered_and_nested():
    names = [n for n, _ in _Stack(np.random.default_rng(6)).named_parameters()]
    assert names == [
        "head.weight", "head.bias", "conv.weight", "conv.bias",
        "norm.gamma", "norm.beta",
        "blocks.0.weight", "blocks.0.bias", "blocks.1.weight", "blocks.1.bias",
    ]


def test_checkpoint_roundtrip_bitwise(tmp_path):
    src = _Stack(np.random.default_rng(7))
    path = tmp_path / "weights.ckpt"
    nn.save_state(src, path, meta={"step": 12, "note": "x"})
    dst = _Stack(np.random.default_rng(8))
    before = [p.data.copy() for p in dst.parameters()]
    meta = nn.load_state(dst, path)
    assert meta == {"step": 12, "note": "x"}
    pairs = list(zip(src.parameters(), dst.parameters()))
    assert any(not np.array_equal(b, q.data) for b, (_, q) in zip(before, pairs))
    for p, q in pairs:
        assert p.data.tobytes() == q.data.tobytes()


def test_checkpoint_rejects_corruption(tmp_path):
    src = _Stack(np.random.default_rng(9))
    path = tmp_path / "weights.ckpt"
    nn.save_state(src, path)
    raw = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    for mutated in (b"XXXX" + raw[4:],                 # magic
                    raw[:4] + b"\x09" + raw[5:],       # version
                    raw[:-5],                          # truncated blob
                    raw + b"\x00" * 3):                # trailing bytes
        bad.write_bytes(mutated)
        with pytest.raises(CorruptCheckpoint):
            nn.load_state(_Stack(np.random.default_rng(9)), bad)

    class Other(nn.Module):
        def __init__(self):
            self.head = nn.Linear(6, 4, np.random.default_rng(0))

    with pytest.raises(CorruptCheckpoint):
        nn.load_state(Other(), path)


def test_checkpoint_rejects_shape_change(tmp_path):
    src = _Stack(np.random.default_rng(10))
    path = tmp_path / "weights.ckpt"
    nn.save_state(src, path)
    dst = _Stack(np.random.default_rng(11))
    dst.head = nn.Linear(6, 4, np.random.default_rng(0), dtype=np.float64)
    with pytest.raises(CorruptCheckpoint):
        nn.load_state(dst, path)

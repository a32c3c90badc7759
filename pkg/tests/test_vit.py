import math

import numpy as np
import pytest
from scipy.special import erf

from vitprune.errors import ConfigError, DimensionError
from vitprune.vit import (
    DEIT_SMALL_CONFIG,
    DEIT_TINY_CONFIG,
    DESK_CONFIG,
    VIT_SMALL_CONFIG,
    VitConfig,
    count_flops,
    count_params,
    flops_breakdown,
    forward,
    forward_per_head,
    init_weights,
    loss_and_grads,
    patchify,
)

TINY = VitConfig(image_size=8, patch_size=4, embed_dim=12, num_blocks=2, num_heads=3,
                 mlp_hidden=10, num_classes=5)


def reference_forward(model, images):
    """Straight-line per-sample evaluation with numpy's own matmul."""
    cfg = model.config
    p, g = cfg.patch_size, cfg.image_size // cfg.patch_size
    H, dh = cfg.num_heads, cfg.head_dim
    out = []

    def ln(v, gain, bias):
        mu = v.mean(-1, keepdims=True)
        var = ((v - mu) ** 2).mean(-1, keepdims=True)
        return (v - mu) / np.sqrt(var + cfg.ln_eps) * gain + bias

    for img in images:
        patches = []
        for r in range(g):
            for c in range(g):
                patches.append(img[:, r * p:(r + 1) * p, c * p:(c + 1) * p].reshape(-1))
        x = np.array(patches) @ model.patch_w + model.patch_b
        x = np.vstack([model.cls_token, x]) + model.pos_embed
        for blk in model.blocks:
            h = ln(x, blk.ln1_g, blk.ln1_b)
            qkv = h @ blk.qkv_w + (blk.qkv_b if blk.qkv_b is not None else 0)
            heads = []
            for i in range(H):
                sl = qkv[:, 3 * i * dh:3 * (i + 1) * dh]
                q, k, v = sl[:, :dh], sl[:, dh:2 * dh], sl[:, 2 * dh:]
                s = q @ k.T / math.sqrt(dh)
                a = np.exp(s - s.max(1, keepdims=True))
                heads.append((a / a.sum(1, keepdims=True)) @ v)
            x = x + np.hstack(heads) @ blk.proj_w + blk.proj_b
            h = ln(x, blk.ln2_g, blk.ln2_b)
            u = h @ blk.fc1_w + blk.fc1_b
            u = 0.5 * u * (1 + erf(u / math.sqrt(2)))
            x = x + u @ blk.fc2_w + blk.fc2_b
        x = ln(x, model.norm_g, model.norm_b)
        out.append(x[0] @ model.head_w + model.head_b)
    return np.array(out)


def perturbed(config, seed=0):
    """Weights with nonzero biases and affine params so every term matters."""
    m = init_weights(config, seed)
    r = np.random.default_rng(seed + 1)
    for name, arr in m.named_arrays():
        m.set_array(name, arr + 0.1 * r.standard_normal(arr.shape))
    return m


def test_forward_matches_independent_reference(rng):
    m = perturbed(TINY)
    x = rng.standard_normal((3, 3, 8, 8))
    logits, _ = forward(m, x)
    assert np.allclose(logits, reference_forward(m, x), rtol=1e-12, atol=1e-12)


def test_forward_without_qkv_bias(rng):
    cfg = VitConfig(image_size=8, patch_size=4, embed_dim=8, num_blocks=1, num_heads=2,
                    mlp_hidden=6, num_classes=3, qkv_bias=False)
    m = perturbed(cfg)
    x = rng.standard_normal((2, 3, 8, 8))
    assert np.allclose(forward(m, x)[0], reference_forward(m, x), rtol=1e-12, atol=1e-12)


def test_per_head_forward_is_bit_identical(rng):
    m = perturbed(TINY)
    x = rng.standard_normal((2, 3, 8, 8))
    assert np.array_equal(forward(m, x)[0], forward_per_head(m, x))


def test_float32_stays_float32(rng):
    m = init_weights(TINY, 0, np.float32)
    logits, _ = forward(m, rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
    assert logits.dtype == np.float32


def test_capture_shapes(rng):
    m = init_weights(TINY, 0)
    _, cap = forward(m, rng.standard_normal((2, 3, 8, 8)), capture=[1])
    assert set(cap.outputs) == {1}
    assert cap.outputs[1].shape == (2, 3, TINY.num_tokens, TINY.head_dim)
    assert cap.head_output(1, 2).shape == (2, TINY.num_tokens, TINY.head_dim)


def test_patchify_layout_and_errors():
    img = np.arange(2 * 3 * 8 * 8, dtype=float).reshape(2, 3, 8, 8)
    p = patchify(img, TINY)
    assert p.shape == (2, 4, 48)
    assert np.array_equal(p[1, 1], img[1, :, 0:4, 4:8].reshape(-1))
    with pytest.raises(DimensionError):
        patchify(np.zeros((2, 3, 8, 9)), TINY)
    with pytest.raises(DimensionError):
        patchify(np.zeros((3, 8, 8)), TINY)


def test_gradients_by_finite_differences(rng):
    m = perturbed(TINY, 3)
    x = rng.standard_normal((2, 3, 8, 8))
    y = np.array([1, 4])
    _, grads, _ = loss_and_grads(m, x, y)
    h = 1e-6
    for name, arr in m.named_arrays():
        for _ in range(2):
            idx = tuple(rng.integers(0, n) for n in arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            lp = loss_and_grads(m, x, y)[0]
            arr[idx] = old - h
            lm = loss_and_grads(m, x, y)[0]
            arr[idx] = old
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grads[name][idx]) <= 1e-6 + 1e-4 * abs(fd), name


def test_config_validation():
    with pytest.raises(ConfigError):
        VitConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ConfigError):
        VitConfig(image_size=30, patch_size=4)
    with pytest.raises(ConfigError):
        VitConfig(num_blocks=0)


def manual_param_count(cfg):
    d, m = cfg.embed_dim, cfg.mlp_hidden
    block = (d * 3 * d + (3 * d if cfg.qkv_bias else 0) + d * d + d
             + d * m + m + m * d + d + 4 * d)
    return (cfg.patch_dim * d + d + d + cfg.num_tokens * d + cfg.num_blocks * block
            + 2 * d + d * cfg.num_classes + cfg.num_classes)


@pytest.mark.parametrize("cfg", [DESK_CONFIG, TINY, VitConfig(qkv_bias=False, num_blocks=1)])
def test_count_params_matches_array_sizes(cfg):
    m = init_weights(cfg, 0)
    assert count_params(m) == sum(a.size for _, a in m.named_arrays())
    assert count_params(cfg) == count_params(m) == manual_param_count(cfg)


def test_reference_architecture_sizes():
    assert count_params(DESK_CONFIG) == 142_026
    assert count_params(DEIT_TINY_CONFIG) == 5_717_416
    assert count_params(DEIT_SMALL_CONFIG) == 22_050_664
    assert count_params(VIT_SMALL_CONFIG) == 47_993_098


def test_flops_components():
    cfg = DEIT_TINY_CONFIG
    b = flops_breakdown(cfg)
    T, d = cfg.num_tokens, cfg.embed_dim
    assert b["qkv"] == cfg.num_blocks * 2 * T * d * 3 * d
    assert b["attention"] == cfg.num_blocks * 4 * T * T * d
    assert b["mlp"] == cfg.num_blocks * 4 * T * d * cfg.mlp_hidden
    # DeiT-Tiny is commonly quoted at about 1.3 GMACs
    assert 1.2e9 < count_flops(cfg) / 2 < 1.3e9

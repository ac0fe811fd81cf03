import json
import math
from dataclasses import replace

import numpy as np
import pytest

from multiscale_va import layers as L
from multiscale_va import model as M
from multiscale_va import tensor as T
from multiscale_va.errors import DimensionError, InputError, ParameterError
from multiscale_va.training import batch_loss, grad_check

TINY = M.ModelConfig.preset("tiny")  # seq_len=32, d_model=16, 2 heads, 2 layers, D=8


# -- independent numpy reference ---------------------------------------------------

def ref_layer_norm(x, g, b, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_softmax_rows(s):
    out = np.empty_like(s)
    for i, row in enumerate(s):
        e = np.exp(row - row.max())
        out[i] = e / e.sum()
    return out


def ref_pe(length, d):
    pe = np.zeros((length, d))
    for pos in range(length):
        for i in range(d):
            angle = pos / 10000 ** ((i - i % 2) / d)
            pe[pos, i] = math.sin(angle) if i % 2 == 0 else math.cos(angle)
    return pe


def ref_branch(x, a, proj, cfg, s):
    p = f"scale{s}"
    tok = x @ a[f"{p}.embed.projection"] + a[f"{p}.embed.bias"] + ref_pe(len(x), cfg.d_model)
    for layer in range(cfg.n_layers):
        b = f"{p}.block{layer}"
        h = ref_layer_norm(tok, a[f"{b}.ln1.gamma"], a[f"{b}.ln1.beta"], cfg.ln_eps)
        heads = []
        for k in range(cfg.n_heads):
            q, kk, v = h @ a[f"{b}.attn.query{k}"], h @ a[f"{b}.attn.key{k}"], h @ a[f"{b}.attn.value{k}"]
            heads.append(ref_softmax_rows(q @ kk.T / math.sqrt(cfg.d_head)) @ v)
        y = np.hstack(heads) @ a[f"{b}.attn.output"] + tok
        h2 = ref_layer_norm(y, a[f"{b}.ln2.gamma"], a[f"{b}.ln2.beta"], cfg.ln_eps)
        tok = np.maximum(h2 @ a[f"{b}.mlp.w1"] + a[f"{b}.mlp.b1"], 0) @ a[f"{b}.mlp.w2"] + a[f"{b}.mlp.b2"] + y
    feats = np.zeros(proj.n_features)
    for row in x:
        feats += math.sqrt(2 / proj.n_features) * np.cos(row @ proj.weights + proj.offsets)
    return np.concatenate([tok.mean(axis=0), feats / len(x)])


def ref_pool(x, k):
    return np.array([x[i * k:(i + 1) * k].mean(axis=0) for i in range(len(x) // k)])


def ref_forward(window, params):
    cfg, a = params.config, params.arrays
    fused = np.concatenate([ref_branch(window if s == 1 else ref_pool(window, s), a, params.projections[s], cfg, s)
                            for s in (1, 2, 4)])
    h = fused
    n_fc = len(cfg.head_widths) + 1
    for i in range(n_fc):
        h = h @ a[f"head.fc{i}.weight"] + a[f"head.fc{i}.bias"]
        if i < n_fc - 1:
            h = np.maximum(h, 0)
    return h


# -- pyramid -------------------------------------------------------------------------

@pytest.mark.parametrize("length", [8, 64, 2048])
def test_pyramid_lengths(length):
    out = M.build_pyramid(T.Tensor(np.zeros((length, 8))))
    assert [p.shape[0] for p in out] == [length, length // 2, length // 4]


def test_pyramid_constant_and_ramp():
    const = M.build_pyramid(T.Tensor(np.full((16, 8), 3.25)))
    assert all(np.all(p.data == 3.25) for p in const)
    ramp = np.arange(1.0, 9.0)[:, None]
    ramp8 = np.tile(ramp, (1, 8))
    scales = M.build_pyramid(T.Tensor(ramp8))
    np.testing.assert_array_equal(scales[1].data[:, 0], [1.5, 3.5, 5.5, 7.5])
    np.testing.assert_array_equal(scales[2].data[:, 0], [2.5, 6.5])


def test_pyramid_consistency():
    x = T.Tensor(np.random.default_rng(0).normal(size=(64, 8)))
    s1, s2, s4 = M.build_pyramid(x)
    np.testing.assert_allclose(T.avg_pool1d(s1, 2, 2).data, s2.data, rtol=0, atol=1e-15)
    np.testing.assert_allclose(T.avg_pool1d(s2, 2, 2).data, s4.data, rtol=0, atol=1e-15)


def test_pyramid_rejects_indivisible_length():
    with pytest.raises(InputError):
        M.build_pyramid(T.Tensor(np.zeros((10, 8))))


# -- config ------------------------------------------------------------------------------

def test_presets():
    full = M.ModelConfig.preset("full")
    assert (full.seq_len, full.d_model, full.n_layers, full.n_heads) == (2048, 1024, 4, 4)
    desk = M.ModelConfig.preset("desk")
    assert (desk.seq_len, desk.d_model, desk.n_layers, desk.n_heads, desk.n_gauss_features) == (128, 32, 2, 2, 32)
    assert (TINY.seq_len, TINY.d_model, TINY.n_heads, TINY.n_layers, TINY.n_gauss_features) == (32, 16, 2, 2, 8)


@pytest.mark.parametrize("bad", [dict(seq_len=30), dict(d_model=10, n_heads=4), dict(scales=(1, 2)),
                                 dict(gauss_sigma=0.0)])
def test_config_validation(bad):
    with pytest.raises(ParameterError):
        replace(TINY, **bad)


def test_config_round_trip():
    assert M.ModelConfig.from_dict(json.loads(json.dumps(TINY.to_dict()))) == TINY


# -- branch and forward ------------------------------------------------------------------

def test_encode_scale_matches_reference():
    params = M.init_params(TINY)
    x = np.random.default_rng(1).normal(size=(32, 8))
    out = M.encode_scale(T.Tensor(x), params.leaves(False), params, 1)
    assert out.shape == (TINY.d_model + TINY.n_gauss_features,)
    np.testing.assert_allclose(out.data, ref_branch(x, params.arrays, params.projections[1], TINY, 1),
                               rtol=0, atol=1e-12)


def test_encode_scale_zero_signal_zero_embedding():
    params = M.init_params(TINY)
    arrays = dict(params.arrays)
    arrays["scale1.embed.projection"] = np.zeros((8, 16))
    arrays["scale1.embed.bias"] = np.zeros(16)
    p = params.with_arrays(arrays)
    a = M.encode_scale(T.Tensor(np.zeros((32, 8))), p.leaves(False), p, 1).data
    b = M.encode_scale(T.Tensor(np.zeros((32, 8))), p.leaves(False), p, 1).data
    assert a.tobytes() == b.tobytes()
    transformer_part = L.encoder_stack(T.Tensor(L.positional_encoding(32, 16)),
                                       M._blocks(p.leaves(False), TINY, 1), TINY.ln_eps).data.mean(axis=0)
    np.testing.assert_allclose(a[:16], transformer_part, rtol=0, atol=1e-15)


def test_forward_matches_reference():
    params = M.init_params(TINY)
    x = np.random.default_rng(2).normal(size=(32, 8))
    out = M.forward(x, params, "train")
    assert out.shape == (1, 2)
    np.testing.assert_allclose(out.data[0], ref_forward(x, params), rtol=0, atol=1e-12)


def test_fused_width():
    params = M.init_params(TINY)
    fused = M.fused_features(np.zeros((32, 8)), params)
    assert fused.shape == (3 * (16 + 8),)


def test_zero_head_bias_pass_through_and_clamp():
    params = M.init_params(TINY)
    arrays = {k: (np.zeros_like(v) if k.startswith("head.") else v) for k, v in params.arrays.items()}
    arrays["head.fc2.bias"] = np.array([5.0, 5.0])
    x = np.random.default_rng(3).normal(size=(32, 8))
    assert M.forward(x, params.with_arrays(arrays), "infer") == M.Prediction(5.0, 5.0)
    arrays["head.fc2.bias"] = np.array([12.3, -0.2])
    p = params.with_arrays(arrays)
    np.testing.assert_array_equal(M.forward(x, p, "train").data, [[12.3, -0.2]])
    assert M.forward(x, p, "infer") == M.Prediction(9.5, 0.5)
    np.testing.assert_array_equal(M.predict([x, x], p), [[9.5, 0.5], [9.5, 0.5]])


def test_forward_rejects_bad_shapes():
    params = M.init_params(TINY)
    with pytest.raises(DimensionError):
        M.forward(np.zeros((31, 8)), params)
    with pytest.raises(DimensionError):
        M.forward(np.zeros((32, 7)), params)
    with pytest.raises(ParameterError):
        M.forward(np.zeros((32, 8)), params, mode="eval")


def test_forward_deterministic():
    x = np.random.default_rng(4).normal(size=(32, 8))
    a = M.forward(x, M.init_params(TINY), "train").data
    b = M.forward(x, M.init_params(TINY), "train").data
    assert a.tobytes() == b.tobytes()


def test_output_always_two_components():
    for cfg in (TINY, replace(TINY, head_widths=(5,)), replace(TINY, head_widths=(), n_layers=0)):
        assert M.forward(np.ones((32, 8)), M.init_params(cfg)).shape == (1, 2)


def test_gaussian_projection_is_frozen():
    params = M.init_params(TINY)
    before = {s: p.weights.copy() for s, p in params.projections.items()}
    _, grads = batch_loss(params, [np.ones((32, 8))], np.array([[5.0, 5.0]]))
    assert set(grads) == set(params.arrays)
    assert not any("gauss" in k for k in grads)
    assert all(np.array_equal(before[s], p.weights) for s, p in params.projections.items())


def test_end_to_end_gradient_check():
    result = grad_check(TINY, eps=1e-5, tolerance=1e-4, seed=0)
    assert result.passed, result.errors
    assert result.errors["scale1.gauss.projection"] is None
    assert result.checked_entries > 0


def test_grad_check_rejects_zero_eps():
    with pytest.raises(ParameterError):
        grad_check(TINY, eps=0.0)


# -- checkpoints -----------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    params = M.init_params(TINY)
    arrays = {k: v + np.random.default_rng(5).normal(size=v.shape) * 1e-3 for k, v in params.arrays.items()}
    params = params.with_arrays(arrays)
    path = M.save_checkpoint(tmp_path / "ck.json", params)
    loaded = M.load_checkpoint(path)
    assert loaded == params
    for k in params.arrays:
        assert loaded.arrays[k].tobytes() == params.arrays[k].tobytes()
    doc = json.loads(path.read_text())
    assert doc["version"] == M.CHECKPOINT_VERSION and len(doc["checksum"]) == 64
    M.save_checkpoint(tmp_path / "ck2.json", loaded)
    assert (tmp_path / "ck2.json").read_bytes() == path.read_bytes()


def test_checkpoint_tamper_detected(tmp_path):
    path = M.save_checkpoint(tmp_path / "ck.json", M.init_params(TINY))
    doc = json.loads(path.read_text())
    doc["parameters"][0]["data"][0] += 1e-9
    path.write_text(json.dumps(doc))
    with pytest.raises(InputError, match="checksum"):
        M.load_checkpoint(path)


def test_checkpoint_rejects_other_files(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "nope"}')
    with pytest.raises(InputError):
        M.load_checkpoint(tmp_path / "x.json")

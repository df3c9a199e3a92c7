import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polarsfp.errors import ConfigurationError, DimensionError
from polarsfp.nn import ModelConfig, build_model, cosine_loss_grad, load_checkpoint, save_checkpoint
from polarsfp.nn.gradcheck import check_model, numeric_grad, rel_error
from polarsfp.nn.layers import L2Normalize, TransformerBlock


def _unit(rng, shape):
    g = rng.standard_normal(shape)
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def tiny():
    return build_model(ModelConfig(width=1 / 16, attention_blocks=1, input_size=16))


def test_channel_plan():
    assert ModelConfig(width=1).channels == (64, 128, 256, 512, 512)
    assert ModelConfig(width=0.125).channels == (8, 16, 32, 64, 64)
    assert ModelConfig(width=1 / 16).channels == (4, 8, 16, 32, 32)
    assert ModelConfig(width=1).heads == 8
    assert ModelConfig(width=1 / 128).heads == 4


def test_full_width_bottleneck_shape():
    m = build_model(ModelConfig(width=1, attention_blocks=0, input_size=512))
    # shape arithmetic only: run the encoder on one 512x512 sample
    x = np.zeros((1, 512, 512, 11), np.float32)
    h = m.inc.forward(x)
    for down in m.downs:
        h = down.forward(h)
    assert h.shape == (1, 32, 32, 512)


def test_toy_bottleneck_and_attention_shapes(rng):
    m = build_model(ModelConfig(width=1 / 8, attention_blocks=1))
    h = m.inc.forward(rng.standard_normal((1, 64, 64, 11)).astype(np.float32))
    for down in m.downs:
        h = down.forward(h)
    assert h.shape == (1, 4, 4, 64)
    seq = h.reshape(1, 16, 64)
    assert m.blocks[0].forward(seq).shape == (1, 16, 64)


def test_forward_shape_and_unit_norm(tiny, rng):
    y = tiny.forward(rng.standard_normal((2, 11, 16, 32)))
    assert y.shape == (2, 3, 16, 32)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-6)


@settings(max_examples=5, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_shape_contract(hm, wm, seed):
    rng = np.random.default_rng(seed)
    m = build_model(ModelConfig(width=1 / 32, attention_blocks=1, seed=seed))
    y = m.forward(rng.standard_normal((1, 11, 16 * hm, 16 * wm)), train=bool(seed % 2))
    assert y.shape == (1, 3, 16 * hm, 16 * wm)
    np.testing.assert_allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-6)


def test_float32_end_to_end(rng):
    m = build_model(ModelConfig(width=1 / 32, attention_blocks=1))
    x = rng.standard_normal((1, 11, 16, 16)).astype(np.float32)
    y = m.forward(x, train=True)
    assert y.dtype == np.float32
    m.zero_grad()
    assert m.backward(np.ones_like(y)).dtype == np.float32
    assert all(p.grad.dtype == np.float32 for p in m.parameters().values())
    assert all(bn.running_var.dtype == np.float32 for bn in m.batchnorms().values())


def test_zero_output_weights_finite(rng):
    m = build_model(ModelConfig(width=1 / 32, attention_blocks=0))
    m.outc.params["weight"].data[:] = 0
    y = m.forward(rng.standard_normal((1, 11, 16, 16)))
    assert np.isfinite(y).all()
    np.testing.assert_array_equal(y, np.broadcast_to([[[0.0]], [[0.0]], [[1.0]]], y.shape))


def test_input_errors(tiny):
    with pytest.raises(DimensionError):
        tiny.forward(np.zeros((1, 11, 24, 16)))
    with pytest.raises(DimensionError):
        tiny.forward(np.zeros((1, 4, 16, 16)))


def test_config_errors():
    with pytest.raises(ConfigurationError):
        ModelConfig(width=1 / 8, heads=3)
    with pytest.raises(ConfigurationError):
        ModelConfig(input_size=40)
    with pytest.raises(ConfigurationError):
        ModelConfig(attention_blocks=3)
    with pytest.raises(ConfigurationError):
        ModelConfig(width=0)
    with pytest.raises(ConfigurationError):
        ModelConfig(norms={"down": "group"})
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"width": 0.5, "depth": 3})


def test_no_attention_blocks(rng):
    m = build_model(ModelConfig(width=1 / 32, attention_blocks=0))
    assert not any(name.startswith("block") for name in m.parameters())
    assert m.forward(rng.standard_normal((1, 11, 16, 16))).shape == (1, 3, 16, 16)


def test_attention_permutation_equivariance(rng):
    block = TransformerBlock(16, 4, 64, rng, np.float64)
    x = rng.standard_normal((2, 9, 16))
    perm = rng.permutation(9)
    np.testing.assert_allclose(block.forward(x[:, perm]), block.forward(x)[:, perm], atol=1e-12)
    # a position-dependent signal (what the viewing encoding supplies) breaks it
    pos = rng.standard_normal((1, 9, 16))
    out = block.forward(x[:, perm] + pos)
    assert np.abs(out - block.forward(x + pos)[:, perm]).max() > 1e-3


def test_cosine_loss_gradient_fd(rng):
    pred = _unit(rng, (2, 3, 4, 4))
    gt = _unit(rng, (2, 3, 4, 4))
    mask = rng.random((2, 4, 4)) > 0.3
    loss, g = cosine_loss_grad(pred, gt, mask)
    num = numeric_grad(lambda: cosine_loss_grad(pred, gt, mask)[0], pred)
    assert rel_error(g, num) < 1e-8
    assert 0 <= loss <= 2


def test_cosine_loss_tangential_at_optimum(rng):
    # through the normalization the gradient is -(I - n n^T) gt / |y|, which vanishes at pred == gt
    y = rng.standard_normal((2, 4, 4, 3)) * 2
    gt_nhwc = rng.standard_normal((2, 4, 4, 3))
    gt_nhwc /= np.linalg.norm(gt_nhwc, axis=-1, keepdims=True)
    mask = np.ones((2, 4, 4), bool)
    norm = L2Normalize()

    def loss():
        n = norm.forward(y).transpose(0, 3, 1, 2)
        return cosine_loss_grad(n, gt_nhwc.transpose(0, 3, 1, 2), mask)[0]

    n = norm.forward(y)
    _, g = cosine_loss_grad(n.transpose(0, 3, 1, 2), gt_nhwc.transpose(0, 3, 1, 2), mask)
    dy = norm.backward(g.transpose(0, 2, 3, 1))
    r = np.linalg.norm(y, axis=-1, keepdims=True)
    tangential = -(gt_nhwc - n * np.sum(n * gt_nhwc, axis=-1, keepdims=True)) / r / mask.sum()
    np.testing.assert_allclose(dy, tangential, atol=1e-12)
    assert rel_error(dy, numeric_grad(loss, y)) < 1e-7

    y = gt_nhwc * 3.0
    n = norm.forward(y)
    loss0, g = cosine_loss_grad(n.transpose(0, 3, 1, 2), gt_nhwc.transpose(0, 3, 1, 2), mask)
    assert loss0 == pytest.approx(0.0, abs=1e-12)
    # the eps offset moves n off gt by ~eps/|y|
    assert np.abs(norm.backward(g.transpose(0, 2, 3, 1))).max() < 1e-9
    assert np.abs(numeric_grad(loss, y)).max() < 1e-9


def test_cosine_loss_empty_mask():
    with pytest.raises(ConfigurationError):
        cosine_loss_grad(np.zeros((1, 3, 2, 2)), np.zeros((1, 3, 2, 2)), np.zeros((1, 2, 2), bool))


def test_doubling_loss_doubles_gradients(rng):
    m = build_model(ModelConfig(width=1 / 32, attention_blocks=1), np.float64)
    x = rng.standard_normal((2, 11, 16, 16))
    gt = _unit(rng, (2, 3, 16, 16))
    mask = np.ones((2, 16, 16), bool)
    grads = []
    for scale in (1.0, 2.0):
        m.zero_grad()
        _, g = cosine_loss_grad(m.forward(x, train=True), gt, mask)
        m.backward(scale * g)
        grads.append({k: p.grad.copy() for k, p in m.parameters().items()})
    for k in grads[0]:
        np.testing.assert_allclose(grads[1][k], 2 * grads[0][k], rtol=1e-12, atol=1e-300)


def test_full_model_gradients(rng):
    m = build_model(ModelConfig(width=1 / 16, attention_blocks=1, input_size=16), np.float64)
    # generic operating point: jittered params, output bias keeps |y| away from the 1/|y| curvature
    for name, p in m.parameters().items():
        p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
    m.outc.params["bias"].data = np.array([0.0, 0.0, 2.0])
    x = rng.standard_normal((2, 11, 16, 16))
    gt = _unit(rng, (2, 3, 16, 16))
    mask = rng.random((2, 16, 16)) > 0.2
    errors = check_model(m, x, gt, mask, rng)
    assert set(errors) == set(m.parameters())
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-5, f"{worst}: {errors[worst]:.2e}"


def test_checkpoint_roundtrip(tmp_path, rng):
    m = build_model(ModelConfig(width=1 / 32, attention_blocks=1, seed=3))
    x = rng.standard_normal((2, 11, 16, 16)).astype(np.float32)
    m.forward(x, train=True)  # populate BatchNorm running stats
    save_checkpoint(m, tmp_path, step=7, extra={"note": "x"})
    loaded, manifest = load_checkpoint(tmp_path)
    assert manifest["step"] == 7 and manifest["extra"] == {"note": "x"}
    for k, p in m.parameters().items():
        np.testing.assert_array_equal(loaded.parameters()[k].data, p.data)
    np.testing.assert_array_equal(loaded.forward(x), m.forward(x))
    names = [t["name"] for t in json.loads((tmp_path / "manifest.json").read_text())["tensors"]]
    assert any(n.endswith("running_var") for n in names)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)
    m = build_model(ModelConfig(width=1 / 32, attention_blocks=0))
    save_checkpoint(m, tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["config"]["width"] = 1 / 16
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(DimensionError):
        load_checkpoint(tmp_path)

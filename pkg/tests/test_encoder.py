import numpy as np
import pytest

import oracles
from simattn.autodiff import ShapeError, Tensor
from simattn.encoder import EncoderConfig, ModelParams, encode, encode_batch, forward, init_params, param_shapes

TINY = EncoderConfig(input_hw=8, conv_channels=(2, 3), embed_dim=4)
# oracle output for the hand-set weights below, frozen from tests/oracles.py
TINY_EMBEDDING = [-0.6580862869166916, -0.14915558903198198, 0.5782883962189606, 0.45853852622350816]
TINY_FMAP_SUM = 3.3237708730320943


def hand_set(cfg):
    out = {}
    for i, (name, shape) in enumerate(param_shapes(cfg).items()):
        k = np.arange(int(np.prod(shape)), dtype=float)
        out[name] = (np.sin(1.3 * k + i) * 0.5).reshape(shape)
    return out


def hand_image():
    return (np.cos(np.arange(64) * 0.7) * 0.5 + 0.5).reshape(8, 8, 1)


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(embed_dim=1)
    with pytest.raises(ValueError):
        EncoderConfig(conv_channels=())
    with pytest.raises(ValueError):
        EncoderConfig(conv_channels=(4, 4), attention_layer=2)
    with pytest.raises(ValueError):
        EncoderConfig(input_hw=12, conv_channels=(4, 4, 4))
    assert EncoderConfig.from_dict(TINY.to_dict()) == TINY


def test_init_params_deterministic_and_bounded():
    a, b, c = init_params(TINY, 1), init_params(TINY, 1), init_params(TINY, 2)
    for name in a.names():
        assert a[name].data.tobytes() == b[name].data.tobytes()
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())
    for name, t in a.items():
        if name.startswith("conv") and name.endswith("weight"):
            fan_in = np.prod(t.shape[:-1])
            assert np.abs(t.data).max() <= np.sqrt(6 / fan_in)
    assert len(set(a.names())) == len(a)


def test_default_shape_contract():
    cfg = EncoderConfig()
    params = init_params(cfg, 0)
    a, f = encode(params, np.random.default_rng(0).uniform(size=(64, 64, 1)))
    assert a.shape == (8, 8, 32)
    assert f.shape == (64,)
    assert np.linalg.norm(f.data) == pytest.approx(1.0, abs=1e-12)


def test_matches_plain_loop_forward():
    weights = hand_set(TINY)
    params = ModelParams(TINY, {k: Tensor(v) for k, v in weights.items()})
    a, f = encode(params, hand_image())
    fmap, emb = oracles.encoder_forward(hand_image().tolist(), {k: v.tolist() for k, v in weights.items()}, 2, 1)
    np.testing.assert_allclose(f.data, emb, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.data, fmap, rtol=0, atol=1e-12)
    np.testing.assert_allclose(f.data, TINY_EMBEDDING, rtol=0, atol=1e-12)
    assert a.data.sum() == pytest.approx(TINY_FMAP_SUM, abs=1e-12)


def test_identical_images_identical_outputs():
    params = init_params(TINY, 3)
    x = np.random.default_rng(1).uniform(size=(8, 8, 1))
    (a1, f1), (a2, f2) = encode(params, x), encode(params, x.copy())
    assert np.array_equal(a1.data, a2.data) and np.array_equal(f1.data, f2.data)


def test_encode_batch_contract():
    params = init_params(TINY, 4)
    xs = np.random.default_rng(2).uniform(size=(3, 8, 8, 1))
    (a0, f0), = encode_batch(params, xs[:1])
    ea, ef = encode(params, xs[0])
    np.testing.assert_allclose(a0.data, ea.data, rtol=0, atol=1e-15)
    np.testing.assert_allclose(f0.data, ef.data, rtol=0, atol=1e-15)
    outs = encode_batch(params, xs)
    perm = encode_batch(params, xs[[2, 0, 1]])
    for i, j in enumerate([2, 0, 1]):
        np.testing.assert_allclose(perm[i][1].data, outs[j][1].data, rtol=0, atol=1e-15)
    for _, f in outs:
        assert np.linalg.norm(f.data) == pytest.approx(1.0, abs=1e-12)


def test_attention_layer_selects_block():
    cfg = EncoderConfig(input_hw=8, conv_channels=(2, 3), embed_dim=4, attention_layer=0)
    a, _ = forward(init_params(cfg, 0), np.zeros((2, 8, 8, 1)))
    assert a.shape == (2, 8, 8, 2)


def test_wrong_image_shape():
    with pytest.raises(ShapeError):
        encode(init_params(TINY, 0), np.zeros((16, 16, 1)))

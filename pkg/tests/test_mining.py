import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from simattn import autodiff as ad
from simattn.autodiff import ShapeError, Tensor
from simattn.encoder import EncoderConfig, init_params
from simattn.gradcheck import check_param_coords
from simattn.mining import (
    MaskingConfig,
    minmax_normalize,
    mining_forward,
    mining_loss,
    mining_loss_pair,
    mining_loss_quadruplet,
    mining_loss_triplet,
    soft_mask,
)

SIG5 = 0.0066929
TINY = EncoderConfig(input_hw=8, conv_channels=(2, 3), embed_dim=4)


def unit(rng, d, n):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_masking_config_validation():
    with pytest.raises(ValueError):
        MaskingConfig(alpha_slope=0)
    with pytest.raises(ValueError):
        MaskingConfig(beta_threshold=1.0)


def test_soft_mask_closed_forms():
    x = np.random.default_rng(0).uniform(size=(4, 5, 3))
    raw = MaskingConfig(normalize_before_mask=False)
    np.testing.assert_array_equal(soft_mask(x, np.full((4, 5), 0.5), raw).data, 0.5 * x)
    np.testing.assert_allclose(soft_mask(x, np.zeros((4, 5)), raw).data, (1 - SIG5) * x, rtol=0, atol=1e-6)
    np.testing.assert_allclose(soft_mask(x, np.ones((4, 5)), raw).data, SIG5 * x, rtol=0, atol=1e-6)


def test_soft_mask_normalizes_each_map():
    x = np.ones((2, 2, 2, 1))
    m = np.array([[[0.0, 2.0], [4.0, 4.0]], [[3.0, 3.0], [3.0, 3.0]]])
    out = soft_mask(x, m).data[..., 0]
    np.testing.assert_allclose(out[0], 1 - 1 / (1 + np.exp(-10 * (np.array([[0, 0.5], [1, 1]]) - 0.5))),
                               rtol=0, atol=1e-15)
    # a constant map normalises to zero and keeps (1 - sigmoid(-5)) of the image
    np.testing.assert_allclose(out[1], np.full((2, 2), 1 - SIG5), rtol=0, atol=1e-6)
    with pytest.raises(ShapeError):
        soft_mask(np.ones((3, 3, 1)), np.ones((2, 3)))


def test_minmax_normalize_range():
    m = minmax_normalize(np.random.default_rng(1).normal(size=(3, 4, 4))).data
    assert np.allclose(m.min(axis=(1, 2)), 0) and np.allclose(m.max(axis=(1, 2)), 1)


def test_mining_loss_examples():
    assert mining_loss_triplet([1.0, 0.0], [1.0, 0.0], [0.0, 1.0]).item() == pytest.approx(math.sqrt(2), abs=1e-12)
    assert mining_loss_triplet([1.0, 0.0], [0.0, 1.0], [0.0, -1.0]).item() == pytest.approx(0.0, abs=1e-15)
    f = np.array([0.6, 0.8])
    assert mining_loss_pair(f, f).item() == 0.0
    assert mining_loss_pair([1.0, 0.0], [0.0, 1.0]).item() == pytest.approx(-math.sqrt(2), abs=1e-12)
    quad = mining_loss_quadruplet([1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0]).item()
    assert quad == pytest.approx(2 * math.sqrt(2), abs=1e-12)


def test_pair_loss_decreases_as_pair_separates():
    thetas = np.linspace(0, np.pi, 25)
    values = [mining_loss_pair([1.0, 0.0], [math.cos(t), math.sin(t)]).item() for t in thetas]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_quadruplet_equal_negatives_doubles_triplet():
    rng = np.random.default_rng(2)
    for _ in range(20):
        fa, fp, fn = unit(rng, 6, 3)
        assert mining_loss_quadruplet(fa, fp, fn, fn).item() == pytest.approx(
            2 * mining_loss_triplet(fa, fp, fn).item(), abs=1e-15)


def test_mining_losses_match_oracles():
    rng = np.random.default_rng(3)
    for _ in range(50):
        fa, fp, fn1, fn2 = unit(rng, 8, 4)
        assert abs(mining_loss_triplet(fa, fp, fn1).item() - oracles.mining_triplet(fa, fp, fn1)) < 1e-12
        assert abs(mining_loss_pair(fa, fp).item() - oracles.mining_pair(fa, fp)) < 1e-12
        assert abs(mining_loss_quadruplet(fa, fp, fn1, fn2).item()
                   - oracles.mining_quadruplet(fa, fp, fn1, fn2)) < 1e-12


def test_batched_mining_loss_is_row_mean():
    rng = np.random.default_rng(4)
    fa, fp, fn = (unit(rng, 5, 3) for _ in range(3))
    want = np.mean([oracles.mining_triplet(fa[i], fp[i], fn[i]) for i in range(3)])
    assert mining_loss_triplet(fa, fp, fn).item() == pytest.approx(want, abs=1e-12)


def test_siamese_batch_mines_positive_pairs_only():
    rng = np.random.default_rng(5)
    f1, f2 = unit(rng, 4, 3), unit(rng, 4, 3)
    same = np.array([True, False, True])
    want = np.mean([oracles.mining_pair(f1[i], f2[i]) for i in (0, 2)])
    assert mining_loss("siamese", [f1, f2], same).item() == pytest.approx(want, abs=1e-12)
    assert mining_loss("siamese", [f1, f2], np.zeros(3, dtype=bool)).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mining_loss_signs(seed):
    rng = np.random.default_rng(seed)
    fa, fp, fn1, fn2 = unit(rng, 5, 4)
    assert mining_loss_triplet(fa, fp, fn1).item() >= 0
    assert mining_loss_quadruplet(fa, fp, fn1, fn2).item() >= 0
    assert mining_loss_pair(fa, fp).item() <= 0


def test_mining_forward_signs_and_arity():
    params = init_params(TINY, 0)
    rng = np.random.default_rng(6)
    imgs = rng.uniform(size=(4, 2, 8, 8, 1))
    assert mining_forward(params, imgs[:3], "triplet").item() >= 0
    assert mining_forward(params, imgs[:2], "siamese", same_class=np.array([True, False])).item() <= 0
    assert mining_forward(params, imgs[:2, 0], "siamese", same_class=False).item() <= 0
    assert mining_forward(params, imgs, "quadruplet").item() >= 0
    with pytest.raises(ValueError):
        mining_forward(params, imgs[:2], "triplet")
    with pytest.raises(ValueError):
        mining_forward(params, imgs[:2], "siamese")


def test_mining_forward_second_order_gradient():
    cfg = EncoderConfig(input_hw=16, conv_channels=(3, 4), embed_dim=6)
    params = init_params(cfg, 1)
    roles = list(np.random.default_rng(7).uniform(size=(3, 1, 16, 16, 1)))
    mcfg = MaskingConfig(detach_attention=False)
    loss = lambda p: mining_forward(p, roles, "triplet", mcfg)
    err = check_param_coords(loss, params, [("conv0.weight", 4), ("conv1.weight", 17)])
    assert err < 1e-3


def test_detach_attention_drops_the_second_order_path():
    params = init_params(TINY, 2)
    roles = list(np.random.default_rng(8).uniform(size=(3, 1, 8, 8, 1)))
    live = ad.backward(mining_forward(params, roles, "triplet", MaskingConfig(detach_attention=False)))
    cut = ad.backward(mining_forward(params, roles, "triplet", MaskingConfig(detach_attention=True)))
    w = params["conv0.weight"]
    assert not np.allclose(live[w].data, cut[w].data)

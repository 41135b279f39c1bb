"""Finite-difference verification of every differentiable op and of the score pipeline."""

from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .attention import sample_score, triplet_weight
from .autodiff import Tensor, finite_diff_check
from .encoder import EncoderConfig, ModelParams, forward, init_params
from .mining import MaskingConfig, mining_forward, soft_mask

FIRST_ORDER_TOL = 1e-4
SECOND_ORDER_TOL = 1e-3
EPS = 1e-5


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(gap, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _projected(fn, rng, out_shape):
    """Turn a tensor-valued fn into a scalar by a fixed random projection."""
    weights = rng.normal(size=out_shape)
    return lambda t: ad.sum_(ad.mul(fn(t), weights))


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (scalar fn, point) for one random draw."""
    cases = {}
    x = _away_from_zero(rng, (6,))
    cases["relu"] = (_projected(ad.relu, rng, (6,)), x)
    cases["sigmoid"] = (_projected(ad.sigmoid, rng, (6,)), rng.normal(size=6) * 2)
    cases["abs"] = (_projected(ad.abs_, rng, (6,)), _away_from_zero(rng, (6,)))
    other = rng.normal(size=6)
    cases["add"] = (_projected(lambda t: ad.elementwise("add", t, other), rng, (6,)), rng.normal(size=6))
    cases["sub"] = (_projected(lambda t: ad.elementwise("sub", other, t), rng, (6,)), rng.normal(size=6))
    cases["mul"] = (_projected(lambda t: ad.elementwise("mul", t, ad.sigmoid(t)), rng, (6,)), rng.normal(size=6))
    cases["dot"] = (lambda t: ad.dot(t, ad.sigmoid(t)), rng.normal(size=8))
    cases["euclidean_norm"] = (lambda t: ad.euclidean_norm(t), rng.normal(size=8))
    cases["l2_normalize"] = (_projected(ad.l2_normalize, rng, (8,)), rng.normal(size=8))
    kern = rng.normal(size=(3, 3, 2, 3))
    cases["conv2d_input"] = (_projected(lambda t: ad.conv2d(t, kern, 1, 1), rng, (5, 5, 3)),
                             rng.normal(size=(5, 5, 2)))
    img = rng.normal(size=(5, 5, 2))
    cases["conv2d_kernels"] = (_projected(lambda k: ad.conv2d(img, k, 2, 1), rng, (3, 3, 3)),
                               rng.normal(size=(3, 3, 2, 3)))
    cases["global_average_pool"] = (_projected(ad.global_average_pool, rng, (3,)), rng.normal(size=(4, 4, 3)))
    cases["max_pool2"] = (_projected(ad.max_pool2, rng, (2, 2, 2)), rng.normal(size=(4, 4, 2)))
    cases["upsample_bilinear"] = (_projected(lambda t: ad.upsample_bilinear(t, 4, 4), rng, (4, 4)),
                                  rng.normal(size=(2, 2)))
    mat = rng.normal(size=(4, 3))
    cases["matmul"] = (_projected(lambda t: ad.matmul(t, mat), rng, (2, 3)), rng.normal(size=(2, 4)))
    cases["div"] = (_projected(lambda t: ad.div(ad.sigmoid(t), ad.add(ad.abs_(t), 1.0)), rng, (6,)),
                    _away_from_zero(rng, (6,)))
    cases["sqrt"] = (_projected(ad.sqrt, rng, (6,)), rng.uniform(0.2, 2.0, size=6))
    cases["maximum"] = (_projected(lambda t: ad.maximum(t, 0.5), rng, (6,)), 0.5 + _away_from_zero(rng, (6,)))
    # distinct values keep the extremum unique
    cases["amax"] = (_projected(lambda t: ad.amax(t, axis=-1), rng, (3,)), rng.permutation(12).reshape(3, 4) * 0.3)
    cases["amin"] = (_projected(lambda t: ad.amin(t, axis=-1), rng, (3,)), rng.permutation(12).reshape(3, 4) * 0.3)
    cases["sum_mean"] = (lambda t: ad.add(ad.sum_(ad.mul(ad.sum_(t, axis=0), ad.mean(t, axis=0))), 0.0),
                         rng.normal(size=(3, 4)))
    cases["reshape_transpose"] = (_projected(lambda t: ad.transpose(ad.reshape(t, (3, 4)), (1, 0)), rng, (4, 3)),
                                  rng.normal(size=12))
    cases["take_concat"] = (_projected(lambda t: ad.concat([ad.take(t, [2, 0]), ad.sigmoid(t)]), rng, (6, 2)),
                            rng.normal(size=(4, 2)))
    cases["broadcast_to"] = (_projected(lambda t: ad.broadcast_to(t, (3, 4)), rng, (3, 4)), rng.normal(size=4))
    canvas = rng.uniform(size=(6, 6, 2))
    cases["soft_mask"] = (lambda t: ad.sum_(soft_mask(canvas, t, MaskingConfig())), rng.uniform(size=(6, 6)))
    return cases


def tiny_encoder_config() -> EncoderConfig:
    return EncoderConfig(input_hw=8, input_channels=1, conv_channels=(2, 3), embed_dim=4)


def check_param_coords(loss_fn, params: ModelParams, coords, eps: float = EPS) -> float:
    """Max relative error of d loss / d param at the listed (name, flat index) coords."""
    loss = loss_fn(params)
    grads = ad.backward(loss)
    worst = 0.0
    for name, idx in coords:
        base = params[name].data

        def at(delta):
            arr = base.copy().reshape(-1)
            arr[idx] += delta
            tensors = dict(params.tensors)
            tensors[name] = Tensor(arr.reshape(base.shape), requires_grad=True)
            return loss_fn(params.replace(tensors)).item()

        numeric = (at(eps) - at(-eps)) / (2 * eps)
        f0, h = loss.item(), 10 * eps
        right, left = (at(h) - f0) / h, (f0 - at(-h)) / h
        jump = abs(right - left)
        if jump > 1e-2 * max(abs(right), abs(left), 1e-8):
            jump2 = abs((at(2 * h) - f0) / (2 * h) - (f0 - at(-2 * h)) / (2 * h))
            if jump2 < 1.5 * jump:
                continue
        analytic = grads[params[name]].data.reshape(-1)[idx] if params[name] in grads else 0.0
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def score_pipeline_error(rng: np.random.Generator) -> float:
    """Triplet anchor score through a tiny encoder, checked on every parameter."""
    cfg = tiny_encoder_config()
    params = init_params(cfg, int(rng.integers(2**31)))
    images = [rng.uniform(size=(1, 8, 8, 1)) for _ in range(3)]

    def score(p):
        _, f = forward(p, ad.concat([Tensor(x) for x in images]))
        fa, fp, fn = (ad.take(f, [i]) for i in range(3))
        return ad.sum_(sample_score(triplet_weight(fa, fp, fn), fa))

    coords = [(n, i) for n, t in params.items() for i in range(t.size)]
    return check_param_coords(score, params, coords)


def mining_second_order_error(rng: np.random.Generator, n_coords: int = 20, batch: int = 2,
                              config: EncoderConfig | None = None) -> float:
    """Gradient of the triplet mining loss (through attention) vs finite differences."""
    cfg = config or EncoderConfig(input_hw=16, input_channels=1, conv_channels=(3, 4), embed_dim=6)
    params = init_params(cfg, int(rng.integers(2**31)))
    hw = cfg.input_hw
    roles = [rng.uniform(size=(batch, hw, hw, 1)) for _ in range(3)]
    mcfg = MaskingConfig(detach_attention=False)

    def loss(p):
        return mining_forward(p, roles, "triplet", mcfg)

    names = params.names()
    coords = []
    for _ in range(n_coords):
        name = names[rng.integers(len(names))]
        coords.append((name, int(rng.integers(params[name].size))))
    return check_param_coords(loss, params, coords)


def run_gradcheck(n_points: int = 10, seed: int = 0, second_order: bool = True) -> dict:
    """Max relative error per op over ``n_points`` random draws, plus pipeline checks."""
    rng = np.random.Generator(np.random.PCG64(seed))
    started = time.perf_counter()
    errors = {}
    for _ in range(n_points):
        for name, (fn, point) in op_cases(rng).items():
            errors[name] = max(errors.get(name, 0.0), float(finite_diff_check(fn, point, EPS)))
    errors["sample_score_pipeline"] = float(max(score_pipeline_error(rng) for _ in range(n_points)))
    report = {
        "first_order": errors,
        "max_first_order": max(errors.values()),
        "first_order_tol": FIRST_ORDER_TOL,
    }
    if second_order:
        report["second_order_mining"] = float(mining_second_order_error(rng))
        report["second_order_tol"] = SECOND_ORDER_TOL
    report["passed"] = bool(report["max_first_order"] < FIRST_ORDER_TOL and (
        not second_order or report["second_order_mining"] < SECOND_ORDER_TOL))
    report["seconds"] = time.perf_counter() - started
    return report

"""Finite-difference gradient audit suites (64-bit).

Each suite is a list of named checks; a check builds a scalar function of
float64 inputs and reports the worst relative error between tape and
central-difference gradients. Scalar objectives are formed as a weighted
sum of the op output with fixed random weights so that no output element's
gradient is structurally zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import grad_check
from .losses import cls_loss, heatmap_loss, offset_loss
from .network import ModelConfig, build_model, forward_anchor_free, ModelState
from .nn import ConvParams, MlpParams, NormParams, conv3d, dwconv3d, layer_norm, linear, mlp_block, trilinear_upsample
from .tensor import Tensor
from .vbra import (AttentionParams, BlockParams, VbraConfig, fine_attention, gather_tokens, multihead_attention,
                   partition_regions, region_descriptors, unpartition_regions, vbra_attention, vbra_block,
                   coarse_route)

SUITES = ("ops", "vbra", "losses", "end2end")
TOLERANCE = {"ops": 1e-5, "vbra": 1e-5, "losses": 1e-6, "end2end": 1e-3}


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tolerance)


def _weighted(out: Tensor, seed: int = 99) -> Tensor:
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.reduce_sum(out * Tensor(w))


def _rand(rng, *shape, scale=1.0):
    return scale * rng.standard_normal(shape)


def _away_from_zero(rng, *shape):
    """Entries with |v| in [0.2, 1.2] so kinks (relu, abs) are not straddled."""
    return rng.choice([-1.0, 1.0], size=shape) * (0.2 + rng.random(shape))


def op_checks(rng) -> dict[str, tuple[Callable, list]]:
    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    distinct = rng.permutation(12).reshape(3, 4) * 0.3 + 0.05 * rng.random((3, 4))
    mask = np.ones((3, 4), dtype=bool)
    mask[1, 2] = mask[2, 0] = False
    idx = np.array([2, 0, 2, 1])
    x5 = _rand(rng, 4, 4, 4, 3)
    conv_w, conv_b = _rand(rng, 3, 3, 3, 3, 2, scale=0.3), _rand(rng, 2)
    dw_w, dw_b = _rand(rng, 3, 3, 3, 3, scale=0.3), _rand(rng, 3)
    return {
        "add": (lambda x, y: _weighted(x + y), [a, b]),
        "sub": (lambda x, y: _weighted(x - y), [a, b]),
        "mul": (lambda x, y: _weighted(x * y), [a, b]),
        "scalar_mul_div": (lambda x: _weighted(x * 2.5 / 1.7 + 0.3), [a]),
        "matmul": (lambda x, y: _weighted(x @ y), [_rand(rng, 2, 3, 4), _rand(rng, 2, 4, 5)]),
        "permute": (lambda x: _weighted(T.permute(x, (2, 0, 1))), [_rand(rng, 2, 3, 4)]),
        "transpose": (lambda x: _weighted(T.transpose(x)), [a]),
        "reshape": (lambda x: _weighted(T.reshape(x, (2, -1))), [a]),
        "concat": (lambda x, y: _weighted(T.concat([x, y], axis=1)), [a, b]),
        "slice": (lambda x: _weighted(x[1:, ::2]), [a]),
        "gather": (lambda x: _weighted(T.gather(x, idx, axis=0)), [a]),
        "broadcast_to": (lambda x: _weighted(T.broadcast_to(x, (3, 2, 4))), [_rand(rng, 3, 1, 4)]),
        "reduce_sum": (lambda x: _weighted(T.reduce_sum(x, axis=1)), [a]),
        "reduce_mean": (lambda x: _weighted(T.reduce_mean(x, axis=0, keepdims=True)), [a]),
        "reduce_max": (lambda x: _weighted(T.reduce_max(x, axis=1)), [distinct]),
        "exp": (lambda x: _weighted(T.exp(x)), [a]),
        "log": (lambda x: _weighted(T.log(x)), [0.5 + rng.random((3, 4))]),
        "clip": (lambda x: _weighted(T.clip(x, -0.5, 0.5)), [_away_from_zero(rng, 3, 4) * 0.45 + 0.6 * rng.choice([-1, 0, 1], (3, 4))]),
        "relu": (lambda x: _weighted(T.relu(x)), [_away_from_zero(rng, 3, 4)]),
        "gelu": (lambda x: _weighted(T.gelu(x)), [a]),
        "sigmoid": (lambda x: _weighted(T.sigmoid(x)), [a]),
        "softmax": (lambda x: _weighted(T.softmax(x, axis=-1)), [a]),
        "softmax_masked": (lambda x: _weighted(T.softmax(x, axis=-1, mask=mask)), [a]),
        "linear": (lambda x, w, c: _weighted(linear(x, w, c)), [_rand(rng, 5, 3), _rand(rng, 3, 4), _rand(rng, 4)]),
        "conv3d": (lambda x, w, c: _weighted(conv3d(x, ConvParams(w, c))), [x5, conv_w, conv_b]),
        "conv3d_stride2": (lambda x, w, c: _weighted(conv3d(x, ConvParams(w, c, (2, 2, 2)))), [x5, conv_w, conv_b]),
        "conv3d_1x1x1": (lambda x, w: _weighted(conv3d(x, ConvParams(w))), [x5, _rand(rng, 1, 1, 1, 3, 2)]),
        "dwconv3d": (lambda x, w, c: _weighted(dwconv3d(x, ConvParams(w, c))), [x5, dw_w, dw_b]),
        "layer_norm": (lambda x, g, c: _weighted(layer_norm(x, NormParams(g, c))),
                       [_rand(rng, 4, 5), 1.0 + _rand(rng, 5, scale=0.2), _rand(rng, 5)]),
        "mlp_block": (lambda x, w1, b1, w2, b2: _weighted(mlp_block(x, MlpParams(w1, b1, w2, b2))),
                      [_rand(rng, 4, 3), _rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6, 3), _rand(rng, 3)]),
        "trilinear_upsample": (lambda x: _weighted(trilinear_upsample(x, 2)), [_rand(rng, 2, 3, 2, 2)]),
    }


def _attn_inputs(rng, c):
    return [_rand(rng, c, c, scale=c ** -0.5) for _ in range(4)]


def vbra_checks(rng) -> dict[str, tuple[Callable, list]]:
    c, heads = 4, 2
    cfg = VbraConfig((2, 2, 2), 2, heads, c)
    pad_cfg = VbraConfig((3, 3, 2), 2, heads, c, padding_policy="zero_pad_mask")
    x = _rand(rng, 4, 4, 2, c)

    def routed_parts(q, k, v):
        qt, part = partition_regions(q, cfg)
        kt, _ = partition_regions(k, cfg)
        vt, _ = partition_regions(v, cfg)
        qp, kp = region_descriptors(qt, kt, part)
        routing = coarse_route(qp.data, kp.data, cfg.top_k, cfg.head_dim, partition=part)
        ks, vs, m = gather_tokens(kt, vt, routing)
        return qt, ks, vs, m, part

    def fine(q, k, v, wo):
        qt, ks, vs, m, part = routed_parts(q, k, v)
        return _weighted(fine_attention(qt, ks, vs, wo, heads, part, m))

    def block(x, *w):
        dw = ConvParams(w[0], w[1])
        p = BlockParams(dw, NormParams(w[2], w[3]), AttentionParams(*w[4:8]),
                        NormParams(w[8], w[9]), MlpParams(*w[10:14]))
        return _weighted(vbra_block(x, p, cfg))

    block_inputs = [x, _rand(rng, 3, 3, 3, c, scale=0.3), _rand(rng, c), 1 + _rand(rng, c, scale=0.1), _rand(rng, c),
                    *_attn_inputs(rng, c), 1 + _rand(rng, c, scale=0.1), _rand(rng, c),
                    _rand(rng, c, 2 * c, scale=0.5), _rand(rng, 2 * c), _rand(rng, 2 * c, c, scale=0.5), _rand(rng, c)]
    return {
        "partition_roundtrip": (lambda x: _weighted(unpartition_regions(*partition_regions(x, cfg))), [x]),
        "partition_padded": (lambda x: _weighted(partition_regions(x, pad_cfg)[0]), [x]),
        "region_descriptors": (lambda q, k: _weighted(T.concat(list(region_descriptors(
            *(partition_regions(t, cfg)[0] for t in (q, k)))), axis=-1)), [x, _rand(rng, 4, 4, 2, c)]),
        "gather_tokens": (lambda k, v: _weighted(T.concat(list(routed_parts(Tensor(x), k, v)[1:3]), axis=-1)),
                          [_rand(rng, 4, 4, 2, c), _rand(rng, 4, 4, 2, c)]),
        "multihead_attention": (lambda q, k, v: _weighted(multihead_attention(q, k, v, heads)),
                                [_rand(rng, 3, 5, c), _rand(rng, 3, 6, c), _rand(rng, 3, 6, c)]),
        "fine_attention": (fine, [x, _rand(rng, 4, 4, 2, c), _rand(rng, 4, 4, 2, c), _rand(rng, c, c)]),
        "vbra_attention": (lambda x, *w: _weighted(vbra_attention(x, AttentionParams(*w), cfg)[0]),
                           [x, *_attn_inputs(rng, c)]),
        "vbra_attention_padded": (lambda x, *w: _weighted(vbra_attention(x, AttentionParams(*w), pad_cfg)[0]),
                                  [x, *_attn_inputs(rng, c)]),
        "vbra_block": (block, block_inputs),
    }


def loss_checks(rng) -> dict[str, tuple[Callable, list]]:
    target = rng.random((4, 4, 2, 3))
    present = np.array([True, False, True])
    labels = (rng.random((2, 2, 1, 6)) < 0.4).astype(float)
    labels[0, 0, 0, 0] = 1.0
    positive = labels > 0.5
    return {
        "heatmap_loss": (lambda z: heatmap_loss(T.sigmoid(z), target, present), [_rand(rng, 4, 4, 2, 3)]),
        "offset_loss": (lambda t: offset_loss(t, _rand(np.random.default_rng(5), 2, 2, 1, 18), positive),
                        [_rand(rng, 2, 2, 1, 18)]),
        "cls_loss": (lambda z: cls_loss(T.sigmoid(z), labels), [_rand(rng, 2, 2, 1, 6)]),
    }


END2END_CONFIG = ModelConfig(input_dims=(8, 8, 8), landmarks=2, channels=(4, 8, 8), heads=2,
                             region_size=(2, 2, 2), top_k=2, variant="anchor_free", dtype="float64")


def end2end_check(rng, config: ModelConfig = END2END_CONFIG, seed: int = 0, per_param: int = 2):
    """Whole anchor-free model at 64-bit; a few random entries of every parameter."""
    model = build_model(config, seed)
    keys = list(model.params)
    volume = rng.random(config.input_dims)

    def fn(*params):
        state = ModelState(config, seed, dict(zip(keys, params)))
        return _weighted(forward_anchor_free(state, volume), seed=7)

    return fn, [model.params[k].data for k in keys], per_param


def run_suite(suite: str, seed: int = 0, corrupt: bool = False, eps: float = 1e-6) -> list[CheckResult]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")
    rng = np.random.default_rng(seed)
    tol = TOLERANCE[suite]
    if suite == "end2end":
        fn, inputs, per_param = end2end_check(rng)
        err = grad_check(fn, inputs, eps=eps, max_checks=per_param, seed=seed, corrupt=corrupt)
        return [CheckResult(suite, "anchor_free_model_8x8x8", err, tol)]
    checks = {"ops": op_checks, "vbra": vbra_checks, "losses": loss_checks}[suite](rng)
    return [CheckResult(suite, name, grad_check(fn, inputs, eps=eps, seed=seed, corrupt=corrupt), tol)
            for name, (fn, inputs) in checks.items()]

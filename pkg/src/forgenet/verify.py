"""Gradient verification sweeps: per-op checks against central differences
and the end-to-end check of the total training loss through a miniature
model configuration."""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, finite_diff_check
from .model import ModelConfig, TwoStreamModel
from .supervision import loss_cls, loss_loc, loss_total

MICRO_CONFIG = ModelConfig(
    image_size=16,
    grid=2,
    entry_widths=(3, 4, 5),
    branch_width=5,
    branch_depth=3,
    embed_dim=3,
    bilinear_m=4,
    bilinear_n=6,
    seed=0,
)


def _signed_away_from_zero(rng, shape):
    return rng.uniform(0.2, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def check_op_gradients(seed: int = 0, h: float = 1e-5) -> Dict[str, float]:
    """Max relative gradient error per differentiable op on random inputs."""
    rng = np.random.default_rng(seed)
    c, hh, ww = 3, 3, 4
    results: Dict[str, float] = {}

    def run(name, x, make_op):
        probe = make_op(Tensor(np.asarray(x, dtype=np.float64)))
        weight = Tensor(rng.normal(size=probe.shape))
        fn = lambda t: ad.sum_all(ad.mul(make_op(t), weight))
        results[name] = finite_diff_check(fn, Tensor(np.asarray(x, dtype=np.float64)), h)

    run("relu", _signed_away_from_zero(rng, (c, hh, ww)), ad.relu)
    run("tanh", rng.normal(size=(c, hh)), ad.tanh)
    run("sigmoid", rng.normal(size=(c, hh)), ad.sigmoid)
    other = Tensor(rng.normal(size=(1, hh, ww)))
    run("add", rng.normal(size=(c, hh, ww)), lambda t: ad.add(t, other))
    full = Tensor(rng.normal(size=(c, hh, ww)))
    run("mul", rng.normal(size=(1, hh, ww)), lambda t: ad.mul(t, full))
    run("scale", rng.normal(size=(c, hh)), lambda t: ad.scale(t, 0.37))
    m_right = Tensor(rng.normal(size=(c, ww)))
    run("matmul", rng.normal(size=(hh, c)), lambda t: ad.matmul(t, m_right))
    run("softmax_rows", rng.normal(size=(hh, ww)), ad.softmax_rows)
    cos_other = Tensor(_signed_away_from_zero(rng, (c, hh, ww)))
    run(
        "cosine_per_position",
        _signed_away_from_zero(rng, (c, hh, ww)),
        lambda t: ad.cosine_per_position(t, cos_other),
    )
    run("avg_pool", rng.normal(size=(c, 2 * hh, 2 * ww)), lambda t: ad.avg_pool(t, hh, ww))
    cat_other = Tensor(rng.normal(size=(2, hh, ww)))
    run(
        "concat_channels",
        rng.normal(size=(c, hh, ww)),
        lambda t: ad.concat_channels([t, cat_other]),
    )
    run("sum_channels", rng.normal(size=(c, hh, ww)), ad.sum_channels)
    run("upsample_nearest", rng.normal(size=(c, hh, ww)), lambda t: ad.upsample_nearest(t, 2))
    run(
        "space_to_channels",
        rng.normal(size=(c, 2 * hh, 2 * ww)),
        lambda t: ad.space_to_channels(t, 2),
    )
    conv_w = Tensor(rng.normal(size=(2, c, 3, 3)))
    conv_b = Tensor(rng.normal(size=2))
    run(
        "conv2d",
        rng.normal(size=(c, hh + 2, ww + 2)),
        lambda t: ad.conv2d(t, conv_w, conv_b, stride=1, padding=1),
    )
    conv_x = Tensor(rng.normal(size=(c, hh + 2, ww + 2)))
    run(
        "conv2d_weight",
        rng.normal(size=(2, c, 3, 3)),
        lambda t: ad.conv2d(conv_x, t, conv_b, stride=2, padding=1),
    )
    targets = rng.integers(0, 2, size=(1, hh, ww)).astype(float)
    fn = lambda t: ad.bce_with_logits_sum(t, targets)
    results["bce_with_logits"] = finite_diff_check(
        fn, Tensor(rng.normal(size=(1, hh, ww))), h
    )
    return results


def check_model_gradients(
    config: Optional[ModelConfig] = None,
    seed: int = 0,
    h: float = 1e-5,
) -> Tuple[float, Dict[str, float]]:
    """Finite-difference the total loss against every model parameter.

    Uses the miniature config by default so the sweep stays cheap, and
    re-randomizes every parameter to a generic fan-scaled point first.
    The production init zeroes the heads and damps the attention values,
    which makes whole gradient groups vanish or shrink below the noise
    floor of central differences; the check is about the correctness of
    the backward rules, so it runs where every path carries signal.
    The targets are fixed labels, keeping the loss smooth in the
    parameters.
    """
    cfg = config or MICRO_CONFIG
    model = TwoStreamModel(cfg)
    rng = np.random.default_rng(seed)
    for _, p in model.store.items():
        fan = int(np.prod(p.shape[1:])) if p.data.ndim > 1 else 1
        p.data = rng.normal(0.0, 1.0 / np.sqrt(fan), p.shape)

    image = rng.uniform(0.0, 1.0, size=(3, cfg.image_size, cfg.image_size))
    label = 1
    patch_targets = rng.integers(0, 2, size=(cfg.grid, cfg.grid)).astype(float)

    def loss_with(name: str, t: Tensor) -> Tensor:
        fw = model.forward(image, overrides={name: t})
        return loss_total(loss_cls(fw.cls_logit, label), loss_loc(fw.loc_logits, patch_targets))

    per_param: Dict[str, float] = {}
    for name, p in model.store.items():
        fn = lambda t: loss_with(name, t)
        per_param[name] = finite_diff_check(fn, Tensor(p.data.copy()), h)
    return max(per_param.values()), per_param

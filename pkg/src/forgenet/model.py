"""Two-stream forgery detector: shared entry stem pair, a localization
branch and a classification branch, plus the fusion blocks that tie them
together.

The entry flow downsamples by 2 per stage, so the branch resolution
equals the patch grid when image_size == grid * 2**len(entry_widths).
All blocks are plain conv + ReLU; there is no normalization anywhere,
which keeps the whole model exactly differentiable and seed-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .optim import ParamStore
from .srm import apply_srm, build_bank

STREAM_CHOICES = ("both", "rgb", "srm")
FUSION_CHOICES = ("cross", "sum")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; everything downstream derives from these."""

    image_size: int = 64
    grid: int = 8
    entry_widths: tuple = (8, 16, 32)
    branch_width: int = 32
    branch_depth: int = 3
    embed_dim: int = 16
    bilinear_m: int = 64
    bilinear_n: int = 128
    streams: str = "both"
    fusion: str = "cross"
    use_attention: bool = True
    use_multiscale: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.streams not in STREAM_CHOICES:
            raise ValueError(f"streams must be one of {STREAM_CHOICES}")
        if self.fusion not in FUSION_CHOICES:
            raise ValueError(f"fusion must be one of {FUSION_CHOICES}")
        if len(self.entry_widths) < 1 or any(w <= 0 for w in self.entry_widths):
            raise ValueError("entry_widths must be positive")
        if self.branch_width <= 0 or self.branch_depth < 1:
            raise ValueError("branch sizes must be positive")
        if self.embed_dim <= 0 or self.bilinear_m <= 0 or self.bilinear_n <= 0:
            raise ValueError("embedding sizes must be positive")
        expected = self.grid * 2 ** len(self.entry_widths)
        if self.image_size != expected:
            raise ValueError(
                f"image_size {self.image_size} incompatible with grid {self.grid} "
                f"and {len(self.entry_widths)} stride-2 stages (needs {expected})"
            )

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "grid": self.grid,
            "entry_widths": list(self.entry_widths),
            "branch_width": self.branch_width,
            "branch_depth": self.branch_depth,
            "embed_dim": self.embed_dim,
            "bilinear_m": self.bilinear_m,
            "bilinear_n": self.bilinear_n,
            "streams": self.streams,
            "fusion": self.fusion,
            "use_attention": self.use_attention,
            "use_multiscale": self.use_multiscale,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["entry_widths"] = tuple(d.get("entry_widths", (8, 16, 32)))
        return ModelConfig(**d)


class ForwardResult(NamedTuple):
    cls_logit: Tensor
    loc_logits: Tensor
    taps: Dict[str, Tensor]


# ---------------------------------------------------------------------------
# blocks


def cross_stream_enhance(f_rgb: Tensor, f_noise: Tensor):
    """One parameter-free cross-enhancement step between the two streams.

    The per-position cosine map of the two features reweights each
    stream's contribution to the other; swapping the inputs swaps the
    outputs exactly.
    """
    if f_rgb.shape != f_noise.shape:
        raise ValueError(f"stream shapes differ: {f_rgb.shape} vs {f_noise.shape}")
    corr = ad.cosine_per_position(f_rgb, f_noise)
    out_rgb = ad.relu(ad.add(f_rgb, ad.mul(corr, f_noise)))
    out_noise = ad.relu(ad.add(f_noise, ad.mul(corr, f_rgb)))
    return out_rgb, out_noise


def fuse_streams(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"stream shapes differ: {a.shape} vs {b.shape}")
    return ad.add(a, b)


def location_attention(loc_feat: Tensor, query_w: Tensor) -> Tensor:
    """Patch-to-patch attention from a [c,h,w] localization feature.

    Row i holds a softmax over the inner products of embedded position i
    with every position j, so each row sums to one.
    """
    c, h, w = loc_feat.shape
    q = ad.conv2d(loc_feat, query_w)
    qf = ad.reshape(q, (q.shape[0], h * w))
    logits = ad.matmul(ad.transpose(qf), qf)
    return ad.softmax_rows(logits)


def apply_attention(cls_feat: Tensor, att: Tensor, value_w: Tensor) -> Tensor:
    """Mix transformed classification features through an attention matrix,
    residual-added so the output keeps the input's shape."""
    c, h, w = cls_feat.shape
    if att.shape != (h * w, h * w):
        raise ValueError(f"attention side {att.shape} does not match {h}x{w} positions")
    v = ad.conv2d(cls_feat, value_w)
    vf = ad.reshape(v, (v.shape[0], h * w))
    mixed = ad.reshape(ad.matmul(vf, att), (v.shape[0], h, w))
    return ad.relu(ad.add(mixed, cls_feat))


def patch_consistency(
    intermediate: Tensor,
    anchor_feat: Tensor,
    embed_scale_w: Tensor,
    embed_anchor_w: Tensor,
) -> Tensor:
    """Per-element consistency of a higher-resolution feature against the
    grid-resolution feature vector of the patch it falls in.

    The intermediate is zero-padded (bottom/right) to a multiple of the
    grid, both operands are embedded by 1x1 convolutions, and each of the
    s*s elements of a patch yields tanh(<embeddings>/dim). The s*s values
    become channels at the patch's grid cell, so the result is
    [s*s, grid_h, grid_w]. Padded slots participate like any other
    element; with bias-free embeddings they contribute tanh(0) = 0.
    """
    gc, gh, gw = anchor_feat.shape
    ic, ih, iw = intermediate.shape
    if ih < gh or iw < gw:
        raise ValueError(
            f"intermediate {ih}x{iw} smaller than the {gh}x{gw} patch grid"
        )
    s = max(math.ceil(ih / gh), math.ceil(iw / gw))
    padded = intermediate
    pad_h, pad_w = gh * s - ih, gw * s - iw
    if pad_h or pad_w:
        padded = ad.pad_bottom_right(intermediate, pad_h, pad_w)
    embed_dim = embed_scale_w.shape[0]
    e = ad.conv2d(padded, embed_scale_w)
    a = ad.conv2d(anchor_feat, embed_anchor_w)
    a_up = ad.upsample_nearest(a, s)
    cons = ad.tanh(ad.scale(ad.sum_channels(ad.mul(e, a_up)), 1.0 / embed_dim))
    return ad.space_to_channels(cons, s)


def bilinear_fuse(
    cls_feat: Tensor,
    shallow: Sequence[Tensor],
    u_w: Tensor,
    v_w: Tensor,
    p_w: Tensor,
    bias_map: Tensor,
) -> Tensor:
    """Low-rank bilinear pooling of pooled shallow features against the
    classification feature, applied independently at every position.

    With an empty shallow list the classification feature stands in for
    the pooled stack (degenerate single-input mode).
    """
    c, h, w = cls_feat.shape
    if shallow:
        pooled = [ad.avg_pool(t, h, w) for t in shallow]
        stack = pooled[0] if len(pooled) == 1 else ad.concat_channels(pooled)
    else:
        stack = cls_feat
    left = ad.conv2d(stack, u_w)
    right = ad.conv2d(cls_feat, v_w)
    return ad.add(ad.conv2d(ad.mul(left, right), p_w), bias_map)


# ---------------------------------------------------------------------------
# parameter construction


def _param_specs(cfg: ModelConfig) -> List[tuple]:
    """(name, shape, init) triples in creation order; init is one of
    conv / proj / zero."""
    specs: List[tuple] = []
    widths = cfg.entry_widths
    n_stages = len(widths)

    def stem(prefix):
        prev = 3
        for i, width in enumerate(widths):
            specs.append((f"{prefix}{i}.w", (width, prev, 3, 3), "conv"))
            specs.append((f"{prefix}{i}.b", (width,), "zero"))
            prev = width

    if cfg.streams in ("both", "rgb"):
        stem("rgb_stem")
    if cfg.streams in ("both", "srm"):
        stem("srm_stem")

    bw = cfg.branch_width
    prev = widths[-1]
    for i in range(cfg.branch_depth):
        for branch in ("loc", "cls"):
            specs.append((f"{branch}{i}.w", (bw, prev, 3, 3), "conv"))
            specs.append((f"{branch}{i}.b", (bw,), "zero"))
        if cfg.use_attention:
            specs.append((f"attn{i}.query.w", (bw, bw, 1, 1), "proj"))
            # small value transform: the attention residual starts near
            # identity instead of compounding feature magnitudes per stage
            specs.append((f"attn{i}.value.w", (bw, bw, 1, 1), "proj_small"))
        prev = bw

    if cfg.use_multiscale:
        specs.append(("patch_embed.anchor.w", (cfg.embed_dim, bw, 1, 1), "proj"))
        for i in range(n_stages - 1):
            specs.append(
                (f"patch_embed.scale{i}.w", (cfg.embed_dim, widths[i], 1, 1), "proj")
            )
        head_in = bw + sum(
            (2 ** (n_stages - 1 - i)) ** 2 for i in range(n_stages - 1)
        )
        specs.append(("loc_head.w", (1, head_in, 1, 1), "zero"))
        specs.append(("loc_head.b", (1,), "zero"))

        c_star = bw
        c_s = sum(widths[:-1]) if n_stages > 1 else c_star
        specs.append(("cls_fuse.block.w", (c_star, bw, 3, 3), "conv"))
        specs.append(("cls_fuse.block.b", (c_star,), "zero"))
        specs.append(("cls_fuse.u.w", (cfg.bilinear_m, c_s, 1, 1), "proj"))
        specs.append(("cls_fuse.v.w", (cfg.bilinear_m, c_star, 1, 1), "proj"))
        specs.append(("cls_fuse.p.w", (cfg.bilinear_n, cfg.bilinear_m, 1, 1), "proj_small"))
        specs.append(("cls_fuse.bias_map", (cfg.bilinear_n, cfg.grid, cfg.grid), "zero"))
        head_width = cfg.bilinear_n
    else:
        specs.append(("loc_head.w", (1, bw, 1, 1), "zero"))
        specs.append(("loc_head.b", (1,), "zero"))
        head_width = bw

    # zero heads: the first update moves the head off a clean half-way
    # start (logit exactly 0) before gradients reach the trunk
    specs.append(("cls_head.w", (1, head_width), "zero"))
    specs.append(("cls_head.b", (1, 1), "zero"))
    return specs


def _init_array(rng: np.random.Generator, shape, kind: str) -> np.ndarray:
    if kind == "zero":
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:]))
    if kind == "conv":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
    if kind == "proj":
        return rng.normal(0.0, math.sqrt(1.0 / fan_in), shape)
    if kind == "proj_small":
        return rng.normal(0.0, 0.1 * math.sqrt(1.0 / fan_in), shape)
    raise ValueError(f"unknown init kind {kind!r}")


class TwoStreamModel:
    """Parameter set plus config; `forward` maps one [3,H,W] image in [0,1]
    to a classification logit, a [1,grid,grid] localization logit map and
    the named intermediate features."""

    def __init__(self, config: ModelConfig, store: Optional[ParamStore] = None):
        self.config = config
        self._bank = build_bank()
        specs = _param_specs(config)
        if store is None:
            rng = np.random.default_rng(config.seed)
            store = ParamStore()
            for name, shape, kind in specs:
                store.create(name, _init_array(rng, shape, kind))
        else:
            names = store.names()
            expected = [name for name, _, _ in specs]
            if names != expected:
                raise ValueError(
                    "parameter store does not match config: "
                    f"missing {sorted(set(expected) - set(names))}, "
                    f"unexpected {sorted(set(names) - set(expected))}"
                )
            for name, shape, _ in specs:
                if store[name].shape != tuple(shape):
                    raise ValueError(
                        f"parameter {name!r} has shape {store[name].shape}, "
                        f"expected {tuple(shape)}"
                    )
        self.store = store

    # -- forward -----------------------------------------------------------

    def forward(
        self,
        image: np.ndarray,
        overrides: Optional[dict] = None,
        srm_residual: Optional[np.ndarray] = None,
    ) -> ForwardResult:
        cfg = self.config
        img = np.asarray(image, dtype=np.float64)
        if img.shape != (3, cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected image of shape (3,{cfg.image_size},{cfg.image_size}), "
                f"got {img.shape}"
            )
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("image values must lie in [0,1]")
        if overrides:
            base = self.store
            store = {name: overrides.get(name, base[name]) for name in base.names()}
        else:
            store = self.store
        taps: Dict[str, Tensor] = {}

        use_rgb = cfg.streams in ("both", "rgb")
        use_srm = cfg.streams in ("both", "srm")
        r = Tensor(img) if use_rgb else None
        s = None
        if use_srm:
            # the residual frontend is fixed, so callers may pass a
            # precomputed residual to skip recomputing it every epoch
            if srm_residual is None:
                srm_residual = apply_srm(img, self._bank)
            s = Tensor(srm_residual)

        combined: List[Tensor] = []
        for i in range(len(cfg.entry_widths)):
            if use_rgb:
                r = ad.relu(
                    ad.conv2d(r, store[f"rgb_stem{i}.w"], store[f"rgb_stem{i}.b"],
                              stride=2, padding=1)
                )
            if use_srm:
                s = ad.relu(
                    ad.conv2d(s, store[f"srm_stem{i}.w"], store[f"srm_stem{i}.b"],
                              stride=2, padding=1)
                )
            if use_rgb and use_srm and cfg.fusion == "cross":
                r, s = cross_stream_enhance(r, s)
            if use_rgb and use_srm:
                stage = fuse_streams(r, s)
            else:
                stage = r if use_rgb else s
            taps[f"entry{i}"] = stage
            combined.append(stage)

        fused = combined[-1]
        taps["fused"] = fused
        shallow = combined[:-1]

        loc = fused
        cls = fused
        for i in range(cfg.branch_depth):
            loc = ad.relu(
                ad.conv2d(loc, store[f"loc{i}.w"], store[f"loc{i}.b"], padding=1)
            )
            cls = ad.relu(
                ad.conv2d(cls, store[f"cls{i}.w"], store[f"cls{i}.b"], padding=1)
            )
            if cfg.use_attention:
                att = location_attention(loc, store[f"attn{i}.query.w"])
                cls = apply_attention(cls, att, store[f"attn{i}.value.w"])
            taps[f"loc{i}"] = loc
            taps[f"cls{i}"] = cls
        taps["loc_final"] = loc
        taps["cls_final"] = cls

        if cfg.use_multiscale:
            maps = [
                patch_consistency(
                    t, loc, store[f"patch_embed.scale{i}.w"], store["patch_embed.anchor.w"]
                )
                for i, t in enumerate(shallow)
            ]
            loc_in = ad.concat_channels(maps + [loc])
        else:
            loc_in = loc
        loc_logits = ad.conv2d(loc_in, store["loc_head.w"], store["loc_head.b"])

        if cfg.use_multiscale:
            block = ad.relu(
                ad.conv2d(cls, store["cls_fuse.block.w"], store["cls_fuse.block.b"],
                          padding=1)
            )
            head_feat = bilinear_fuse(
                block,
                shallow,
                store["cls_fuse.u.w"],
                store["cls_fuse.v.w"],
                store["cls_fuse.p.w"],
                store["cls_fuse.bias_map"],
            )
            taps["cls_fused"] = head_feat
        else:
            head_feat = cls

        pooled = ad.reshape(ad.avg_pool(head_feat, 1, 1), (head_feat.shape[0], 1))
        logit = ad.reshape(
            ad.add(ad.matmul(store["cls_head.w"], pooled), store["cls_head.b"]), ()
        )
        return ForwardResult(logit, loc_logits, taps)

    def param_specs(self) -> List[tuple]:
        return _param_specs(self.config)

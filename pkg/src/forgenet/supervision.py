"""Patch-level supervision: ground-truth patch labels from masks, pseudo
labels from batch anchors, and the classification/localization losses.

Pseudo-labeling never touches the gradient tape: it consumes detached
feature arrays, compares each position of a fake sample against running
real/fake anchor vectors by cosine similarity, and emits a binary map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

REGION_CHOICES = ("nose", "mouth", "eyes", "inner-face")

COSINE_EPS = 1e-8


@dataclass
class PatchLabelMap:
    """Binary patch labels with their provenance: derived from a pixel
    mask, pseudo-labeled, or the fixed all-zero map of a real sample."""

    values: np.ndarray
    provenance: str  # "mask" | "pseudo" | "real"

    def __post_init__(self):
        v = np.asarray(self.values)
        if not np.isin(v, (0, 1)).all():
            raise ValueError("patch labels must be exactly 0 or 1")
        if self.provenance not in ("mask", "pseudo", "real"):
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.values = v.astype(np.uint8)


@dataclass(frozen=True)
class PatchRect:
    """Inclusive rectangle of grid cells [row0..row1] x [col0..col1]."""

    row0: int
    col0: int
    row1: int
    col1: int

    def __post_init__(self):
        if self.row1 < self.row0 or self.col1 < self.col0:
            raise ValueError("empty patch rectangle")

    def cell_mask(self, grid_h: int, grid_w: int) -> np.ndarray:
        m = np.zeros((grid_h, grid_w), dtype=bool)
        m[self.row0 : self.row1 + 1, self.col0 : self.col1 + 1] = True
        return m


@dataclass
class AnchorState:
    """EMA anchors for real features and for fake reference-region features.

    The anchors are plain arrays, deliberately outside the autodiff
    graph, so no gradient can reach them.
    """

    momentum: float = 0.9
    real: Optional[np.ndarray] = None
    fake: Optional[np.ndarray] = None

    def _fold(self, current: Optional[np.ndarray], batch: np.ndarray) -> np.ndarray:
        if current is None:
            return batch.copy()
        return self.momentum * current + (1.0 - self.momentum) * batch

    def update_real(self, batch_mean: np.ndarray) -> None:
        self.real = self._fold(self.real, np.asarray(batch_mean, dtype=np.float64))

    def update_fake(self, batch_mean: np.ndarray) -> None:
        self.fake = self._fold(self.fake, np.asarray(batch_mean, dtype=np.float64))


# ---------------------------------------------------------------------------
# reference regions

# Landmark order used throughout: left eye, right eye, nose, left mouth
# corner, right mouth corner; coordinates are (x, y) pixels.
EYE_L, EYE_R, NOSE, MOUTH_L, MOUTH_R = range(5)

# Box half-extent as a multiple of the inter-eye distance.
_REGION_HALF = 0.75
_EYE_MARGIN = 0.375


def reference_rect(
    landmarks: np.ndarray,
    grid: int,
    image_size: int,
    region: str = "nose",
) -> PatchRect:
    """Grid-cell rectangle covering the chosen facial reference region.

    The nose (and mouth) box is a square of half-extent 1.5x half the
    inter-eye distance around the region center; eyes and inner-face are
    landmark bounding boxes (the eye box padded by a fraction of the
    inter-eye distance). The box is clipped to the image and always
    covers at least the cell containing its center.
    """
    if region not in REGION_CHOICES:
        raise ValueError(f"region must be one of {REGION_CHOICES}")
    pts = np.asarray(landmarks, dtype=np.float64)
    if pts.shape != (5, 2):
        raise ValueError(f"expected 5 (x,y) landmarks, got shape {pts.shape}")
    d = float(np.hypot(*(pts[EYE_R] - pts[EYE_L])))

    if region == "nose":
        center = pts[NOSE]
        half = _REGION_HALF * d
        lo, hi = center - half, center + half
    elif region == "mouth":
        center = (pts[MOUTH_L] + pts[MOUTH_R]) / 2.0
        half = _REGION_HALF * d
        lo, hi = center - half, center + half
    elif region == "eyes":
        center = (pts[EYE_L] + pts[EYE_R]) / 2.0
        lo = np.minimum(pts[EYE_L], pts[EYE_R]) - _EYE_MARGIN * d
        hi = np.maximum(pts[EYE_L], pts[EYE_R]) + _EYE_MARGIN * d
    else:  # inner-face
        center = pts.mean(axis=0)
        lo = pts.min(axis=0)
        hi = pts.max(axis=0)

    if not (0 <= center[0] < image_size and 0 <= center[1] < image_size):
        raise ValueError(f"region center {center} lies outside the image")

    lo = np.clip(lo, 0.0, image_size - 1e-9)
    hi = np.clip(hi, 0.0, image_size - 1e-9)
    cell = image_size / grid
    col0, row0 = int(lo[0] // cell), int(lo[1] // cell)
    col1, row1 = int(hi[0] // cell), int(hi[1] // cell)
    # degenerate box: fall back to the single cell holding the center
    if col1 < col0 or row1 < row0:
        col0 = col1 = int(center[0] // cell)
        row0 = row1 = int(center[1] // cell)
    clip = lambda v: int(min(max(v, 0), grid - 1))
    return PatchRect(clip(row0), clip(col0), clip(row1), clip(col1))


# ---------------------------------------------------------------------------
# labels


def mask_to_patches(mask: np.ndarray, grid: int) -> PatchLabelMap:
    """Patch label map of a [H,W] binary mask: a patch is positive iff any
    of its pixels is set (zero-padding the mask if needed)."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("mask must be binary")
    h, w = m.shape
    sh, sw = math.ceil(h / grid), math.ceil(w / grid)
    padded = np.zeros((grid * sh, grid * sw), dtype=np.float64)
    padded[:h, :w] = m
    patches = padded.reshape(grid, sh, grid, sw).mean(axis=(1, 3))
    return PatchLabelMap((patches > 0).astype(np.uint8), "mask")


def _cosine_to_anchor(flat_feats: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Cosine of each column of [c, n] against a [c] vector."""
    dots = flat_feats.T @ anchor
    nf = np.sqrt((flat_feats * flat_feats).sum(axis=0))
    na = float(np.sqrt(anchor @ anchor))
    return dots / (nf * na + COSINE_EPS)


def pseudo_patch_labels(
    features: np.ndarray,
    labels: Sequence[int],
    rects: Dict[int, PatchRect],
    anchors: AnchorState,
) -> List[PatchLabelMap]:
    """Pseudo patch labels for one batch from anchor cosine comparisons.

    `features` is the detached [B,c,gh,gw] localization feature batch.
    Real samples contribute every spatial vector to the real anchor and
    always receive the all-zero map. Fake samples contribute the vectors
    inside their reference rectangle to the fake anchor; each of their
    positions is then labeled 0 when it is at least as close (by cosine)
    to the real anchor as to the fake one, and 1 otherwise.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 4:
        raise ValueError(f"expected [B,c,gh,gw] features, got shape {feats.shape}")
    b, c, gh, gw = feats.shape
    lab = np.asarray(labels)
    if lab.shape != (b,):
        raise ValueError("labels must align with the feature batch")
    real_idx = np.flatnonzero(lab == 0)
    fake_idx = np.flatnonzero(lab == 1)

    if fake_idx.size and real_idx.size == 0 and anchors.real is None:
        raise ValueError(
            "cannot pseudo-label fakes: batch has no real samples and the real "
            "anchor is uninitialized; fix the batch sampler to mix classes"
        )

    if real_idx.size:
        anchors.update_real(feats[real_idx].transpose(1, 0, 2, 3).reshape(c, -1).mean(axis=1))
    if fake_idx.size:
        cols = []
        for i in fake_idx:
            if i not in rects:
                raise ValueError(f"fake sample {i} has no reference rectangle")
            sel = rects[i].cell_mask(gh, gw)
            cols.append(feats[i][:, sel])
        anchors.update_fake(np.concatenate(cols, axis=1).mean(axis=1))

    out: List[PatchLabelMap] = []
    for i in range(b):
        if lab[i] == 0:
            out.append(PatchLabelMap(np.zeros((gh, gw), dtype=np.uint8), "real"))
            continue
        flat = feats[i].reshape(c, gh * gw)
        sim_real = _cosine_to_anchor(flat, anchors.real)
        sim_fake = _cosine_to_anchor(flat, anchors.fake)
        m = (sim_real - sim_fake < 0).astype(np.uint8).reshape(gh, gw)
        out.append(PatchLabelMap(m, "pseudo"))
    return out


# ---------------------------------------------------------------------------
# losses


def write_patch_label_pgm(path, label_map: PatchLabelMap) -> None:
    """Dump a patch label map as an 8-bit PGM at grid resolution, 0/255."""
    from .formats import write_pgm

    write_pgm(path, (label_map.values * 255).astype(np.uint8))


def loss_cls(logit: Tensor, y: int) -> Tensor:
    """Binary cross-entropy of a single sigmoid logit, in stable form."""
    if logit.size != 1:
        raise ValueError(f"classification logit must be scalar, got {logit.shape}")
    return ad.bce_with_logits_sum(logit, float(y))


def loss_loc(loc_logits: Tensor, target) -> Tensor:
    """Sum over all patches of the per-patch binary cross-entropy."""
    values = target.values if isinstance(target, PatchLabelMap) else np.asarray(target)
    if loc_logits.shape != (1,) + values.shape:
        raise ValueError(
            f"logit map {loc_logits.shape} does not match labels {values.shape}"
        )
    return ad.bce_with_logits_sum(loc_logits, values[None].astype(np.float64))


def loss_total(l_cls: Tensor, l_loc: Tensor) -> Tensor:
    return ad.add(l_cls, l_loc)

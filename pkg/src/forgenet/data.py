"""Procedural pseudo-face corpus with exact forgery masks.

Every sample is deterministic in (spec, seed). A "video" is one
procedural identity rendered over a few frames with small jitter; fakes
splice donor texture into a region around facial landmarks using one of
three blending families:

    paste     hard rectangle, alpha in {0,1}
    feather   Gaussian-feathered alpha, wider than the seed rectangle
    gradient  distance-transform alpha ramp plus mild smoothing

The binary mask is exactly the set of pixels with blend alpha > 0.
Images are quantized to the 8-bit lattice (k/255) at every stage so the
uint8 on-disk form round-trips bit-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .formats import read_tnsr, write_tnsr

FAMILIES = ("paste", "feather", "gradient")

INDEX_VERSION = 1


@dataclass
class Sample:
    image: np.ndarray  # [3,H,W] float64 in [0,1], multiples of 1/255
    label: int  # 0 real, 1 fake
    mask: np.ndarray  # [H,W] uint8 in {0,1}
    landmarks: np.ndarray  # [5,2] (x, y) pixels: eyes, nose, mouth corners
    family: str  # one of FAMILIES or "none"
    video_id: int
    sample_id: str = ""

    def validate(self) -> None:
        h = self.image.shape[-1]
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"sample {self.sample_id}: bad image shape {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError(f"sample {self.sample_id}: image values outside [0,1]")
        if self.mask.shape != self.image.shape[1:]:
            raise ValueError(f"sample {self.sample_id}: mask/image shape mismatch")
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError(f"sample {self.sample_id}: mask is not binary")
        if self.label == 0 and self.mask.any():
            raise ValueError(f"sample {self.sample_id}: real sample with set mask pixels")
        if self.label == 1 and not self.mask.any():
            raise ValueError(f"sample {self.sample_id}: fake sample with empty mask")
        if (self.landmarks < 0).any() or (self.landmarks > h - 1).any():
            raise ValueError(f"sample {self.sample_id}: landmarks outside the image")


@dataclass(frozen=True)
class DatasetSpec:
    n_real: int = 0
    n_fake_per_family: Dict[str, int] = field(default_factory=dict)
    image_size: int = 64
    frames_per_video: int = 4
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if self.n_real < 0 or any(v < 0 for v in self.n_fake_per_family.values()):
            raise ValueError("sample counts must be non-negative")
        for fam in self.n_fake_per_family:
            if fam not in FAMILIES:
                raise ValueError(f"unknown family {fam!r}, expected one of {FAMILIES}")
        if self.image_size < 16 or self.frames_per_video < 1:
            raise ValueError("image_size must be >= 16 and frames_per_video >= 1")


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _lowfreq_field(rng: np.random.Generator, size: int, cells: int = 5) -> np.ndarray:
    coarse = rng.normal(size=(cells, cells))
    return ndimage.zoom(coarse, size / cells, order=1, mode="nearest")[:size, :size]


@dataclass
class _Identity:
    cx: float
    cy: float
    ax: float
    ay: float
    skin: np.ndarray
    bg: np.ndarray
    bg_field: np.ndarray
    grain: float
    eye_dx: float
    eye_dy: float
    nose_dy: float
    mouth_dx: float
    mouth_dy: float
    feature_dim: float


def _make_identity(spec: DatasetSpec, video_id: int) -> _Identity:
    rng = np.random.default_rng([spec.seed, 1, video_id])
    n = spec.image_size
    r0 = rng.uniform(0.55, 0.85)
    skin = np.array([r0, r0 - rng.uniform(0.05, 0.15), r0 - rng.uniform(0.15, 0.30)])
    ax = rng.uniform(0.24, 0.30) * n
    ay = rng.uniform(0.30, 0.38) * n
    return _Identity(
        cx=n / 2 + rng.uniform(-0.05, 0.05) * n,
        cy=n / 2 + rng.uniform(-0.05, 0.05) * n,
        ax=ax,
        ay=ay,
        skin=np.clip(skin, 0.15, 0.95),
        bg=rng.uniform(0.2, 0.7, size=3),
        bg_field=rng.uniform(0.05, 0.15) * _lowfreq_field(rng, n),
        grain=rng.uniform(0.01, 0.035),
        eye_dx=rng.uniform(0.40, 0.52) * ax,
        eye_dy=-rng.uniform(0.28, 0.36) * ay,
        nose_dy=rng.uniform(0.04, 0.12) * ay,
        mouth_dx=rng.uniform(0.30, 0.40) * ax,
        mouth_dy=rng.uniform(0.42, 0.54) * ay,
        feature_dim=rng.uniform(0.35, 0.55),
    )


def _render_frame(spec: DatasetSpec, ident: _Identity, video_id: int, frame: int) -> Sample:
    rng = np.random.default_rng([spec.seed, 2, video_id, frame])
    n = spec.image_size
    jx, jy = rng.uniform(-1.5, 1.5, size=2)
    cx, cy = ident.cx + jx, ident.cy + jy

    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = ident.bg[:, None, None] + ident.bg_field[None]
    img = img + rng.normal(0.0, 0.01, size=(3, n, n))

    rsq = ((xx - cx) / ident.ax) ** 2 + ((yy - cy) / ident.ay) ** 2
    face = rsq <= 1.0
    shade = 1.0 - 0.25 * rsq
    grain = rng.normal(0.0, ident.grain, size=(3, n, n))
    face_tex = ident.skin[:, None, None] * shade[None] + grain
    img = np.where(face[None], face_tex, img)

    landmarks = np.array(
        [
            [cx - ident.eye_dx, cy + ident.eye_dy],
            [cx + ident.eye_dx, cy + ident.eye_dy],
            [cx, cy + ident.nose_dy],
            [cx - ident.mouth_dx, cy + ident.mouth_dy],
            [cx + ident.mouth_dx, cy + ident.mouth_dy],
        ]
    )
    landmarks = np.clip(landmarks, 0.0, n - 1.0)

    def blob(center, rx, ry, factor):
        d = ((xx - center[0]) / rx) ** 2 + ((yy - center[1]) / ry) ** 2
        inside = d <= 1.0
        return np.where(inside[None], img * factor, img)

    er = 0.10 * ident.ax
    img = blob(landmarks[0], er, er * 0.8, ident.feature_dim)
    img = blob(landmarks[1], er, er * 0.8, ident.feature_dim)
    img = blob(landmarks[2], er * 0.7, er * 1.1, (1 + ident.feature_dim) / 2)
    mouth_c = (landmarks[3] + landmarks[4]) / 2
    img = blob(mouth_c, ident.mouth_dx, er * 0.7, ident.feature_dim * 1.2)

    return Sample(
        image=_quantize(img),
        label=0,
        mask=np.zeros((n, n), dtype=np.uint8),
        landmarks=landmarks,
        family="none",
        video_id=video_id,
    )


def gen_real(seed: int, size: int = 64) -> Sample:
    """One standalone pristine sample (its seed doubles as video id)."""
    spec = DatasetSpec(image_size=size, seed=seed)
    return _render_frame(spec, _make_identity(spec, seed), video_id=seed, frame=0)


# ---------------------------------------------------------------------------
# forgeries


def region_box(landmarks: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Binary rectangle around facial features, proportional to the
    inter-eye distance.

    The region always covers the nose (manipulations replace the inner
    face) and extends to the eyes and/or mouth about half the time.
    """
    pts = np.asarray(landmarks)
    d = float(np.hypot(*(pts[1] - pts[0])))
    extras = [[0, 1], [3, 4]]  # eyes, mouth
    members = [2]
    for group in extras:
        if rng.random() < 0.5:
            members = members + group
    members = np.asarray(members)
    sel = pts[members]
    margin = rng.uniform(0.45, 0.65) * d
    x0 = max(int(sel[:, 0].min() - margin), 0)
    x1 = min(int(sel[:, 0].max() + margin), size - 1)
    y0 = max(int(sel[:, 1].min() - margin), 0)
    y1 = min(int(sel[:, 1].max() + margin), size - 1)
    box = np.zeros((size, size), dtype=np.uint8)
    box[y0 : y1 + 1, x0 : x1 + 1] = 1
    return box


def blend_alpha(region: np.ndarray, family: str, inter_eye: float) -> np.ndarray:
    """Blend weights in [0,1] for a binary region under a forgery family.

    paste keeps the hard rectangle; feather blurs it outward (the support
    grows); gradient ramps from the region boundary to its center so the
    support equals the rectangle exactly.
    """
    r = np.asarray(region, dtype=np.float64)
    if family == "paste":
        return r
    if family == "feather":
        alpha = ndimage.gaussian_filter(r, sigma=inter_eye / 6.0)
        alpha[alpha < 0.02] = 0.0
        return np.clip(alpha, 0.0, 1.0)
    if family == "gradient":
        dist = ndimage.distance_transform_edt(r)
        top = dist.max()
        return dist / top if top > 0 else r
    raise ValueError(f"unknown family {family!r}, expected one of {FAMILIES}")


def forge(target: Sample, donor: Sample, family: str, seed: int) -> Sample:
    """Splice donor texture into a landmark region of the target.

    The donor content is lightly smoothed before blending: synthesized
    texture lacks the fine grain of a camera image, which is the
    high-frequency trace the residual stream keys on.
    """
    if target.label != 0 or donor.label != 0:
        raise ValueError("forge needs two real samples")
    if target.video_id == donor.video_id:
        raise ValueError("target and donor come from the same identity (degenerate forgery)")
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}, expected one of {FAMILIES}")
    rng = np.random.default_rng([seed, 3])
    size = target.image.shape[-1]
    region = region_box(target.landmarks, size, rng)
    d = float(np.hypot(*(target.landmarks[1] - target.landmarks[0])))
    alpha = blend_alpha(region, family, d)

    sigma = rng.uniform(0.6, 1.1)
    donor_tex = np.stack([ndimage.gaussian_filter(ch, sigma) for ch in donor.image])
    img = target.image * (1.0 - alpha[None]) + donor_tex * alpha[None]
    mask = (alpha > 0).astype(np.uint8)
    if family == "gradient":
        smoothed = np.stack([ndimage.gaussian_filter(ch, 0.6) for ch in img])
        img = np.where(mask[None].astype(bool), smoothed, img)

    return Sample(
        image=_quantize(img),
        label=1,
        mask=mask,
        landmarks=target.landmarks.copy(),
        family=family,
        video_id=target.video_id,
    )


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    contrast: float
    blur_sigma: float
    crop: Tuple[int, int, int]  # y0, x0, side


def _resize_bilinear(channel: np.ndarray, out: int) -> np.ndarray:
    n = channel.shape[0]
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    lo = np.clip(np.floor(src).astype(int), 0, n - 1)
    hi = np.clip(lo + 1, 0, n - 1)
    frac = np.clip(src - lo, 0.0, 1.0)
    rows = channel[lo][:, lo] * np.outer(1 - frac, 1 - frac)
    rows += channel[lo][:, hi] * np.outer(1 - frac, frac)
    rows += channel[hi][:, lo] * np.outer(frac, 1 - frac)
    rows += channel[hi][:, hi] * np.outer(frac, frac)
    return rows


def _resize_nearest(mask: np.ndarray, out: int) -> np.ndarray:
    n = mask.shape[0]
    idx = np.clip(((np.arange(out) + 0.5) * (n / out)).astype(int), 0, n - 1)
    return mask[idx][:, idx]


def augment_params(sample: Sample, seed: int) -> AugmentParams:
    """Draw one augmentation: flip, contrast in [0.8,1.2], blur sigma in
    [0,1], and a random crop keeping at least 80% of the area (never
    cropping away every forged pixel)."""
    rng = np.random.default_rng([seed, 4])
    size = sample.image.shape[-1]
    flip = bool(rng.random() < 0.5)
    contrast = float(rng.uniform(0.8, 1.2))
    blur = float(rng.uniform(0.0, 1.0))
    min_side = math.ceil(size * math.sqrt(0.8))
    side = int(rng.integers(min_side, size + 1))
    mask = sample.mask[:, ::-1] if flip else sample.mask
    y0 = x0 = 0
    for _ in range(32):
        y0 = int(rng.integers(0, size - side + 1))
        x0 = int(rng.integers(0, size - side + 1))
        if sample.label == 0 or mask[y0 : y0 + side, x0 : x0 + side].any():
            break
    else:
        ys, xs = np.nonzero(mask)
        y0 = int(np.clip(ys.mean() - side / 2, 0, size - side))
        x0 = int(np.clip(xs.mean() - side / 2, 0, size - side))
    return AugmentParams(flip, contrast, blur, (y0, x0, side))


def apply_augment(sample: Sample, params: AugmentParams) -> Sample:
    size = sample.image.shape[-1]
    img = sample.image.copy()
    mask = sample.mask.copy()
    pts = sample.landmarks.copy()

    if params.flip:
        img = img[:, :, ::-1]
        mask = mask[:, ::-1]
        pts[:, 0] = size - 1 - pts[:, 0]
        pts = pts[[1, 0, 2, 4, 3]]  # keep left/right semantics

    img = np.clip(0.5 + (img - 0.5) * params.contrast, 0.0, 1.0)
    if params.blur_sigma > 0.05:
        img = np.stack([ndimage.gaussian_filter(ch, params.blur_sigma) for ch in img])

    y0, x0, side = params.crop
    if side != size or y0 or x0:
        img = img[:, y0 : y0 + side, x0 : x0 + side]
        mask = mask[y0 : y0 + side, x0 : x0 + side]
        img = np.stack([_resize_bilinear(ch, size) for ch in img])
        mask = _resize_nearest(mask, size)
        pts[:, 0] = (pts[:, 0] - x0) * (size / side)
        pts[:, 1] = (pts[:, 1] - y0) * (size / side)
        pts = np.clip(pts, 0.0, size - 1.0)

    out = Sample(
        image=_quantize(img),
        label=sample.label,
        mask=np.ascontiguousarray(mask),
        landmarks=pts,
        family=sample.family,
        video_id=sample.video_id,
        sample_id=sample.sample_id,
    )
    return out


def augment(sample: Sample, seed: int) -> Sample:
    return apply_augment(sample, augment_params(sample, seed))


# ---------------------------------------------------------------------------
# corpus


def build_dataset(spec: DatasetSpec) -> List[Sample]:
    """Deterministic corpus: first the real videos, then one fake video per
    (target, donor) identity pair for each requested family."""
    samples: List[Sample] = []
    video = 0

    n_real_videos = math.ceil(spec.n_real / spec.frames_per_video)
    for _ in range(n_real_videos):
        ident = _make_identity(spec, video)
        for f in range(spec.frames_per_video):
            if len(samples) < spec.n_real:
                samples.append(_render_frame(spec, ident, video, f))
        video += 1

    for family in FAMILIES:
        count = spec.n_fake_per_family.get(family, 0)
        made = 0
        while made < count:
            target_v, donor_v = video, video + 1
            t_ident = _make_identity(spec, target_v)
            d_ident = _make_identity(spec, donor_v)
            for f in range(spec.frames_per_video):
                if made >= count:
                    break
                t = _render_frame(spec, t_ident, target_v, f)
                d = _render_frame(spec, d_ident, donor_v, f)
                fake = forge(t, d, family, seed=spec.seed * 100003 + target_v)
                samples.append(fake)
                made += 1
            video += 2

    if spec.augment:
        samples = [
            augment(s, seed=spec.seed * 7919 + i) for i, s in enumerate(samples)
        ]
    for i, s in enumerate(samples):
        s.sample_id = f"s{i:06d}"
        s.validate()
    return samples


def write_dataset(spec: DatasetSpec, path) -> Path:
    """Generate the corpus and write index.json plus one image and one mask
    blob per sample (uint8 TNSR)."""
    root = Path(path)
    blobs = root / "blobs"
    blobs.mkdir(parents=True, exist_ok=True)
    samples = build_dataset(spec)
    index = {
        "schema_version": INDEX_VERSION,
        "image_size": spec.image_size,
        "seed": spec.seed,
        "count": len(samples),
        "samples": [],
    }
    for s in samples:
        img_name = f"blobs/{s.sample_id}_img.tnsr"
        mask_name = f"blobs/{s.sample_id}_mask.tnsr"
        write_tnsr(root / img_name, np.rint(s.image * 255.0).astype(np.uint8))
        write_tnsr(root / mask_name, s.mask.astype(np.uint8))
        index["samples"].append(
            {
                "id": s.sample_id,
                "label": int(s.label),
                "family": s.family,
                "video_id": int(s.video_id),
                "landmarks": [[float(x), float(y)] for x, y in s.landmarks],
                "image": img_name,
                "mask": mask_name,
            }
        )
    with open(root / "index.json", "w") as f:
        json.dump(index, f, sort_keys=True, separators=(",", ":"))
    return root


def read_dataset(path) -> List[Sample]:
    """Load a dataset directory, re-validating every sample invariant."""
    root = Path(path)
    with open(root / "index.json") as f:
        index = json.load(f)
    if index.get("schema_version") != INDEX_VERSION:
        raise ValueError(
            f"{root}: unsupported index schema {index.get('schema_version')!r}"
        )
    samples = []
    for entry in index["samples"]:
        img = read_tnsr(root / entry["image"])
        mask = read_tnsr(root / entry["mask"])
        if img.dtype != np.uint8 or mask.dtype != np.uint8:
            raise ValueError(f"sample {entry['id']}: blobs must be uint8")
        s = Sample(
            image=img.astype(np.float64) / 255.0,
            label=int(entry["label"]),
            mask=mask,
            landmarks=np.asarray(entry["landmarks"], dtype=np.float64),
            family=entry["family"],
            video_id=int(entry["video_id"]),
            sample_id=entry["id"],
        )
        s.validate()
        samples.append(s)
    return samples

"""Training and evaluation harness.

Everything a run emits is a pure function of (config, seed, dataset):
batches are drawn from one sequential generator whose state travels in
the checkpoint, so training N steps equals training k, checkpointing,
and training N-k more, loss for loss. In pseudo-label mode the loop
never touches a ground-truth mask.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .data import Sample, augment, read_dataset
from .formats import read_tnsr, tnsr_bytes, read_tnsr_at, write_pgm, prob_map_to_pgm
from .metrics import MetricsReport, accuracy, roc_auc, roc_points, video_auc, grad_cam
from .model import ModelConfig, TwoStreamModel
from .optim import ParamStore, adam_step
from .srm import apply_srm
from .supervision import (
    AnchorState,
    REGION_CHOICES,
    loss_cls,
    loss_loc,
    loss_total,
    mask_to_patches,
    pseudo_patch_labels,
    reference_rect,
    write_patch_label_pgm,
)

CHECKPOINT_VERSION = 1

MODE_CHOICES = ("mask", "sspsl")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    mode: str = "mask"
    region: str = "nose"
    epochs: int = 15
    batch_size: int = 16
    min_real: int = 4
    min_fake: int = 4
    lr: float = 5e-4
    lr_half_life: int = 5  # epochs between halvings
    anchor_momentum: float = 0.9
    augment: bool = False
    seed: int = 0
    train_dir: str = ""
    out_dir: str = ""

    def __post_init__(self):
        if self.mode not in MODE_CHOICES:
            raise ValueError(f"mode must be one of {MODE_CHOICES}")
        if self.region not in REGION_CHOICES:
            raise ValueError(f"region must be one of {REGION_CHOICES}")
        if self.lr <= 0 or self.lr_half_life <= 0 or self.epochs < 1:
            raise ValueError("rates, half-life and epochs must be positive")
        if self.min_real < 1 or self.min_fake < 1:
            raise ValueError("batch composition minimums must be >= 1")
        if self.batch_size < self.min_real + self.min_fake:
            raise ValueError(
                f"batch_size {self.batch_size} cannot hold >= {self.min_real} real "
                f"and >= {self.min_fake} fake samples"
            )

    def to_dict(self) -> dict:
        d = {
            "model": self.model.to_dict(),
            "mode": self.mode,
            "region": self.region,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "min_real": self.min_real,
            "min_fake": self.min_fake,
            "lr": self.lr,
            "lr_half_life": self.lr_half_life,
            "anchor_momentum": self.anchor_momentum,
            "augment": self.augment,
            "seed": self.seed,
            "train_dir": self.train_dir,
            "out_dir": self.out_dir,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        d = dict(d)
        d["model"] = ModelConfig.from_dict(d.get("model", {}))
        return RunConfig(**d)


def learning_rate(cfg: RunConfig, epoch: int) -> float:
    return cfg.lr * 0.5 ** (epoch // cfg.lr_half_life)


def learning_rate_trace(cfg: RunConfig) -> List[float]:
    return [learning_rate(cfg, e) for e in range(cfg.epochs)]


# ---------------------------------------------------------------------------
# batches


def _class_pools(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    labels = np.array([s.label for s in samples])
    return np.flatnonzero(labels == 0), np.flatnonzero(labels == 1)


def check_composition(cfg: RunConfig, samples: Sequence[Sample]) -> None:
    reals, fakes = _class_pools(samples)
    if len(samples) < cfg.batch_size:
        raise ValueError(
            f"dataset of {len(samples)} samples cannot fill a batch of {cfg.batch_size}"
        )
    if reals.size < cfg.min_real or fakes.size < cfg.min_fake:
        raise ValueError(
            f"dataset has {reals.size} real / {fakes.size} fake samples; batches "
            f"need >= {cfg.min_real} real and >= {cfg.min_fake} fake"
        )


def draw_batch(
    cfg: RunConfig, rng: np.random.Generator, reals: np.ndarray, fakes: np.ndarray
) -> np.ndarray:
    """Class-stratified batch: the class split mirrors the dataset ratio,
    clamped so both minimums always hold."""
    frac_real = reals.size / (reals.size + fakes.size)
    n_real = int(round(cfg.batch_size * frac_real))
    n_real = min(max(n_real, cfg.min_real), cfg.batch_size - cfg.min_fake)
    n_real = min(n_real, reals.size)
    n_fake = cfg.batch_size - n_real
    picked_r = rng.choice(reals, size=n_real, replace=reals.size < n_real)
    picked_f = rng.choice(fakes, size=n_fake, replace=fakes.size < n_fake)
    return np.concatenate([picked_r, picked_f])


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: RunConfig
    model: TwoStreamModel
    anchors: AnchorState
    rng_state: dict
    epoch: int
    step: int
    loss_history: List[float]


def checkpoint_save(path, config: RunConfig, model: TwoStreamModel, anchors: AnchorState,
                    rng: np.random.Generator, epoch: int, step: int,
                    loss_history: Sequence[float]) -> Path:
    """Write manifest.json plus a params.tnsr pack holding every parameter,
    both Adam moment sets and any initialized anchors, byte-reproducibly."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    pack = bytearray()
    offsets: Dict[str, int] = {}

    def put(name: str, arr: np.ndarray) -> None:
        offsets[name] = len(pack)
        pack.extend(tnsr_bytes(np.asarray(arr, dtype=np.float64)))

    store = model.store
    for name, p in store.items():
        put(f"param/{name}", p.data)
    for name in store.names():
        put(f"adam.m/{name}", store.m[name])
    for name in store.names():
        put(f"adam.v/{name}", store.v[name])
    if anchors.real is not None:
        put("anchor/real", anchors.real)
    if anchors.fake is not None:
        put("anchor/fake", anchors.fake)

    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "run_config": config.to_dict(),
        "epoch": epoch,
        "step": step,
        "rng_state": rng.bit_generator.state,
        "adam_step_count": store.step_count,
        "anchor_momentum": anchors.momentum,
        "params": [
            {"name": n, "shape": list(store[n].shape), "offset": offsets[f"param/{n}"]}
            for n in store.names()
        ],
        "offsets": offsets,
        "loss_history": [float(v) for v in loss_history],
    }
    (root / "params.tnsr").write_bytes(bytes(pack))
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, separators=(",", ":"))
    return root


def checkpoint_load(path) -> Checkpoint:
    root = Path(path)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    version = manifest.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint format {version!r} is not supported (expected "
            f"{CHECKPOINT_VERSION}); no migration path exists"
        )
    config = RunConfig.from_dict(manifest["run_config"])
    pack = (root / "params.tnsr").read_bytes()
    offsets = manifest["offsets"]

    store = ParamStore()
    for entry in manifest["params"]:
        name = entry["name"]
        arr = read_tnsr_at(pack, offsets[f"param/{name}"], name)
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"parameter {name!r} shape mismatch in checkpoint")
        store.create(name, arr)
        store.m[name] = read_tnsr_at(pack, offsets[f"adam.m/{name}"], name)
        store.v[name] = read_tnsr_at(pack, offsets[f"adam.v/{name}"], name)
    store.step_count = int(manifest["adam_step_count"])
    model = TwoStreamModel(config.model, store=store)

    anchors = AnchorState(momentum=manifest["anchor_momentum"])
    if "anchor/real" in offsets:
        anchors.real = read_tnsr_at(pack, offsets["anchor/real"], "anchor/real")
    if "anchor/fake" in offsets:
        anchors.fake = read_tnsr_at(pack, offsets["anchor/fake"], "anchor/fake")

    return Checkpoint(
        config=config,
        model=model,
        anchors=anchors,
        rng_state=manifest["rng_state"],
        epoch=int(manifest["epoch"]),
        step=int(manifest["step"]),
        loss_history=[float(v) for v in manifest["loss_history"]],
    )


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: TwoStreamModel
    anchors: AnchorState
    loss_history: List[float]
    step: int
    config: RunConfig
    checkpoint_dir: Optional[Path] = None


def _residual_cache(cfg: RunConfig, samples: Sequence[Sample]) -> Optional[list]:
    if cfg.augment or cfg.model.streams == "rgb":
        return None
    return [apply_srm(s.image) for s in samples]


def train(
    config: RunConfig,
    samples: Optional[Sequence[Sample]] = None,
    resume_from=None,
    max_steps: Optional[int] = None,
) -> TrainResult:
    """Run (or resume) a training loop; returns the trained model and the
    per-step batch losses. `max_steps` caps the global step counter, which
    is what the resume-equivalence contract is stated against."""
    if samples is None:
        samples = read_dataset(config.train_dir)
    check_composition(config, samples)
    reals, fakes = _class_pools(samples)
    steps_per_epoch = max(len(samples) // config.batch_size, 1)

    if resume_from is not None:
        ck = checkpoint_load(resume_from)
        if ck.config.to_dict() != config.to_dict():
            raise ValueError("checkpoint config does not match the requested run")
        model, anchors = ck.model, ck.anchors
        rng = _rng_from_state(ck.rng_state)
        step = ck.step
        losses = list(ck.loss_history)
    else:
        model = TwoStreamModel(config.model)
        anchors = AnchorState(momentum=config.anchor_momentum)
        rng = np.random.default_rng(config.seed)
        step = 0
        losses = []

    cache = _residual_cache(config, samples)
    grid = config.model.grid
    size = config.model.image_size
    total_steps = config.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)

    while step < total_steps:
        epoch = step // steps_per_epoch
        lr = learning_rate(config, epoch)
        idx = draw_batch(config, rng, reals, fakes)
        batch = [samples[i] for i in idx]
        residuals = [cache[i] if cache is not None else None for i in idx]
        if config.augment:
            batch = [augment(s, int(rng.integers(2**63))) for s in batch]

        forwards = [
            model.forward(s.image, srm_residual=res)
            for s, res in zip(batch, residuals)
        ]
        labels = [s.label for s in batch]

        if config.mode == "mask":
            targets = [mask_to_patches(s.mask, grid) for s in batch]
        else:
            feats = np.stack([fw.taps["loc_final"].data for fw in forwards])
            rects = {
                i: reference_rect(batch[i].landmarks, grid, size, config.region)
                for i in range(len(batch))
                if labels[i] == 1
            }
            targets = pseudo_patch_labels(feats, labels, rects, anchors)

        per_sample = [
            loss_total(loss_cls(fw.cls_logit, y), loss_loc(fw.loc_logits, m))
            for fw, y, m in zip(forwards, labels, targets)
        ]
        total = per_sample[0]
        for term in per_sample[1:]:
            total = ad.add(total, term)
        total = ad.scale(total, 1.0 / len(per_sample))
        backward(total)
        adam_step(model.store, lr)
        losses.append(total.item())
        step += 1

        # keep the latest pseudo labels around for inspection dumps
        if config.mode == "sspsl":
            last_pseudo = [
                (batch[i].sample_id or f"i{idx[i]}", targets[i])
                for i in range(len(batch))
            ]

    ck_dir = None
    if config.out_dir and config.mode == "sspsl" and step > 0:
        dump = Path(config.out_dir) / "pseudo_labels"
        dump.mkdir(parents=True, exist_ok=True)
        for sid, label_map in last_pseudo:
            write_patch_label_pgm(dump / f"{sid}.pgm", label_map)
    if config.out_dir:
        ck_dir = checkpoint_save(
            Path(config.out_dir) / "checkpoint",
            config, model, anchors, rng,
            epoch=step // steps_per_epoch, step=step, loss_history=losses,
        )
    return TrainResult(model, anchors, losses, step, config, ck_dir)


# ---------------------------------------------------------------------------
# evaluation


def predict_sample(model: TwoStreamModel, image: np.ndarray) -> Tuple[float, np.ndarray]:
    fw = model.forward(image)
    prob = float(ad._expit(np.asarray(fw.cls_logit.data)))
    patch_probs = ad._expit(fw.loc_logits.data[0])
    return prob, patch_probs


def evaluate(
    model: TwoStreamModel,
    samples: Sequence[Sample],
    loss_history: Sequence[float] = (),
    config_echo: Optional[dict] = None,
    seed: int = 0,
) -> Tuple[MetricsReport, Dict[str, np.ndarray]]:
    """Batch-free deterministic inference over a labeled dataset.

    Returns the metrics report plus each sample's patch probability map
    (keyed by sample id) for dumping.
    """
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    grid = model.config.grid
    scores, labels, videos = [], [], []
    patch_hits = []
    maps: Dict[str, np.ndarray] = {}
    for i, s in enumerate(samples):
        prob, patch_probs = predict_sample(model, s.image)
        scores.append(prob)
        labels.append(s.label)
        videos.append(s.video_id)
        truth = mask_to_patches(s.mask, grid).values
        patch_hits.append(((patch_probs >= 0.5).astype(np.uint8) == truth).mean())
        maps[s.sample_id or f"s{i:06d}"] = patch_probs

    report = MetricsReport(
        frame_auc=roc_auc(scores, labels),
        frame_acc=accuracy(scores, labels),
        video_auc=video_auc(scores, labels, videos),
        patch_acc=float(np.mean(patch_hits)),
        roc=roc_points(scores, labels),
        loss_history=[float(v) for v in loss_history],
        config=config_echo or {},
        seed=seed,
        per_sample=[
            {
                "id": s.sample_id or f"s{i:06d}",
                "label": int(s.label),
                "video_id": int(s.video_id),
                "score": float(score),
            }
            for i, (s, score) in enumerate(zip(samples, scores))
        ],
    )
    return report, maps


# ---------------------------------------------------------------------------
# ablations


ARCH_VARIANTS = (
    ("rgb_only", {"streams": "rgb", "use_attention": False, "use_multiscale": False}),
    ("srm_only", {"streams": "srm", "use_attention": False, "use_multiscale": False}),
    ("sum_fusion", {"streams": "both", "fusion": "sum", "use_attention": False,
                    "use_multiscale": False}),
    ("cross_fusion", {"streams": "both", "fusion": "cross", "use_attention": False,
                      "use_multiscale": False}),
    ("cross_fusion_attn", {"streams": "both", "fusion": "cross", "use_attention": True,
                           "use_multiscale": False}),
    ("full", {"streams": "both", "fusion": "cross", "use_attention": True,
              "use_multiscale": True}),
)


def ablation_runs(base: RunConfig) -> List[Tuple[str, RunConfig]]:
    """The six architecture variants plus the four reference-region variants
    (the latter in pseudo-label mode, where the region actually matters)."""
    runs = []
    for name, overrides in ARCH_VARIANTS:
        runs.append((name, replace(base, model=replace(base.model, **overrides))))
    for region in REGION_CHOICES:
        runs.append((f"region_{region}", replace(base, mode="sspsl", region=region)))
    return runs


def ablate(
    base: RunConfig,
    train_samples: Sequence[Sample],
    eval_samples: Sequence[Sample],
    out_dir,
) -> List[dict]:
    """Train and evaluate every ablation variant; one CSV row per run.

    A failing run is recorded (ablation_errors.json) and the remaining
    runs continue.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: List[dict] = []
    errors: Dict[str, str] = {}
    for name, cfg in ablation_runs(base):
        t0 = time.perf_counter()
        try:
            result = train(cfg, samples=train_samples)
            report, _ = evaluate(result.model, eval_samples)
            rows.append(
                {
                    "config": name,
                    "frame_auc": report.frame_auc,
                    "frame_acc": report.frame_acc,
                    "video_auc": report.video_auc,
                    "wall_time_s": time.perf_counter() - t0,
                }
            )
        except Exception as exc:  # noqa: BLE001 - continue-on-failure by contract
            errors[name] = f"{type(exc).__name__}: {exc}"
            rows.append(
                {
                    "config": name,
                    "frame_auc": None,
                    "frame_acc": None,
                    "video_auc": None,
                    "wall_time_s": time.perf_counter() - t0,
                }
            )
    with open(out / "ablation.csv", "w") as f:
        f.write("config,frame_auc,frame_acc,video_auc,wall_time_s\n")
        for r in rows:
            cells = [r["config"]] + [
                "" if r[k] is None else repr(float(r[k]))
                for k in ("frame_auc", "frame_acc", "video_auc", "wall_time_s")
            ]
            f.write(",".join(cells) + "\n")
    if errors:
        with open(out / "ablation_errors.json", "w") as f:
            json.dump(errors, f, sort_keys=True, indent=2)
    return rows


# ---------------------------------------------------------------------------
# single-image prediction


def predict_image(checkpoint_dir, image_path, out_dir=None, cam_tap: Optional[str] = None):
    """Probability, patch map and optional saliency map for one image file.

    The image is a TNSR blob: uint8 [3,H,W] on the 0..255 scale or float
    already in [0,1].
    """
    ck = checkpoint_load(checkpoint_dir)
    arr = read_tnsr(image_path)
    if arr.dtype == np.uint8:
        img = arr.astype(np.float64) / 255.0
    else:
        img = np.asarray(arr, dtype=np.float64)
    prob, patch_probs = predict_sample(ck.model, img)
    cam = grad_cam(ck.model, img, cam_tap) if cam_tap else None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_pgm(out / "forgery_map.pgm", prob_map_to_pgm(patch_probs))
        if cam is not None:
            write_pgm(out / "cam.pgm", prob_map_to_pgm(cam))
    return prob, patch_probs, cam

"""Evaluation metrics, saliency maps and report files.

AUC is the Mann-Whitney rank statistic with average ranks for ties,
which equals the trapezoidal area under the emitted ROC curve exactly.
Reports land on disk as metrics.json (schema v1), roc.csv, optional PGM
maps and an optional hand-rolled roc.svg (no timestamps anywhere).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .autodiff import backward
from .formats import prob_map_to_pgm, write_pgm

METRICS_VERSION = 1


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(score of a positive > score of a negative) + half the tie mass."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one sample of each class")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.size == 0:
        raise ValueError("accuracy of an empty sample set is undefined")
    return float(((s >= threshold).astype(int) == y).mean())


def video_auc(
    scores: Sequence[float], labels: Sequence[int], video_ids: Sequence[int]
) -> float:
    """Frame scores are averaged per video, then ranked like frames."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    v = np.asarray(video_ids)
    vid_scores: Dict[int, list] = {}
    vid_label: Dict[int, int] = {}
    for score, label, vid in zip(s, y, v):
        vid_scores.setdefault(int(vid), []).append(float(score))
        prev = vid_label.setdefault(int(vid), int(label))
        if prev != label:
            raise ValueError(f"video {vid} carries conflicting labels")
    ids = sorted(vid_scores)
    means = [float(np.mean(vid_scores[i])) for i in ids]
    return roc_auc(means, [vid_label[i] for i in ids])


def roc_points(scores: Sequence[float], labels: Sequence[int]) -> List[tuple]:
    """(fpr, tpr, threshold) rows: one per distinct score, descending, plus
    the (0,0) start whose threshold is None (predict nothing positive)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs at least one sample of each class")
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    points = [(0.0, 0.0, None)]
    tp = fp = 0
    i = 0
    n = len(s_sorted)
    while i < n:
        thr = s_sorted[i]
        while i < n and s_sorted[i] == thr:
            if y_sorted[i] == 1:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / n_neg, tp / n_pos, float(thr)))
    return points


def trapezoid_area(points: Sequence[tuple]) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.trapezoid(tpr, fpr))


def grad_cam(model, image: np.ndarray, tap: str) -> np.ndarray:
    """Saliency of the classification logit at a named intermediate.

    Channel weights are the spatial means of d(logit)/d(feature); the
    weighted feature sum is rectified and min-max normalized to [0,1],
    with a flat map defined as all zeros.
    """
    fw = model.forward(image)
    if tap not in fw.taps:
        raise ValueError(
            f"unknown tap {tap!r}; valid taps: {', '.join(sorted(fw.taps))}"
        )
    feat = fw.taps[tap]
    backward(fw.cls_logit)
    grad = feat.grad
    model.store.zero_grads()
    if grad is None:
        raise ValueError(f"tap {tap!r} does not influence the classification logit")
    weights = grad.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * feat.data).sum(axis=0), 0.0)
    lo, hi = cam.min(), cam.max()
    if hi - lo < 1e-300:
        return np.zeros_like(cam)
    return (cam - lo) / (hi - lo)


@dataclass
class MetricsReport:
    frame_auc: float
    frame_acc: float
    video_auc: Optional[float]
    patch_acc: Optional[float]
    roc: List[tuple]
    loss_history: List[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seed: int = 0
    per_sample: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": METRICS_VERSION,
            "frame_auc": self.frame_auc,
            "frame_acc": self.frame_acc,
            "video_auc": self.video_auc,
            "patch_acc": self.patch_acc,
            "roc": [[p[0], p[1], p[2]] for p in self.roc],
            "loss_history": list(self.loss_history),
            "config": self.config,
            "seed": self.seed,
            "per_sample": self.per_sample,
        }


def emit_report(
    report: MetricsReport,
    out_dir,
    maps: Optional[Dict[str, np.ndarray]] = None,
    cams: Optional[Dict[str, np.ndarray]] = None,
    write_svg: bool = False,
) -> Path:
    """Write metrics.json, roc.csv and any per-sample probability maps or
    saliency maps as PGM files under `out_dir`."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w") as f:
        json.dump(report.to_dict(), f, sort_keys=True, separators=(",", ":"))

    with open(out / "roc.csv", "w") as f:
        f.write("fpr,tpr,threshold\n")
        for fpr, tpr, thr in report.roc:
            f.write(f"{fpr!r},{tpr!r},{'inf' if thr is None else repr(thr)}\n")

    for name, rows in (("maps", maps), ("cams", cams)):
        if rows:
            sub = out / name
            sub.mkdir(exist_ok=True)
            for sid, values in rows.items():
                write_pgm(sub / f"{sid}.pgm", prob_map_to_pgm(values))

    if write_svg:
        (out / "roc.svg").write_text(_roc_svg(report.roc))
    return out


def read_metrics(path) -> dict:
    with open(Path(path) / "metrics.json") as f:
        data = json.load(f)
    if data.get("schema_version") != METRICS_VERSION:
        raise ValueError(f"unsupported metrics schema {data.get('schema_version')!r}")
    return data


def _roc_svg(points: Sequence[tuple], size: int = 320, margin: int = 24) -> str:
    span = size - 2 * margin

    def px(fpr, tpr):
        return margin + fpr * span, margin + (1.0 - tpr) * span

    coords = " ".join("{:.2f},{:.2f}".format(*px(p[0], p[1])) for p in points)
    d0 = px(0, 0)
    d1 = px(1, 1)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">\n'
        f'<rect x="{margin}" y="{margin}" width="{span}" height="{span}" '
        f'fill="none" stroke="#999"/>\n'
        f'<line x1="{d0[0]}" y1="{d0[1]}" x2="{d1[0]}" y2="{d1[1]}" '
        f'stroke="#bbb" stroke-dasharray="4 3"/>\n'
        f'<polyline points="{coords}" fill="none" stroke="#1f6feb" stroke-width="1.5"/>\n'
        f"</svg>\n"
    )

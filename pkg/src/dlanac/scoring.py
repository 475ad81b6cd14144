"""PSNR-based anomaly scores and frame-level ROC AUC."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .diffcore import EvaluationError

PSNR_CLAMP_DB = 100.0


@dataclass
class VideoScores:
    video_id: str
    psnr: np.ndarray
    labels: np.ndarray
    frame_index: np.ndarray = None
    score: np.ndarray = field(default=None)

    def __post_init__(self):
        self.psnr = np.asarray(self.psnr, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.frame_index is None:
            self.frame_index = np.arange(self.psnr.size)
        if self.score is None:
            self.score = anomaly_scores(self.psnr)


def psnr(target, pred, fixed_range: bool = False) -> float:
    """PSNR of a prediction, both given in [-1, 1] and remapped to [0, 1].

    The peak is the maximum of the predicted frame unless ``fixed_range``,
    in which case it is 1.
    """
    t = (np.asarray(target, dtype=np.float64) + 1.0) / 2.0
    p = (np.asarray(pred, dtype=np.float64) + 1.0) / 2.0
    if t.shape != p.shape:
        raise ValueError(f"shape mismatch: {t.shape} vs {p.shape}")
    mse = float(np.mean((t - p) ** 2))
    if mse < 1e-10:
        return PSNR_CLAMP_DB
    peak = 1.0 if fixed_range else float(p.max())
    if peak <= 0:
        # an all-black prediction has no peak; treat as worst case
        return -PSNR_CLAMP_DB
    return float(10.0 * np.log10(peak * peak / mse))


def anomaly_scores(psnr_values) -> np.ndarray:
    """Per-video min-max normalized, inverted PSNR. Constant input gives zeros."""
    p = np.asarray(psnr_values, dtype=np.float64)
    if p.size == 0:
        raise ValueError("need at least one frame")
    lo, hi = p.min(), p.max()
    if hi - lo <= 0:
        return np.zeros_like(p)
    return np.clip(1.0 - (p - lo) / (hi - lo), 0.0, 1.0)


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties count half)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC needs both normal and anomalous frames")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def frame_auc(all_scores: list[VideoScores]) -> float:
    s = np.concatenate([v.score for v in all_scores])
    y = np.concatenate([v.labels for v in all_scores])
    return roc_auc(s, y)


def write_scores_csv(v: VideoScores, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "psnr", "score", "label"])
        for i, p, s, lab in zip(v.frame_index, v.psnr, v.score, v.labels):
            w.writerow([int(i), f"{p:.6f}", f"{s:.6f}", int(lab)])


def read_scores_csv(path: Path, video_id: str = "") -> VideoScores:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return VideoScores(
        video_id=video_id or Path(path).stem,
        frame_index=np.array([int(r["frame_index"]) for r in rows]),
        psnr=np.array([float(r["psnr"]) for r in rows]),
        score=np.array([float(r["score"]) for r in rows]),
        labels=np.array([int(r["label"]) for r in rows]),
    )


def _runs(labels):
    runs, start = [], None
    for i, v in enumerate(labels):
        if v and start is None:
            start = i
        elif not v and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(labels)))
    return runs


def score_curve_svg(v: VideoScores, width: int = 640, height: int = 200) -> str:
    """Line chart of the anomaly score with ground-truth spans shaded."""
    pad = 30
    n = len(v.score)
    x0, x1 = v.frame_index[0], v.frame_index[-1] if n > 1 else v.frame_index[0] + 1
    span = max(x1 - x0, 1)

    def sx(i):
        return pad + (i - x0) / span * (width - 2 * pad)

    def sy(s):
        return height - pad - s * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    for a, b in _runs(v.labels):
        xa, xb = sx(v.frame_index[a]), sx(v.frame_index[b - 1])
        parts.append(f'<rect x="{xa:.1f}" y="{pad}" width="{max(xb - xa, 1):.1f}" '
                     f'height="{height - 2 * pad}" fill="#f4b6b6"/>')
    pts = " ".join(f"{sx(i):.1f},{sy(s):.1f}" for i, s in zip(v.frame_index, v.score))
    parts.append(f'<polyline points="{pts}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>')
    parts.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" '
                 'stroke="black"/>')
    parts.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
    parts.append(f'<text x="{pad}" y="{pad - 8}" font-size="12" font-family="sans-serif">'
                 f'{v.video_id} anomaly score</text>')
    parts.append("</svg>")
    return "\n".join(parts)

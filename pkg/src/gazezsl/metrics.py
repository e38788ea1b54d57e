"""Classification and gaze-map metrics.

Classification quality is average per-class top-1 accuracy (classes weigh
equally regardless of size), with the generalized zero-shot summary being the
harmonic mean H of seen and unseen accuracy. Gaze maps are scored per
Hungarian-matched channel with two saliency metrics: pixel-level ROC AUC
(fixated cells as positives, midrank handling of ties) and NSS (mean z-score
of the map at the fixated cells, population standard deviation).
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import match_channels
from .classifier import predict_gzsl, predict_zsl
from .data import ZslDataset
from .model import ModelParams, attribute_queries, forward


def per_class_top1(predictions, labels, class_set) -> float:
    """Mean over classes (with >= 1 sample) of that class's top-1 accuracy."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"{len(predictions)} predictions vs {len(labels)} labels")
    accuracies = []
    for c in sorted(class_set):
        mask = labels == c
        if mask.any():
            accuracies.append(float(np.mean(predictions[mask] == c)))
    if not accuracies:
        raise ValueError("no evaluable classes: every class in the set has zero samples")
    return float(np.mean(accuracies))


def harmonic_mean(seen_acc: float, unseen_acc: float) -> float:
    if seen_acc < 0 or unseen_acc < 0:
        raise ValueError("accuracies must be nonnegative")
    if seen_acc + unseen_acc == 0:
        return 0.0
    return 2.0 * seen_acc * unseen_acc / (seen_acc + unseen_acc)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average of their rank span."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def auc(saliency: np.ndarray, fixations) -> float:
    """Pixel-level ROC AUC of the map against the fixated-cell labels."""
    saliency = np.asarray(saliency, dtype=float)
    h, w = saliency.shape
    cells = {(int(r), int(c)) for r, c in fixations}
    if not cells:
        raise ValueError("AUC needs at least one fixation")
    if any(not (0 <= r < h and 0 <= c < w) for r, c in cells):
        raise ValueError(f"fixation outside the {h}x{w} grid")
    if len(cells) == h * w:
        raise ValueError("AUC undefined: every cell is fixated")
    positive = np.zeros((h, w), dtype=bool)
    for r, c in cells:
        positive[r, c] = True
    ranks = _midranks(saliency.ravel())
    p = positive.sum()
    n = positive.size - p
    rank_sum = ranks[positive.ravel()].sum()
    return float((rank_sum - p * (p + 1) / 2) / (p * n))


def nss(saliency: np.ndarray, fixations) -> float:
    """Mean z-scored saliency at the fixation points; a constant map scores 0."""
    saliency = np.asarray(saliency, dtype=float)
    h, w = saliency.shape
    points = [(int(r), int(c)) for r, c in fixations]
    if not points:
        raise ValueError("NSS needs at least one fixation")
    if any(not (0 <= r < h and 0 <= c < w) for r, c in points):
        raise ValueError(f"fixation outside the {h}x{w} grid")
    std = saliency.std()  # population standard deviation
    if std == 0.0:
        return 0.0
    z = (saliency - saliency.mean()) / std
    return float(np.mean([z[r, c] for r, c in points]))


@dataclass(frozen=True)
class MetricsReport:
    mode: str
    sigma: float
    gamma: float | None = None
    t1: float | None = None
    seen_acc: float | None = None
    unseen_acc: float | None = None
    harmonic: float | None = None
    gaze_auc: float | None = None
    gaze_nss: float | None = None
    counts: dict | None = None

    def metric_rows(self) -> list[tuple[str, float]]:
        names = [("t1", self.t1), ("seen_acc", self.seen_acc),
                 ("unseen_acc", self.unseen_acc), ("harmonic", self.harmonic),
                 ("gaze_auc", self.gaze_auc), ("gaze_nss", self.gaze_nss)]
        return [(name, value) for name, value in names if value is not None]


def _sigma_value(params: ModelParams) -> float:
    return float(params.sigma.values) if params.sigma is not None else params.config.sigma


def evaluate(dataset: ZslDataset, params: ModelParams, mode: str = "zsl",
             gamma: float = 0.0, similarity: str = "cosine",
             with_gaze: bool = True) -> MetricsReport:
    """Score the test split; ZSL restricts to unseen images and classes,
    GZSL scores every test image over all classes with calibration gamma.

    Gaze metrics (when the dataset has gaze channels) follow the loss's
    channel matching and average over unseen test images, skipping channels
    with no fixation.
    """
    if mode not in ("zsl", "gzsl"):
        raise ValueError(f"unknown mode {mode!r}")
    emb = dataset.embeddings
    sigma = _sigma_value(params)
    v = params.projection.values
    queries = attribute_queries(params, dataset.word_vectors)
    unseen_test = [i for i in dataset.test_indices if dataset.labels[i] in emb.unseen]
    if mode == "zsl" and not unseen_test:
        raise ValueError("ZSL evaluation needs unseen-class test images")
    indices = list(dataset.test_indices) if mode == "gzsl" else unseen_test
    unseen_lookup = frozenset(unseen_test)

    score_gaze = with_gaze and dataset.gaze is not None
    predictions, auc_vals, nss_vals = [], [], []
    with ad.no_grad():
        for i in indices:
            out = forward(params, dataset.image(i), queries,
                          with_gaze=score_gaze and i in unseen_lookup)
            h = out.pooled.values
            if mode == "zsl":
                predictions.append(predict_zsl(h, v, emb, similarity))
            else:
                predictions.append(predict_gzsl(h, v, emb, sigma, gamma, similarity))
            if out.gaze is not None:
                target = dataset.gaze_channels_last(i)
                perm = match_channels(out.gaze.values, target)
                for d, matched in enumerate(perm):
                    points = dataset.fixations[i][matched]
                    if points:
                        channel = out.gaze.values[:, :, d]
                        auc_vals.append(auc(channel, points))
                        nss_vals.append(nss(channel, points))

    predictions = np.array(predictions)
    labels = dataset.labels[indices]
    counts = {"evaluated": len(indices), "gaze_channels": len(auc_vals)}
    gaze_auc = float(np.mean(auc_vals)) if auc_vals else None
    gaze_nss = float(np.mean(nss_vals)) if nss_vals else None
    if mode == "zsl":
        return MetricsReport(mode=mode, sigma=sigma, t1=per_class_top1(
            predictions, labels, emb.unseen), gaze_auc=gaze_auc, gaze_nss=gaze_nss,
            counts=counts)
    seen_acc = per_class_top1(predictions, labels, emb.seen)
    unseen_acc = per_class_top1(predictions, labels, emb.unseen)
    return MetricsReport(mode=mode, sigma=sigma, gamma=gamma,
                         seen_acc=seen_acc, unseen_acc=unseen_acc,
                         harmonic=harmonic_mean(seen_acc, unseen_acc),
                         gaze_auc=gaze_auc, gaze_nss=gaze_nss, counts=counts)


def gaze_report(dataset: ZslDataset, params: ModelParams) -> dict:
    """Per-channel and averaged AUC/NSS over unseen-class test images.

    Channels are indexed by the model's output channel; each image's target
    channel is chosen by the same Hungarian matching the loss uses. Channels
    whose matched target has no fixations in an image are skipped for it.
    """
    if dataset.gaze is None or not dataset.fixations:
        raise ValueError("dataset has no gaze channels or fixations")
    emb = dataset.embeddings
    queries = attribute_queries(params, dataset.word_vectors)
    unseen_test = [i for i in dataset.test_indices if dataset.labels[i] in emb.unseen]
    num_channels = dataset.gaze.shape[1]
    per_auc = [[] for _ in range(num_channels)]
    per_nss = [[] for _ in range(num_channels)]
    with ad.no_grad():
        for i in unseen_test:
            out = forward(params, dataset.image(i), queries, with_gaze=True)
            target = dataset.gaze_channels_last(i)
            perm = match_channels(out.gaze.values, target)
            for d, matched in enumerate(perm):
                points = dataset.fixations[i][matched]
                if points:
                    channel = out.gaze.values[:, :, d]
                    per_auc[d].append(auc(channel, points))
                    per_nss[d].append(nss(channel, points))
    channels = []
    for d in range(num_channels):
        count = len(per_auc[d])
        channels.append({
            "channel": d,
            "auc": float(np.mean(per_auc[d])) if count else None,
            "nss": float(np.mean(per_nss[d])) if count else None,
            "images": count,
        })
    all_auc = [v for vals in per_auc for v in vals]
    all_nss = [v for vals in per_nss for v in vals]
    if not all_auc:
        raise ValueError("no fixated channels among the unseen-class test images")
    return {"channels": channels, "auc": float(np.mean(all_auc)),
            "nss": float(np.mean(all_nss)), "images": len(unseen_test)}


def write_csv(path, reports, seed: int) -> None:
    """metric,value,mode,gamma,sigma,seed — one row per present metric."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value", "mode", "gamma", "sigma", "seed"])
        for report in reports:
            gamma = "" if report.gamma is None else report.gamma
            for name, value in report.metric_rows():
                writer.writerow([name, value, report.mode, gamma, report.sigma, seed])


def write_json(path, reports, seed: int) -> None:
    payload = {"seed": seed,
               "reports": [dataclasses.asdict(r) for r in reports]}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))

"""Predicate-classification evaluation: R@K, mR@K, F@K, per-class recalls.

Ground-truth pairs are given, one predicate prediction per pair; a predicted
triplet matches when pair identity and predicate class both match.  Per
scene, predictions are ranked by score (ties by ascending instance id) and
the top K are counted against ground truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .core import RelationInstance, class_groups
from .model import ModelParameters, embed_batch, head_batch, _stack_features
from .losses import softmax


@dataclass(frozen=True)
class EvalReport:
    ks: tuple
    r_at_k: Dict[int, float]  # percentages
    mr_at_k: Dict[int, float]
    f_at_k: Dict[int, float]
    per_class_recall: Dict[int, np.ndarray]
    group_recall: Dict[int, Tuple[float, float, float]]
    n_gt: int
    gt_per_class: np.ndarray


def f_at_k(r: float, mr: float) -> float:
    """Harmonic mean of recall and mean recall; 0 when both vanish."""
    if r + mr == 0.0:
        return 0.0
    return 2.0 * r * mr / (r + mr)


def _count_matches(predictions, gts, k: int, n_p: int):
    """Per-scene top-k matching.

    predictions: per scene, list of ((pair_key, class), score).
    gts: per scene, list of (pair_key, class).
    Returns (matched_per_class, gt_per_class).
    """
    matched = np.zeros(n_p, dtype=np.int64)
    gt_counts = np.zeros(n_p, dtype=np.int64)
    for scene_preds, scene_gts in zip(predictions, gts):
        for _, cls in scene_gts:
            gt_counts[cls] += 1
        gt_set = set(scene_gts)
        ranked = sorted(scene_preds, key=lambda item: (-item[1], item[0][0]))
        for (pair_key, cls), _ in ranked[:k]:
            if (pair_key, cls) in gt_set:
                matched[cls] += 1
    return matched, gt_counts


def recall_at_k(predictions, gts, k: int, n_p: int) -> float:
    """Total top-k matches over total ground truth, across scenes."""
    matched, gt_counts = _count_matches(predictions, gts, k, n_p)
    total = gt_counts.sum()
    if total == 0:
        raise ValueError("no ground-truth triplets")
    return float(matched.sum() / total)


def per_class_recall_at_k(predictions, gts, k: int, n_p: int) -> np.ndarray:
    """Recall restricted to each class; NaN where a class has no ground truth."""
    matched, gt_counts = _count_matches(predictions, gts, k, n_p)
    with np.errstate(invalid="ignore"):
        return np.where(gt_counts > 0, matched / np.maximum(gt_counts, 1), np.nan)


def mean_recall_at_k(predictions, gts, k: int, n_p: int) -> float:
    """Unweighted mean of per-class recalls over classes with ground truth."""
    per_class = per_class_recall_at_k(predictions, gts, k, n_p)
    present = ~np.isnan(per_class)
    if not present.any():
        raise ValueError("no ground-truth triplets")
    return float(per_class[present].mean())


def scene_predictions(model: ModelParameters, data: Sequence[RelationInstance]):
    """Per-scene prediction and ground-truth lists for labeled instances.

    Prediction score is the instance's maximum softmax probability; unlabeled
    (background) pairs carry no ground truth and are excluded.
    """
    labeled = [inst for inst in data if inst.predicate is not None]
    if not labeled:
        raise ValueError("no labeled instances to evaluate")
    r, _ = embed_batch(model, *_stack_features(labeled))
    hc = head_batch(model, r)
    probs = softmax(hc.logits)
    pred_cls = np.argmax(hc.logits, axis=1)
    scores = probs[np.arange(len(labeled)), pred_cls]
    by_scene: dict = {}
    for i, inst in enumerate(labeled):
        preds, gts = by_scene.setdefault(inst.scene_id, ([], []))
        preds.append(((inst.id, int(pred_cls[i])), float(scores[i])))
        gts.append((inst.id, inst.predicate))
    scene_ids = sorted(by_scene)
    predictions = [by_scene[s][0] for s in scene_ids]
    gts = [by_scene[s][1] for s in scene_ids]
    return predictions, gts


def evaluate(model: ModelParameters, data: Sequence[RelationInstance], ks: Sequence[int],
             head_frac: float = 0.5, tail_frac: float = 0.1,
             frequency: Optional[np.ndarray] = None) -> EvalReport:
    """Full report over the given K values.

    Head/body/tail aggregates use `frequency` (normally training-set class
    frequencies) or, when absent, the evaluated data's own frequencies.
    """
    n_p = model.cfg.n_p
    predictions, gts = scene_predictions(model, data)
    if frequency is None:
        frequency = np.zeros(n_p)
        for scene in gts:
            for _, cls in scene:
                frequency[cls] += 1
        frequency /= frequency.sum()
    head, body, tail = class_groups(frequency, head_frac, tail_frac)
    r_at, mr_at, f_at, pcr, group = {}, {}, {}, {}, {}
    gt_per_class = None
    for k in ks:
        matched, gt_counts = _count_matches(predictions, gts, k, n_p)
        gt_per_class = gt_counts
        r = float(matched.sum() / gt_counts.sum())
        with np.errstate(invalid="ignore"):
            per_class = np.where(gt_counts > 0, matched / np.maximum(gt_counts, 1), np.nan)
        mr = float(per_class[~np.isnan(per_class)].mean())
        r_at[k] = 100.0 * r
        mr_at[k] = 100.0 * mr
        f_at[k] = f_at_k(r_at[k], mr_at[k])
        pcr[k] = per_class

        def group_mean(idx):
            vals = per_class[idx]
            vals = vals[~np.isnan(vals)]
            return 100.0 * float(vals.mean()) if vals.size else float("nan")

        group[k] = (group_mean(head), group_mean(body), group_mean(tail))
    return EvalReport(ks=tuple(ks), r_at_k=r_at, mr_at_k=mr_at, f_at_k=f_at,
                      per_class_recall=pcr, group_recall=group,
                      n_gt=int(gt_per_class.sum()), gt_per_class=gt_per_class)


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "K", "value"])
        for k in report.ks:
            writer.writerow(["R", k, f"{report.r_at_k[k]:.4f}"])
            writer.writerow(["mR", k, f"{report.mr_at_k[k]:.4f}"])
            writer.writerow(["F", k, f"{report.f_at_k[k]:.4f}"])
            h, b, t = report.group_recall[k]
            writer.writerow(["head", k, f"{h:.4f}"])
            writer.writerow(["body", k, f"{b:.4f}"])
            writer.writerow(["tail", k, f"{t:.4f}"])


def format_report(report: EvalReport) -> str:
    lines = [f"{'K':>5} {'R@K':>8} {'mR@K':>8} {'F@K':>8} {'head':>8} {'body':>8} {'tail':>8}"]
    for k in report.ks:
        h, b, t = report.group_recall[k]
        lines.append(
            f"{k:>5} {report.r_at_k[k]:>8.2f} {report.mr_at_k[k]:>8.2f} "
            f"{report.f_at_k[k]:>8.2f} {h:>8.2f} {b:>8.2f} {t:>8.2f}"
        )
    return "\n".join(lines)

"""Per-batch discovery of latent multi-labels from retrieved neighbors.

For each labeled query: retrieve neighbors from the frozen bank, measure how
strongly their predicates disagree with the annotation, and for sufficiently
inconsistent instances sample an extra predicate weighted by the inverse
propensity of the retrieved classes.  Background relations can optionally be
pseudo-labeled directly, skipping the selection gate.

Random draws are read from id-indexed per-epoch tables, so an instance's
lambda and categorical draws depend only on (seed, epoch, instance id), never
on batch composition or scheduling order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bank import MemoryBank, query_batch
from .core import LabelDistribution, PropensityTable, RelationInstance
from .kernels import NUMBA_ENABLED, njit
from .model import ModelParameters, embed_batch, _stack_features
from .rng import Substreams

log = logging.getLogger(__name__)

STRATEGIES = ("none", "label_aug", "feat_aug", "mixup")


@dataclass(frozen=True)
class AugmentConfig:
    k: int = 5
    tau: float = 0.3
    alpha: float = 2.0
    beta: float = 2.0
    strategy: str = "label_aug"
    support_mask: bool = True
    background_policy: bool = False
    lambda_floor: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("Beta shape parameters must be positive")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if not 0.0 <= self.lambda_floor <= 1.0:
            raise ValueError("lambda_floor must lie in [0, 1]")


@dataclass(frozen=True)
class AugmentedLabel:
    gt: int
    aug: int
    lam: float
    mixed: LabelDistribution
    is_multi: bool


def pure_label(gt: int, n_p: int) -> AugmentedLabel:
    return AugmentedLabel(gt=gt, aug=gt, lam=1.0,
                          mixed=LabelDistribution.one_hot(gt, n_p), is_multi=False)


def inconsistency(gt: int, retrieved: Sequence[int]) -> float:
    """Fraction of retrieved neighbors whose predicate disagrees with gt."""
    if len(retrieved) == 0:
        raise ValueError("retrieved neighbor list is empty")
    agree = sum(1 for p in retrieved if p == gt)
    return 1.0 - agree / len(retrieved)


def select(gt: int, retrieved: Sequence[int], tau: float) -> bool:
    """True when the instance qualifies for multi-label augmentation (d >= tau)."""
    return inconsistency(gt, retrieved) >= tau


def sampling_weights(retrieved: Sequence[int], prop: PropensityTable,
                     support_mask: bool = True, use_inverse: bool = True) -> np.ndarray:
    """Softmax over aggregated inverse propensities of the retrieved classes.

    With support_mask (default) the softmax runs over retrieved classes only;
    without it, over the full class vector.  use_inverse=False replaces every
    propensity score with 1.0 (the uniform-aggregation ablation).
    """
    if len(retrieved) == 0:
        raise ValueError("retrieved neighbor list is empty")
    n_p = prop.inverse.shape[0]
    a = np.zeros(n_p)
    for p in retrieved:
        a[p] += prop.inverse[p] if use_inverse else 1.0
    if support_mask:
        support = a > 0.0
        shifted = a[support] - a[support].max()
        w = np.zeros(n_p)
        e = np.exp(shifted)
        w[support] = e / e.sum()
        return w
    shifted = a - a.max()
    e = np.exp(shifted)
    return e / e.sum()


def categorical_from_uniform(w: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from the weight vector using one uniform variate."""
    cum = np.cumsum(w)
    idx = int(np.searchsorted(cum, u, side="right"))
    idx = min(idx, w.shape[0] - 1)
    while w[idx] == 0.0 and idx > 0:  # u landed past the last positive weight
        idx -= 1
    return idx


def sample_augmented(gt: int, w: np.ndarray, rng: np.random.Generator,
                     alpha: float, beta: float, lambda_floor: float = 0.0) -> AugmentedLabel:
    """Draw the augmented predicate and mixing coefficient for one instance."""
    aug = categorical_from_uniform(w, float(rng.random()))
    lam = float(rng.beta(alpha, beta))
    if lambda_floor > 0.0:
        lam = max(lam, lambda_floor)
    mixed = LabelDistribution.mixed(gt, aug, lam, w.shape[0])
    return AugmentedLabel(gt=gt, aug=aug, lam=lam, mixed=mixed, is_multi=True)


class _DrawTables:
    """Prefix-stable per-epoch draw tables indexed by instance id.

    Regenerating a longer table reproduces the shorter one's prefix, so the
    values seen for an id never depend on how large the dataset turned out
    to be or which batch asked first.
    """

    def __init__(self, subs: Substreams, alpha: float, beta: float):
        self.subs = subs
        self.alpha = alpha
        self.beta = beta
        self.epoch: Optional[int] = None
        self.lam = np.zeros(0)
        self.uni = np.zeros(0)

    def ensure(self, epoch: int, max_id: int) -> None:
        if epoch == self.epoch and max_id < self.lam.shape[0]:
            return
        n = max(1024, max_id + 1)
        self.lam = self.subs.stream("lambda", epoch).beta(self.alpha, self.beta, size=n)
        self.uni = self.subs.stream("multinomial", epoch).random(size=n)
        self.epoch = epoch


def _draw_tables(subs: Substreams, cfg: AugmentConfig) -> _DrawTables:
    cache = getattr(subs, "_augment_draws", None)
    key = (cfg.alpha, cfg.beta)
    if cache is None:
        cache = {}
        subs._augment_draws = cache
    if key not in cache:
        cache[key] = _DrawTables(subs, cfg.alpha, cfg.beta)
    return cache[key]


@njit(cache=True)
def _augment_rows_scan(vals, gt_io, inverse, uni, lam_in, tau, select_all, use_inverse,
                       support_mask, background_policy, lambda_floor,
                       aug_out, lam_out, multi_out, active_out, targets_out):
    """Per-row selection, weight aggregation, inverse-CDF sampling, targets."""
    b, k = vals.shape
    n_p = inverse.shape[0]
    counts = np.zeros(n_p)
    for i in range(b):
        for c in range(n_p):
            counts[c] = 0.0
        for j in range(k):
            counts[vals[i, j]] += 1.0
        g = gt_io[i]
        if g >= 0:
            d = 1.0 - counts[g] / k
            multi = select_all or d >= tau
        else:
            if not background_policy:
                active_out[i] = False
                multi_out[i] = False
                continue
            multi = True
        if not multi:
            aug_out[i] = g
            lam_out[i] = 1.0
            multi_out[i] = False
            targets_out[i, g] = 1.0
            continue
        # softmax over aggregated scores, sampled with one uniform variate;
        # unnormalized cumulative scan avoids materializing the weight vector
        m = -np.inf
        for c in range(n_p):
            a_c = counts[c] * inverse[c] if use_inverse else counts[c]
            if (not support_mask or a_c > 0.0) and a_c > m:
                m = a_c
        total = 0.0
        for c in range(n_p):
            a_c = counts[c] * inverse[c] if use_inverse else counts[c]
            if not support_mask or a_c > 0.0:
                total += np.exp(a_c - m)
        target = uni[i] * total
        cum = 0.0
        pick = -1
        for c in range(n_p):
            a_c = counts[c] * inverse[c] if use_inverse else counts[c]
            if not support_mask or a_c > 0.0:
                cum += np.exp(a_c - m)
                pick = c
                if cum > target:
                    break
        aug_out[i] = pick
        multi_out[i] = True
        if g >= 0:
            lam = max(lam_in[i], lambda_floor)
        else:  # background: pure sampled pseudo-label
            lam = 0.0
            gt_io[i] = pick
        lam_out[i] = lam
        targets_out[i, gt_io[i]] += lam
        targets_out[i, pick] += 1.0 - lam


def _augment_rows_numba(vals, gt, inverse, uni, lam_in, cfg: AugmentConfig,
                        select_all, use_inverse):
    b = vals.shape[0]
    n_p = inverse.shape[0]
    gt = gt.copy()
    aug = gt.copy()
    lam = np.ones(b)
    multi = np.zeros(b, dtype=np.bool_)
    active = np.ones(b, dtype=np.bool_)
    targets = np.zeros((b, n_p))
    _augment_rows_scan(vals, gt, inverse, uni, lam_in, cfg.tau, select_all,
                       use_inverse, cfg.support_mask, cfg.background_policy,
                       cfg.lambda_floor, aug, lam, multi, active, targets)
    return gt, aug, lam, multi, active, targets


def _augment_rows_numpy(vals, gt, inverse, uni, lam_in, cfg: AugmentConfig,
                        select_all, use_inverse):
    b, k_eff = vals.shape
    n_p = inverse.shape[0]
    labeled = gt >= 0
    gt = gt.copy()
    aug = gt.copy()
    lam = np.ones(b)
    active = labeled.copy()
    flat = np.arange(b).repeat(k_eff) * n_p + vals.ravel()
    counts = np.bincount(flat, minlength=b * n_p).reshape(b, n_p).astype(np.float64)
    agree = counts[np.arange(b), np.where(labeled, gt, 0)]
    d = 1.0 - agree / k_eff
    if select_all:
        is_multi = labeled.copy()
    else:
        is_multi = labeled & (d >= cfg.tau)
    if cfg.background_policy:
        is_multi |= ~labeled
        active |= ~labeled
    rows = np.flatnonzero(is_multi)
    if rows.size:
        score = inverse if use_inverse else np.ones(n_p)
        a = counts[rows] * score[None, :]
        if cfg.support_mask:
            valid = a > 0.0
        else:
            valid = np.ones_like(a, dtype=bool)
        shifted = a - np.where(valid, a, -np.inf).max(axis=1, keepdims=True)
        e = np.where(valid, np.exp(shifted), 0.0)
        w = e / e.sum(axis=1, keepdims=True)
        u = uni[rows]
        cum = np.cumsum(w, axis=1)
        picks = np.minimum((cum <= u[:, None]).sum(axis=1), n_p - 1)
        bad = w[np.arange(rows.size), picks] == 0.0
        for j in np.flatnonzero(bad):  # u landed on a zero-weight plateau
            picks[j] = categorical_from_uniform(w[j], u[j])
        aug[rows] = picks
        row_labeled = labeled[rows]
        lam[rows[row_labeled]] = np.maximum(lam_in[rows[row_labeled]], cfg.lambda_floor)
        bg_rows = rows[~row_labeled]
        lam[bg_rows] = 0.0  # background: pure sampled pseudo-label
        gt[bg_rows] = aug[bg_rows]
    targets = np.zeros((b, n_p))
    act = np.flatnonzero(active)
    targets[act, gt[act]] += lam[act]
    targets[act, aug[act]] += 1.0 - lam[act]
    return gt, aug, lam, is_multi, active, targets


_augment_rows = _augment_rows_numba if NUMBA_ENABLED else _augment_rows_numpy


@dataclass
class BatchAugmentation:
    """Vectorized per-instance augmentation decisions plus retrieval context.

    Aligned arrays of length B: gt (-1 for background), aug, lam, active
    (participates in the loss), is_multi.  targets holds the mixed label rows.
    """

    gt: np.ndarray
    aug: np.ndarray
    lam: np.ndarray
    is_multi: np.ndarray
    active: np.ndarray
    targets: np.ndarray
    retrieved_idx: np.ndarray
    retrieved_scores: np.ndarray
    r: np.ndarray
    embed_cache: object
    n_selected: int
    n_skipped: int


def augment_instances(model: ModelParameters, batch: Sequence[RelationInstance],
                      bank: MemoryBank, prop: PropensityTable, cfg: AugmentConfig,
                      rng: Substreams, epoch: int = 0, select_all: bool = False,
                      use_inverse: bool = True, gt: Optional[np.ndarray] = None,
                      ids: Optional[np.ndarray] = None) -> BatchAugmentation:
    """Embed, retrieve, select and sample for one batch (vectorized).

    select_all forces every labeled instance into the multi-labeled set (the
    no-selection ablation); use_inverse=False is the constant-propensity
    ablation.  gt/ids may pass precomputed label and id arrays.
    """
    if bank.count == 0:
        raise ValueError("memory bank is empty")
    n_p = prop.inverse.shape[0]
    b = len(batch)
    r, ec = embed_batch(model, *_stack_features(batch))
    idx, scores = query_batch(bank, r, cfg.k)
    k_eff = idx.shape[1]
    if gt is None:
        gt = np.asarray([-1 if inst.predicate is None else inst.predicate for inst in batch],
                        dtype=np.int64)

    if cfg.strategy != "none" and k_eff > 0:
        if ids is None:
            ids = np.asarray([inst.id for inst in batch], dtype=np.int64)
        tables = _draw_tables(rng, cfg)
        tables.ensure(epoch, int(ids.max()))
        gt, aug, lam, is_multi, active, targets = _augment_rows(
            bank.values[idx], gt, prop.inverse, tables.uni[ids], tables.lam[ids],
            cfg, select_all, use_inverse)
    else:
        labeled = gt >= 0
        aug = gt.copy()
        lam = np.ones(b)
        is_multi = np.zeros(b, dtype=bool)
        active = labeled
        targets = np.zeros((b, n_p))
        rows = np.flatnonzero(active)
        targets[rows, gt[rows]] = 1.0

    return BatchAugmentation(gt=gt, aug=aug, lam=lam, is_multi=is_multi, active=active,
                             targets=targets, retrieved_idx=idx, retrieved_scores=scores,
                             r=r, embed_cache=ec, n_selected=int(is_multi.sum()),
                             n_skipped=b - int(active.sum()))


def augment_batch(model: ModelParameters, batch: Sequence[RelationInstance],
                  bank: MemoryBank, prop: PropensityTable, cfg: AugmentConfig,
                  rng: Substreams, epoch: int = 0) -> list:
    """Aligned augmentation decisions for a batch; None marks a skipped instance."""
    ba = augment_instances(model, batch, bank, prop, cfg, rng, epoch)
    n_p = prop.inverse.shape[0]
    labels = []
    for i in range(len(batch)):
        if not ba.active[i]:
            labels.append(None)
        elif ba.is_multi[i]:
            labels.append(AugmentedLabel(
                gt=int(ba.gt[i]), aug=int(ba.aug[i]), lam=float(ba.lam[i]),
                mixed=LabelDistribution(ba.targets[i]), is_multi=True))
        else:
            labels.append(pure_label(int(ba.gt[i]), n_p))
    return labels


def apply_strategy(strategy: str, r: np.ndarray, label: AugmentedLabel,
                   retrieved: Sequence, model: Optional[ModelParameters] = None):
    """Combine one instance's embedding and label per the configured strategy.

    retrieved: list of (BankEntry, score) pairs.  Returns (embedding, label
    distribution).  mixup falls back to label augmentation when no retrieved
    entry carries the sampled class.
    """
    n_p = label.mixed.weights.shape[0]
    if strategy == "none":
        return r, LabelDistribution.one_hot(label.gt, n_p)
    if strategy == "label_aug":
        return r, label.mixed
    if strategy == "feat_aug":
        if model is None or "feataug_W1" not in model.tensors:
            raise ValueError("feat_aug requires a model with the feature-aug MLP")
        mean_onehot = np.zeros(n_p)
        for entry, _ in retrieved:
            mean_onehot[entry.value] += 1.0 / len(retrieved)
        delta = feat_aug_mlp(model, mean_onehot[None, :])[0][0]
        return r + delta, LabelDistribution.one_hot(label.gt, n_p)
    if strategy == "mixup":
        key = None
        for entry, _ in retrieved:
            if entry.value == label.aug:
                key = entry.key.astype(np.float64)
                break
        if key is None:
            log.debug("mixup: no retrieved key of class %d, falling back to label_aug",
                      label.aug)
            return r, label.mixed
        mixed_r = label.lam * r + (1.0 - label.lam) * key
        return mixed_r, label.mixed
    raise ValueError(f"unknown strategy {strategy!r}")


def feat_aug_mlp(model: ModelParameters, mean_onehot: np.ndarray):
    """Forward pass of the retrieved-predicate MLP; returns (delta, cache)."""
    t = model.tensors
    a1 = mean_onehot @ t["feataug_W1"].T + t["feataug_b1"]
    z1 = np.maximum(a1, 0.0)
    delta = z1 @ t["feataug_W2"].T + t["feataug_b2"]
    return delta, (mean_onehot, a1, z1)


def feat_aug_mlp_backward(model: ModelParameters, cache, d_delta: np.ndarray) -> dict:
    t = model.tensors
    mean_onehot, a1, z1 = cache
    grads = {}
    grads["feataug_W2"] = d_delta.T @ z1
    grads["feataug_b2"] = d_delta.sum(axis=0)
    d_z1 = d_delta @ t["feataug_W2"]
    d_a1 = d_z1 * (a1 > 0.0)
    grads["feataug_W1"] = d_a1.T @ mean_onehot
    grads["feataug_b1"] = d_a1.sum(axis=0)
    return grads

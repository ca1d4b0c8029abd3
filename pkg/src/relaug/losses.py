"""Training objectives with analytically derived parameter gradients.

Each public loss returns a LossBundle whose gradient dict mirrors the model's
tensor dict (zeros where a tensor is untouched).  Values are also exposed as
pure functions of the relevant arrays so they can be checked against hand
constructions without a model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LabelDistribution, PropensityTable
from .model import ForwardOutput, ModelParameters, add_grads, embed_backward, head_backward, zero_grads


@dataclass(frozen=True)
class LossConfig:
    gamma_prime: float = 7.0
    reg1_weight: float = 1.0
    reg2_weight: float = 1.0
    ips_enabled: bool = False  # diagnostic objective only; never trained by default

    def __post_init__(self):
        if self.gamma_prime < 0 or self.reg1_weight < 0 or self.reg2_weight < 0:
            raise ValueError("loss weights and margin must be nonnegative")


@dataclass
class LossBundle:
    value: float
    grads: dict


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    return logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy_value(logits: np.ndarray, target: int) -> float:
    return float(-log_softmax(logits)[target])


def _bundle_from_head(model: ModelParameters, out: ForwardOutput, d_logits,
                      d_cbar=None) -> dict:
    ec, hc = out.cache
    grads = zero_grads(model)
    head_grads, d_r = head_backward(model, hc, d_logits, d_cbar_extra=d_cbar)
    add_grads(grads, head_grads)
    if np.any(d_r):
        add_grads(grads, embed_backward(model, ec, d_r))
    return grads


def proto_loss(model: ModelParameters, out: ForwardOutput, gt: int) -> LossBundle:
    """Cross entropy between cosine logits and the ground-truth prototype."""
    value = cross_entropy_value(out.logits, gt)
    d_logits = softmax(out.logits)[None, :].copy()
    d_logits[0, gt] -= 1.0
    return LossBundle(value, _bundle_from_head(model, out, d_logits))


def multi_proto_loss(model: ModelParameters, out: ForwardOutput, gt: int, aug: int,
                     lam: float) -> LossBundle:
    """Mixture of the ground-truth and augmented prototype cross entropies."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    logp = log_softmax(out.logits)
    value = float(lam * -logp[gt] + (1.0 - lam) * -logp[aug])
    d_logits = softmax(out.logits)[None, :].copy()
    d_logits[0, gt] -= lam
    d_logits[0, aug] -= 1.0 - lam
    return LossBundle(value, _bundle_from_head(model, out, d_logits))


def similarity_reg_value(c_bar: np.ndarray) -> float:
    """sqrt of the summed squared off-diagonal prototype cosines (ordered pairs)."""
    g = c_bar @ c_bar.T
    np.fill_diagonal(g, 0.0)
    return float(np.sqrt((g * g).sum()))


def similarity_reg(model: ModelParameters, out: ForwardOutput) -> LossBundle:
    g = out.c_bar @ out.c_bar.T
    np.fill_diagonal(g, 0.0)
    s = float((g * g).sum())
    value = float(np.sqrt(s))
    if s == 0.0:
        return LossBundle(0.0, zero_grads(model))
    d_cbar = (2.0 / value) * (g @ out.c_bar)
    zeros = np.zeros((1, out.logits.shape[0]))
    return LossBundle(value, _bundle_from_head(model, out, zeros, d_cbar=d_cbar))


def distance_reg_value(c_bar: np.ndarray, gamma_prime: float) -> float:
    """Hinge on the mean squared pairwise prototype distance (ordered pairs)."""
    n_p = c_bar.shape[0]
    sq = ((c_bar[:, None, :] - c_bar[None, :, :]) ** 2).sum(axis=2)
    return float(max(gamma_prime - sq.sum() / n_p, 0.0))


def distance_reg(model: ModelParameters, out: ForwardOutput, gamma_prime: float) -> LossBundle:
    value = distance_reg_value(out.c_bar, gamma_prime)
    if value == 0.0:
        return LossBundle(0.0, zero_grads(model))
    n_p = out.c_bar.shape[0]
    d_cbar = -(4.0 / n_p) * (n_p * out.c_bar - out.c_bar.sum(axis=0, keepdims=True))
    zeros = np.zeros((1, n_p))
    return LossBundle(value, _bundle_from_head(model, out, zeros, d_cbar=d_cbar))


def ips_value(probs: np.ndarray, observed: LabelDistribution, prop: PropensityTable) -> float:
    if not observed.is_one_hot:
        raise ValueError("inverse-propensity loss is undefined for background labels")
    gt = observed.argmax()
    return float(-prop.inverse[gt] * np.log(probs[gt]))


def ips_loss(model: ModelParameters, out: ForwardOutput, observed: LabelDistribution,
             prop: PropensityTable) -> LossBundle:
    """Inverse-propensity weighted cross entropy (diagnostic/ablation objective)."""
    if not observed.is_one_hot:
        raise ValueError("inverse-propensity loss is undefined for background labels")
    gt = observed.argmax()
    weight = float(prop.inverse[gt])
    value = weight * cross_entropy_value(out.logits, gt)
    d_logits = softmax(out.logits)[None, :].copy()
    d_logits[0, gt] -= 1.0
    d_logits *= weight
    return LossBundle(value, _bundle_from_head(model, out, d_logits))


def final_loss(model: ModelParameters, out: ForwardOutput, gt: int, aug: int, lam: float,
               cfg: LossConfig) -> LossBundle:
    """Mixed prototype loss plus both prototype regularizers."""
    mp = multi_proto_loss(model, out, gt, aug, lam)
    r1 = similarity_reg(model, out)
    r2 = distance_reg(model, out, cfg.gamma_prime)
    value = mp.value + cfg.reg1_weight * r1.value + cfg.reg2_weight * r2.value
    grads = {
        k: mp.grads[k] + cfg.reg1_weight * r1.grads[k] + cfg.reg2_weight * r2.grads[k]
        for k in mp.grads
    }
    return LossBundle(value, grads)


# ---------------------------------------------------------------------------
# Batched pieces used by the training loop


def batch_target_ce(logits: np.ndarray, targets: np.ndarray, active: np.ndarray):
    """Mean cross entropy against soft target rows over active instances.

    Returns (value, d_logits).  Inactive rows contribute nothing.
    """
    n_active = int(active.sum())
    if n_active == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    per = -(targets * logp).sum(axis=1)
    value = float(per[active].sum() / n_active)
    d_logits = (softmax(logits) - targets) * (active[:, None] / n_active)
    return value, d_logits


def batch_ips_value(logits: np.ndarray, gt: np.ndarray, active: np.ndarray,
                    inverse: np.ndarray) -> float:
    """Mean inverse-propensity weighted CE over labeled rows (diagnostic only)."""
    rows = np.flatnonzero(active & (gt >= 0))
    if rows.size == 0:
        return 0.0
    logp = log_softmax(logits[rows])
    per = -logp[np.arange(rows.size), gt[rows]] * inverse[gt[rows]]
    return float(per.mean())


def batch_reg_terms(c_bar: np.ndarray, cfg: LossConfig):
    """reg values and the combined d_cbar for a shared prototype set.

    Assumes unit-normalized rows, so pairwise squared distances reduce to
    2 - 2 cos through the Gram matrix already needed for the first term.
    """
    n_p = c_bar.shape[0]
    g = c_bar @ c_bar.T
    np.fill_diagonal(g, 0.0)
    s = float((g * g).sum())
    r1 = float(np.sqrt(s))
    d_cbar = np.zeros_like(c_bar)
    if s > 0.0 and cfg.reg1_weight > 0.0:
        d_cbar += cfg.reg1_weight * (2.0 / r1) * (g @ c_bar)
    dist_sq = 2.0 * n_p * (n_p - 1) - 2.0 * float(g.sum())
    r2 = max(cfg.gamma_prime - dist_sq / n_p, 0.0)
    if r2 > 0.0 and cfg.reg2_weight > 0.0:
        d_cbar += cfg.reg2_weight * -(4.0 / n_p) * (n_p * c_bar - c_bar.sum(axis=0, keepdims=True))
    return r1, r2, d_cbar

"""
Multi-label losses on logits with analytic gradients.

Both losses sum over every entry of `logits` (classes, and the batch axis
when one is present); callers average over the batch themselves.
"""
from typing import Tuple

import numpy as np
from scipy.special import expit, log_expit

from app.core.errors import ConfigError, ShapeError
from app.models.params import LossKind
from app.schemas import LossConfig


def _prepare(logits, labels) -> Tuple[np.ndarray, np.ndarray]:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if z.shape != y.shape:
        raise ShapeError(f"logits {z.shape} and labels {y.shape} differ in shape")
    return z, y.astype(bool)


def bce_loss(logits, labels, cfg: LossConfig = None) -> Tuple[float, np.ndarray]:
    """Binary cross entropy in log-sigmoid form; gradient sigma(z) - y."""
    z, positive = _prepare(logits, labels)
    terms = np.where(positive, -log_expit(z), -log_expit(-z))
    grad = np.where(positive, -expit(-z), expit(z))
    return float(terms.sum()), grad


def asl_loss(logits, labels, cfg: LossConfig) -> Tuple[float, np.ndarray]:
    """
    Asymmetric loss.

    positives: -(1 - p)^g+ * log(p)
    negatives: -(p_m)^g- * log(1 - p_m), with p_m = max(p - clip, 0)

    With g+ = g- = 0 and clip = 0 every term is computed exactly as bce_loss
    computes it, so the two agree bit for bit.
    """
    z, positive = _prepare(logits, labels)
    gamma_pos, gamma_neg, clip = cfg.gamma_pos, cfg.gamma_neg, cfg.clip

    p = expit(z)
    one_minus_p = expit(-z)
    log_p = log_expit(z)

    # positives
    focus_pos = one_minus_p ** gamma_pos if gamma_pos else np.ones_like(z)
    pos_terms = focus_pos * -log_p
    pos_grad = focus_pos * (gamma_pos * p * log_p - one_minus_p)

    # negatives
    if clip == 0.0:
        p_m = p
        log_one_minus = log_expit(-z)
        # p (1 - p) / (1 - p_m) reduces to p without the clip
        chain = p
    else:
        p_m = np.maximum(p - clip, 0.0)
        one_minus_pm = np.maximum(1.0 - p_m, cfg.eps_log)
        log_one_minus = np.log(one_minus_pm)
        chain = p * one_minus_p / one_minus_pm
    active = p_m > 0.0

    if gamma_neg:
        safe_pm = np.where(active, p_m, 1.0)
        focus_neg = np.where(active, safe_pm ** gamma_neg, 0.0)
        focus_slope = np.where(active, gamma_neg * safe_pm ** (gamma_neg - 1.0), 0.0)
        neg_grad = chain * focus_neg - p * one_minus_p * focus_slope * log_one_minus
    else:
        focus_neg = np.ones_like(z)
        neg_grad = chain
    neg_terms = focus_neg * -log_one_minus
    # right-continuous choice at the clip kink: no gradient while p <= clip
    neg_grad = np.where(active, neg_grad, 0.0)
    neg_terms = np.where(active, neg_terms, 0.0) if clip else neg_terms

    terms = np.where(positive, pos_terms, neg_terms)
    grad = np.where(positive, pos_grad, neg_grad)
    return float(terms.sum()), grad


def compute_loss(cfg: LossConfig, logits, labels) -> Tuple[float, np.ndarray]:
    """Dispatch on cfg.kind; returns (loss, dloss/dlogits)."""
    if cfg.kind == LossKind.BCE:
        return bce_loss(logits, labels, cfg)
    if cfg.kind == LossKind.ASL:
        return asl_loss(logits, labels, cfg)
    raise ConfigError(f"unknown loss kind: {cfg.kind!r}")


def loss_gradient(cfg: LossConfig, logits, labels) -> np.ndarray:
    return compute_loss(cfg, logits, labels)[1]

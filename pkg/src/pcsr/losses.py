"""Loss functions: bidirectional hardest-negative triplet with per-pair
adaptive margins, one-hot cross-entropy, batch-mean entropy regularizer,
symmetric generalized cross-entropy, and caption rematching.

Every function returns its analytic gradient next to the value. Inputs that
are selected by an argmax (cross-entropy targets, GCE index picks, margins,
rematch assignments) are treated as constants of the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .encoders import distribution_similarity_matrix

_CLAMP = 1e-12


@dataclass
class LossWeights:
    """Composite-loss weights and margin/robustness constants."""

    lambda_t: float = 1.0
    lambda_ce: float = 1.0
    lambda_gce: float = 1.0
    lambda_en: float = 10.0
    m: float = 10.0
    alpha: float = 0.2
    gamma: float = 0.7

    def __post_init__(self):
        if self.m <= 1.0:
            raise ConfigurationError("margin base m must be > 1")
        if self.alpha <= 0.0:
            raise ConfigurationError("base margin alpha must be > 0")
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigurationError("gamma must be in (0, 1]")


def adaptive_margin(sp, m: float, alpha: float):
    """Margin (m^sp - 1) / (m - 1) * alpha for sp in [0, 1].

    Exponential in the distribution similarity: 0 at sp=0, alpha at sp=1,
    strictly increasing in between. Accepts scalars or arrays.
    """
    if m <= 1.0:
        raise ConfigurationError("margin base m must be > 1")
    if alpha <= 0.0:
        raise ConfigurationError("base margin alpha must be > 0")
    sp_arr = np.asarray(sp, dtype=np.float64)
    if np.any(sp_arr < -1e-9) or np.any(sp_arr > 1.0 + 1e-9):
        raise ConfigurationError("similarity scores must lie in [0, 1]")
    sp_arr = np.clip(sp_arr, 0.0, 1.0)
    out = (np.power(m, sp_arr) - 1.0) / (m - 1.0) * alpha
    return float(out) if np.isscalar(sp) else out


def triplet_loss(sim: np.ndarray, margins) -> tuple[float, np.ndarray]:
    """Bidirectional hinge triplet loss over a similarity matrix whose
    diagonal holds the positives, with hardest in-batch negatives.

    Returns (loss, dL/dsim). ``margins`` is a scalar or a per-pair vector.
    Argmax ties go to the lowest index; inactive hinges contribute nothing.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ConfigurationError("similarity matrix must be square")
    n = sim.shape[0]
    if n < 2:
        raise ConfigurationError("triplet loss needs at least 2 pairs")
    margins = np.broadcast_to(np.asarray(margins, dtype=np.float64), (n,))
    pos = np.diag(sim).copy()
    off = sim.copy()
    np.fill_diagonal(off, -np.inf)
    ht_idx = off.argmax(axis=1)          # hardest caption for each image
    hi_idx = off.argmax(axis=0)          # hardest image for each caption
    h_img = margins - pos + off[np.arange(n), ht_idx]
    h_txt = margins - pos + off[hi_idx, np.arange(n)]
    loss = float(np.maximum(h_img, 0.0).sum() + np.maximum(h_txt, 0.0).sum())
    grad = np.zeros_like(sim)
    act = h_img > 0.0
    rows = np.flatnonzero(act)
    np.add.at(grad, (rows, rows), -1.0)
    np.add.at(grad, (rows, ht_idx[rows]), 1.0)
    act = h_txt > 0.0
    cols = np.flatnonzero(act)
    np.add.at(grad, (cols, cols), -1.0)
    np.add.at(grad, (hi_idx[cols], cols), 1.0)
    return loss, grad


def ce_loss(probs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean one-hot cross-entropy -log p[target], probabilities clamped
    at 1e-12. Returns (loss, dL/dprobs)."""
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or targets.shape != (probs.shape[0],):
        raise ConfigurationError("need (B, K) probs and (B,) targets")
    if targets.min() < 0 or targets.max() >= probs.shape[1]:
        raise ConfigurationError("target label outside [0, K)")
    b = probs.shape[0]
    picked = probs[np.arange(b), targets]
    loss = float(np.mean(-np.log(np.maximum(picked, _CLAMP))))
    grad = np.zeros_like(probs)
    live = picked >= _CLAMP
    grad[np.flatnonzero(live), targets[live]] = -1.0 / (b * picked[live])
    return loss, grad


def entropy_reg(probs: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch-mean entropy term -(1/B) sum_i p_i . log(mean_j p_j).

    Equals the entropy of the batch-mean distribution: log K for a uniform
    mean, 0 when the whole batch agrees on one class (0 * log 0 reads as 0
    under the 1e-12 clamp). Returns (loss, dL/dprobs)."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ConfigurationError("need a (B, K) probability batch")
    b = probs.shape[0]
    mean = probs.mean(axis=0)
    live = mean >= _CLAMP
    log_mean = np.log(np.maximum(mean, _CLAMP))
    loss = float(-(mean * log_mean).sum())
    row = -(log_mean + live.astype(np.float64)) / b
    return loss, np.tile(row, (b, 1))


def gce_loss(p: np.ndarray, q: np.ndarray, gamma: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Symmetric generalized cross-entropy between image and text
    pseudo-distributions: mean of (1 - p[argmax q]^gamma) / gamma plus the
    mirrored text term. Returns (loss, dL/dp, dL/dq)."""
    if not (0.0 < gamma <= 1.0):
        raise ConfigurationError("gamma must be in (0, 1]")
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2:
        raise ConfigurationError("p and q must be matching (B, K) batches")
    b = p.shape[0]
    rows = np.arange(b)
    q_hat = q.argmax(axis=1)
    p_hat = p.argmax(axis=1)
    a = np.maximum(p[rows, q_hat], _CLAMP)
    c = np.maximum(q[rows, p_hat], _CLAMP)
    loss = float(np.mean((1.0 - a ** gamma) / gamma + (1.0 - c ** gamma) / gamma))
    dp = np.zeros_like(p)
    dq = np.zeros_like(q)
    live_a = p[rows, q_hat] >= _CLAMP
    live_c = q[rows, p_hat] >= _CLAMP
    dp[rows[live_a], q_hat[live_a]] = -(a[live_a] ** (gamma - 1.0)) / b
    dq[rows[live_c], p_hat[live_c]] = -(c[live_c] ** (gamma - 1.0)) / b
    return loss, dp, dq


def rematch_captions(refinable_probs: np.ndarray, pool_probs: np.ndarray) -> np.ndarray:
    """Most similar clean caption (by pseudo-distribution cosine) for each
    refinable image. Ties go to the lowest pool index."""
    pool_probs = np.asarray(pool_probs, dtype=np.float64)
    if pool_probs.ndim != 2 or pool_probs.shape[0] == 0:
        raise ConfigurationError("rematch pool is empty")
    sims = distribution_similarity_matrix(np.atleast_2d(refinable_probs), pool_probs)
    return sims.argmax(axis=1)


def clean_total(triplet: float, ce: float, en: float, w: LossWeights) -> float:
    """Clean-subset composite: lambda_t * triplet + lambda_ce * ce
    - lambda_en * en.

    The entropy term enters negatively: training rewards a high-entropy
    batch-mean prediction, which keeps the pseudo-classifier from
    collapsing onto a handful of classes.
    """
    return w.lambda_t * triplet + w.lambda_ce * ce - w.lambda_en * en


def ambiguous_total(triplet: float, gce: float, en: float, w: LossWeights) -> float:
    """Ambiguous-subset composite: lambda_t * triplet + lambda_gce * gce
    - lambda_en * en (entropy term negative, as in the clean composite)."""
    return w.lambda_t * triplet + w.lambda_gce * gce - w.lambda_en * en

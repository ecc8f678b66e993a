"""Confidence-based sample division and consistency-gated refinement.

Per epoch the trainer scores every training pair with a normalized
hardest-negative triplet loss, fits a two-component 1-D GMM over the scores
(low-mean component = clean), then splits the noisy remainder into refinable
and ambiguous sets by prediction-consistency score against an adaptive
threshold driven by a closed-loop controller.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import (ConfigurationError, DegenerateInputError, LogicError,
                     NumericError)
from .encoders import ModelParams, similarity_matrix

_SIGMA_FLOOR = 1e-4
_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# per-pair loss
# ---------------------------------------------------------------------------

def per_pair_loss(params: ModelParams, image_feats: np.ndarray,
                  text_feats: np.ndarray, margin: float,
                  normalize: bool = True) -> np.ndarray:
    """Fixed-margin hardest-negative triplet loss per pair, min-max
    normalized to [0, 1] across the batch.

    The negative pool is the full index set passed in. If every raw loss is
    identical the normalized losses are all zero.
    """
    n = image_feats.shape[0]
    if n < 2:
        raise ConfigurationError("per-pair loss needs at least 2 pairs")
    if text_feats.shape[0] != n:
        raise ConfigurationError("image/text counts differ")
    U = params.embed_image(image_feats)
    V = params.embed_text(text_feats)
    S = similarity_matrix(U, V)
    pos = np.diag(S).copy()
    off = S.copy()
    np.fill_diagonal(off, -np.inf)
    hardest_text = off.max(axis=1)
    hardest_image = off.max(axis=0)
    raw = (np.maximum(margin - pos + hardest_text, 0.0)
           + np.maximum(margin - pos + hardest_image, 0.0))
    if not normalize:
        return raw
    lo, hi = raw.min(), raw.max()
    if hi - lo == 0.0:
        return np.zeros(n)
    return (raw - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# two-component GMM
# ---------------------------------------------------------------------------

@dataclass
class GmmModel:
    """1-D two-component mixture sorted by mean (component 0 = clean)."""

    mu: np.ndarray
    sigma: np.ndarray
    pi: np.ndarray
    converged: bool
    ll_history: list[float] = field(default_factory=list)

    def _log_joint(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        return (np.log(self.pi)
                - np.log(self.sigma)
                - 0.5 * _LOG_2PI
                - 0.5 * ((x - self.mu) / self.sigma) ** 2)

    def posterior_clean(self, x: np.ndarray) -> np.ndarray:
        """P(low-mean component | x) for each value."""
        lj = self._log_joint(np.atleast_1d(x))
        mx = lj.max(axis=1, keepdims=True)
        num = np.exp(lj - mx)
        return num[:, 0] / num.sum(axis=1)


def fit_gmm_em(losses: np.ndarray, max_iters: int = 100, tol: float = 1e-6) -> GmmModel:
    """EM fit of a two-component 1-D GMM over per-pair losses.

    Init: means at the 25th/75th percentiles, both sigmas at half the sample
    std, mixing weights (0.5, 0.5). Sigmas are floored at 1e-4 each M-step.
    Stops when the mean log-likelihood gain drops below ``tol``; returns the
    best-so-far fit with ``converged=False`` if ``max_iters`` is exhausted.
    """
    x = np.asarray(losses, dtype=np.float64)
    if x.ndim != 1 or len(x) < 16:
        raise ConfigurationError("GMM fit needs a 1-D sample of at least 16 losses")
    if not np.isfinite(x).all():
        raise NumericError("losses contain non-finite values")
    if np.ptp(x) == 0.0:
        raise DegenerateInputError("all losses identical, nothing to separate")
    if max_iters < 1:
        raise ConfigurationError("max_iters must be >= 1")
    mu = np.array([np.percentile(x, 25), np.percentile(x, 75)])
    sigma = np.full(2, max(0.5 * x.std(), _SIGMA_FLOOR))
    pi = np.array([0.5, 0.5])
    model = GmmModel(mu=mu, sigma=sigma, pi=pi, converged=False)
    prev_ll = -np.inf
    history: list[float] = []
    for _ in range(max_iters):
        # E-step in log space
        lj = model._log_joint(x)
        mx = lj.max(axis=1, keepdims=True)
        e = np.exp(lj - mx)
        norm = e.sum(axis=1, keepdims=True)
        resp = e / norm
        ll = float(np.mean(mx[:, 0] + np.log(norm[:, 0])))
        history.append(ll)
        # M-step
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        model.pi = nk / len(x)
        model.mu = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - model.mu) ** 2).sum(axis=0) / nk
        model.sigma = np.maximum(np.sqrt(var), _SIGMA_FLOOR)
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            model.converged = True
            break
        prev_ll = ll
    model.ll_history = history
    if model.mu[0] > model.mu[1]:
        order = np.array([1, 0])
        model.mu = model.mu[order]
        model.sigma = model.sigma[order]
        model.pi = model.pi[order]
    return model


def split_by_confidence(gmm: GmmModel, losses: np.ndarray,
                        threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Positions of clean (posterior >= threshold) and noisy losses."""
    post = gmm.posterior_clean(losses)
    clean = np.flatnonzero(post >= threshold)
    noisy = np.flatnonzero(post < threshold)
    return clean, noisy


# ---------------------------------------------------------------------------
# prediction-consistency tracking
# ---------------------------------------------------------------------------

class ConsistencyTracker:
    """Per-image histogram of predicted pseudo-labels across epochs.

    Histograms accumulate for the whole run and are never reset. The
    consistency score of an image is the gap between its most frequent and
    second most frequent predicted label counts.
    """

    def __init__(self, n_classes: int):
        if n_classes < 1:
            raise ConfigurationError("n_classes must be positive")
        self.n_classes = n_classes
        self.counts: dict[int, Counter] = {}
        self.epochs_recorded = 0

    def record(self, indices, labels) -> None:
        """Record one epoch's predicted labels for the given images."""
        indices = np.asarray(indices, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        if indices.shape != labels.shape:
            raise LogicError("indices and labels must align")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise LogicError("predicted label outside [0, n_classes)")
        for i, lab in zip(indices.tolist(), labels.tolist()):
            self.counts.setdefault(i, Counter())[lab] += 1
        self.epochs_recorded += 1

    def pcs(self, i: int) -> int:
        """Gap between the top two label counts; 0 for unseen images."""
        hist = self.counts.get(int(i))
        if not hist:
            return 0
        vals = sorted(hist.values(), reverse=True)
        second = vals[1] if len(vals) > 1 else 0
        return vals[0] - second

    def pcs_array(self, indices) -> np.ndarray:
        return np.array([self.pcs(i) for i in np.asarray(indices)], dtype=np.int64)


# ---------------------------------------------------------------------------
# adaptive threshold controller
# ---------------------------------------------------------------------------

@dataclass
class ThresholdController:
    """Closed-loop consistency threshold tracking a ramping utilization target.

    Each update moves the threshold against the utilization error
    (k * (target - current)) and smooths the move with an EMA of rate beta.
    The threshold never goes below zero.
    """

    tau: float = 0.0
    lambda_min: float = 0.4
    lambda_max: float = 0.9
    k: float = 0.2
    beta: float = 0.7

    def __post_init__(self):
        if not (0.0 <= self.lambda_min <= self.lambda_max <= 1.0):
            raise ConfigurationError("need 0 <= lambda_min <= lambda_max <= 1")
        if not (0.0 < self.beta <= 1.0):
            raise ConfigurationError("beta must be in (0, 1]")
        if self.k < 0 or self.tau < 0:
            raise ConfigurationError("k and tau must be >= 0")

    def lambda_target(self, t: int, total: int) -> float:
        """Linear ramp from lambda_min to lambda_max over the run."""
        if total < 1 or not (0 <= t <= total):
            raise ConfigurationError(f"epoch {t} outside [0, {total}]")
        return self.lambda_min + (self.lambda_max - self.lambda_min) * t / total

    def update(self, lambda_current: float, t: int, total: int) -> float:
        """One feedback step; mutates and returns the stored threshold."""
        if not (0.0 <= lambda_current <= 1.0):
            raise ConfigurationError("lambda_current must be in [0, 1]")
        target = self.lambda_target(t, total)
        tau_target = self.tau - self.k * (target - lambda_current)
        self.tau = max((1.0 - self.beta) * self.tau + self.beta * tau_target, 0.0)
        return self.tau


def partition_noisy(noisy_indices, tracker: ConsistencyTracker,
                    tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Split noisy indices into (refinable, ambiguous) by PCS >= tau."""
    noisy_indices = np.asarray(noisy_indices, dtype=np.int64)
    if len(noisy_indices) == 0:
        return noisy_indices.copy(), noisy_indices.copy()
    scores = tracker.pcs_array(noisy_indices)
    keep = scores >= tau
    return noisy_indices[keep], noisy_indices[~keep]


@dataclass
class DivisionResult:
    """One epoch's sample division over a training index set."""

    clean: np.ndarray
    refinable: np.ndarray
    ambiguous: np.ndarray
    clean_posterior: np.ndarray
    indices: np.ndarray

    def sizes(self) -> tuple[int, int, int]:
        return len(self.clean), len(self.refinable), len(self.ambiguous)

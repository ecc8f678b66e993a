"""Retrieval metrics and division-quality audits."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .data import PairDataset
from .division import DivisionResult
from .encoders import ModelParams, similarity_matrix
from .errors import ConfigurationError, LogicError


def recall_at_k(sim: np.ndarray, relevant: list, k: int) -> float:
    """Percentage of queries whose top-k gallery rows (descending similarity,
    ties broken toward lower index) intersect their relevant set."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2:
        raise ConfigurationError("similarity matrix must be 2-D")
    n_q, n_g = sim.shape
    if not (1 <= k <= n_g):
        raise ConfigurationError(f"k must be in [1, {n_g}], got {k}")
    if len(relevant) != n_q:
        raise LogicError("one relevant set required per query")
    hits = 0
    for row, rel in zip(sim, relevant):
        rel = np.asarray(list(rel), dtype=np.int64)
        if rel.size == 0:
            raise LogicError("empty relevant set for a query")
        top = np.argsort(-row, kind="stable")[:k]
        hits += bool(np.isin(top, rel).any())
    return 100.0 * hits / n_q


@dataclass
class RetrievalReport:
    """Recall@{1,5,10} in both directions plus their sum."""

    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    rsum: float
    n_queries: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def table(self) -> str:
        """Plain-text table, one row per retrieval direction."""
        header = f"{'direction':<12}{'R@1':>8}{'R@5':>8}{'R@10':>8}"
        rows = [header, "-" * len(header),
                f"{'img->txt':<12}{self.i2t_r1:>8.1f}{self.i2t_r5:>8.1f}{self.i2t_r10:>8.1f}",
                f"{'txt->img':<12}{self.t2i_r1:>8.1f}{self.t2i_r5:>8.1f}{self.t2i_r10:>8.1f}",
                f"rsum {self.rsum:.1f}"]
        return "\n".join(rows)


def evaluate(params: ModelParams, ds: PairDataset, image_indices) -> RetrievalReport:
    """Bidirectional retrieval over the given images and all their captions."""
    image_indices = np.asarray(image_indices, dtype=np.int64)
    if len(image_indices) == 0:
        raise ConfigurationError("cannot evaluate an empty index set")
    caption_ids = np.unique(np.concatenate(
        [ds.caption_indices(int(i)) for i in image_indices]))
    cap_pos = {int(j): pos for pos, j in enumerate(caption_ids)}
    img_pos = {int(i): pos for pos, i in enumerate(image_indices)}
    U = params.embed_image(ds.image_feats[image_indices])
    V = params.embed_text(ds.text_feats[caption_ids])
    sim = similarity_matrix(U, V)
    i2t_rel = [np.array([cap_pos[int(j)] for j in ds.caption_indices(int(i))])
               for i in image_indices]
    t2i_rel = [np.array([img_pos[ds.image_of_caption(int(j))]]) for j in caption_ids]
    ks = (1, 5, 10)
    i2t = [recall_at_k(sim, i2t_rel, k) for k in ks]
    t2i = [recall_at_k(sim.T, t2i_rel, k) for k in ks]
    return RetrievalReport(i2t_r1=i2t[0], i2t_r5=i2t[1], i2t_r10=i2t[2],
                           t2i_r1=t2i[0], t2i_r5=t2i[1], t2i_r10=t2i[2],
                           rsum=sum(i2t) + sum(t2i), n_queries=len(image_indices))


@dataclass
class DivisionAudit:
    """Division quality against the ground-truth corruption mask."""

    clean_precision: float
    clean_recall: float
    corrupted_in_refinable: float
    corrupted_in_ambiguous: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def audit_division(division: DivisionResult, corruption_mask: np.ndarray) -> DivisionAudit:
    """Precision/recall of the clean split plus where corrupted pairs landed.

    ``corruption_mask`` is indexed by dataset position and must cover every
    index the division references.
    """
    mask = np.asarray(corruption_mask, dtype=bool)
    if len(division.indices) and division.indices.max() >= len(mask):
        raise LogicError("corruption mask shorter than dataset indices")
    actually_clean = ~mask
    n_clean_truth = int(actually_clean[division.indices].sum())
    n_corrupt_truth = int(mask[division.indices].sum())
    in_clean = int(actually_clean[division.clean].sum())
    precision = in_clean / len(division.clean) if len(division.clean) else 0.0
    recall = in_clean / n_clean_truth if n_clean_truth else 0.0
    in_ref = int(mask[division.refinable].sum())
    in_amb = int(mask[division.ambiguous].sum())
    frac_ref = in_ref / n_corrupt_truth if n_corrupt_truth else 0.0
    frac_amb = in_amb / n_corrupt_truth if n_corrupt_truth else 0.0
    return DivisionAudit(clean_precision=precision, clean_recall=recall,
                         corrupted_in_refinable=frac_ref,
                         corrupted_in_ambiguous=frac_amb)

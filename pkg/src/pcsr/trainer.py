"""Three-stage training pipeline.

After a fixed-margin warmup on all pairs, every epoch (1) scores pairs and
fits the confidence GMM, (2) records pseudo-label predictions and updates the
consistency threshold through the closed-loop controller, (3) partitions
noisy pairs into refinable/ambiguous, and (4) optimizes per stage: clean
pairs only, then clean + rematched refinable, then all three subsets.

The classifier head is updated exclusively from clean batches and carries
its own Adam state so momentum from clean steps cannot leak into
refinable/ambiguous updates. Gradients from ambiguous batches flow through
the frozen head into the encoders.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import PairDataset, SplitSpec, batch_iter, split_indices
from .division import (ConsistencyTracker, DivisionResult, ThresholdController,
                       fit_gmm_em, partition_noisy, per_pair_loss,
                       split_by_confidence)
from .encoders import ModelParams, save_checkpoint
from .errors import ConfigurationError, TrainingError
from .evaluation import audit_division, evaluate
from .losses import (LossWeights, adaptive_margin, ambiguous_total, ce_loss,
                     clean_total, entropy_reg, gce_loss, rematch_captions,
                     triplet_loss)
from .numerics import (AdamState, adam_step, derive_seed, linear_backward,
                       linear_forward, softmax, softmax_backward)


@dataclass
class TrainConfig:
    """Full training configuration; defaults are the stock recipe."""

    seed: int = 0
    k_classes: int = 256
    batch_size: int = 128
    warmup_epochs: int = 5
    total_epochs: int = 50
    stage2_start: int = 26
    stage3_start: int = 41
    lr: float = 1e-3
    head_lr: float = 1e-2
    d_hidden: int = 128
    d_embed: int = 64
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    lambda_t: float = 1.0
    lambda_ce: float = 1.0
    lambda_gce: float = 1.0
    lambda_en: float = 10.0
    margin_m: float = 10.0
    margin_alpha: float = 0.2
    gce_gamma: float = 0.7
    ctrl_k: float = 0.2
    ctrl_beta: float = 0.7
    lambda_min: float = 0.4
    lambda_max: float = 0.9
    tau0: float = 0.0
    gmm_max_iters: int = 100
    gmm_tol: float = 1e-6
    checkpoint_every: int = 0
    division_mode: str = "gmm"
    use_refinable: bool = True
    use_ambiguous: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.total_epochs < self.warmup_epochs:
            raise ConfigurationError("total_epochs must be >= warmup_epochs")
        if self.total_epochs < 1 or self.warmup_epochs < 0:
            raise ConfigurationError("epoch counts out of range")
        if not (1 <= self.stage2_start <= self.total_epochs + 1):
            raise ConfigurationError("stage2_start outside [1, total_epochs + 1]")
        if not (self.stage2_start <= self.stage3_start <= self.total_epochs + 1):
            raise ConfigurationError("stage3_start must be in [stage2_start, total_epochs + 1]")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2")
        if self.lr <= 0 or self.head_lr <= 0:
            raise ConfigurationError("lr and head_lr must be positive")
        if self.division_mode not in ("gmm", "all-clean"):
            raise ConfigurationError(f"unknown division_mode {self.division_mode!r}")
        if min(self.k_classes, self.d_hidden, self.d_embed) < 1:
            raise ConfigurationError("model dims must be positive")
        self.weights()   # validates loss constants
        self.controller()

    def weights(self) -> LossWeights:
        return LossWeights(lambda_t=self.lambda_t, lambda_ce=self.lambda_ce,
                           lambda_gce=self.lambda_gce, lambda_en=self.lambda_en,
                           m=self.margin_m, alpha=self.margin_alpha,
                           gamma=self.gce_gamma)

    def controller(self) -> ThresholdController:
        return ThresholdController(tau=self.tau0, lambda_min=self.lambda_min,
                                   lambda_max=self.lambda_max, k=self.ctrl_k,
                                   beta=self.ctrl_beta)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigurationError(f"unknown config key: {key}")
        return cls(**values)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Flat JSON object mapping field names to values."""
        try:
            values = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config file is not valid JSON: {exc}") from None
        if not isinstance(values, dict):
            raise ConfigurationError("config file must hold a flat JSON object")
        return cls.from_dict(values)

    def with_overrides(self, pairs: list[str]) -> "TrainConfig":
        """Apply repeatable key=value overrides (values parsed as JSON when
        possible, left as strings otherwise)."""
        values = self.to_dict()
        for item in pairs:
            if "=" not in item:
                raise ConfigurationError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                values[key.strip()] = json.loads(raw)
            except json.JSONDecodeError:
                values[key.strip()] = raw
        return TrainConfig.from_dict(values)


@dataclass
class EpochReport:
    """Everything measured in one post-warmup epoch."""

    epoch: int
    stage: int
    tau: float
    lambda_current: float
    lambda_target: float
    n_clean: int
    n_refinable: int
    n_ambiguous: int
    loss_clean: float | None
    loss_refinable: float | None
    loss_ambiguous: float | None
    division_precision: float
    division_recall: float
    corrupted_in_refinable: float
    corrupted_in_ambiguous: float
    val: dict | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    reports: list[EpochReport]
    split: SplitSpec
    warmup_losses: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# batch losses (forward + manual backward into parameter buffers)
# ---------------------------------------------------------------------------

def _pair_margins(params: ModelParams, U: np.ndarray, V: np.ndarray,
                  w: LossWeights) -> np.ndarray:
    """Adaptive margins from the scored pair's own pseudo-distributions.

    Treated as constants of the loss (no gradient flows through them).
    """
    P = params.classify_probs(U)
    Q = params.classify_probs(V)
    num = (P * Q).sum(axis=1)
    sp = np.clip(num / (np.linalg.norm(P, axis=1) * np.linalg.norm(Q, axis=1)), 0.0, 1.0)
    return adaptive_margin(sp, w.m, w.alpha)


def triplet_batch_loss(params: ModelParams, img: np.ndarray, txt: np.ndarray,
                       margins) -> dict:
    """Triplet-only objective (warmup and refinable batches). Accumulates
    tower gradients; the classifier head is untouched."""
    U, cache_i = params.f.forward(img)
    V, cache_t = params.g.forward(txt)
    t_val, d_sim = triplet_loss(U @ V.T, margins)
    params.f.backward(cache_i, d_sim @ V)
    params.g.backward(cache_t, d_sim.T @ U)
    return {"total": t_val, "triplet": t_val}


def clean_batch_loss(params: ModelParams, img: np.ndarray, txt: np.ndarray,
                     w: LossWeights, margins=None, targets=None) -> dict:
    """Clean-subset composite: adaptive-margin triplet + cross-entropy against
    text pseudo-labels + entropy term. Accumulates gradients into both towers
    and the classifier head."""
    U, cache_i = params.f.forward(img)
    V, cache_t = params.g.forward(txt)
    if margins is None:
        margins = _pair_margins(params, U, V, w)
    t_val, d_sim = triplet_loss(U @ V.T, margins)
    logits_i = linear_forward(params.head, U)
    P = softmax(logits_i)
    if targets is None:
        targets = params.classify_probs(V).argmax(axis=1)
    ce_val, d_p_ce = ce_loss(P, targets)
    en_val, d_p_en = entropy_reg(P)
    d_logits = softmax_backward(P, w.lambda_ce * d_p_ce - w.lambda_en * d_p_en)
    d_u = w.lambda_t * (d_sim @ V) + linear_backward(params.head, U, d_logits)
    d_v = w.lambda_t * (d_sim.T @ U)
    params.f.backward(cache_i, d_u)
    params.g.backward(cache_t, d_v)
    return {"total": clean_total(t_val, ce_val, en_val, w),
            "triplet": t_val, "ce": ce_val, "en": en_val}


def ambiguous_batch_loss(params: ModelParams, img: np.ndarray, txt: np.ndarray,
                         w: LossWeights) -> dict:
    """Ambiguous-subset composite: symmetric GCE + entropy term. The triplet
    part of the composite runs on clean pairs, which train in every epoch
    already; an ambiguous pair's own caption is known-misaligned, so ranking
    on it would inject exactly the supervision the division flagged as bad.
    The classifier head stays frozen; its gradient buffers are left untouched
    while GCE/entropy gradients pass through its weights into the encoders."""
    U, cache_i = params.f.forward(img)
    V, cache_t = params.g.forward(txt)
    P = softmax(linear_forward(params.head, U))
    Q = softmax(linear_forward(params.head, V))
    gce_val, d_p_gce, d_q_gce = gce_loss(P, Q, w.gamma)
    en_val, d_p_en = entropy_reg(P)
    d_logits_i = softmax_backward(P, w.lambda_gce * d_p_gce - w.lambda_en * d_p_en)
    d_logits_t = softmax_backward(Q, w.lambda_gce * d_q_gce)
    params.f.backward(cache_i, d_logits_i @ params.head.weight)
    params.g.backward(cache_t, d_logits_t @ params.head.weight)
    return {"total": ambiguous_total(0.0, gce_val, en_val, w),
            "triplet": 0.0, "gce": gce_val, "en": en_val}


# ---------------------------------------------------------------------------
# epoch driver
# ---------------------------------------------------------------------------

def _check_finite(value: float, where: str):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss in {where}")


def run_warmup(params: ModelParams, ds: PairDataset, train_idx: np.ndarray,
               cfg: TrainConfig, adam_towers: AdamState) -> list[float]:
    """Fixed-margin triplet warmup over all training pairs; classifier
    untouched. Returns the mean batch loss of each warmup epoch."""
    w = cfg.weights()
    seed = derive_seed(cfg.seed, "warmup")
    epoch_losses = []
    for epoch in range(cfg.warmup_epochs):
        total, count = 0.0, 0
        for batch in batch_iter(train_idx, cfg.batch_size, epoch, seed):
            params.zero_grad()
            comp = triplet_batch_loss(params, ds.image_feats[batch],
                                      ds.text_feats[ds.pair_of[batch]], w.alpha)
            _check_finite(comp["total"], f"warmup epoch {epoch + 1}")
            adam_step(params.tower_params(), params.tower_grads(), adam_towers, lr=cfg.lr)
            total += comp["total"]
            count += 1
        epoch_losses.append(total / max(count, 1))
    return epoch_losses


def compute_division(params: ModelParams, ds: PairDataset, train_idx: np.ndarray,
                     tracker: ConsistencyTracker, controller: ThresholdController,
                     cfg: TrainConfig, epoch: int) -> tuple[DivisionResult, dict]:
    """One epoch's division: GMM split, consistency recording, threshold
    update, and refinable/ambiguous partition."""
    train_idx = np.asarray(train_idx, dtype=np.int64)
    probs = params.classify_probs(params.embed_image(ds.image_feats[train_idx]))
    tracker.record(train_idx, probs.argmax(axis=1))
    if cfg.division_mode == "all-clean":
        clean, noisy = train_idx, train_idx[:0]
        posterior = np.ones(len(train_idx))
    else:
        losses = per_pair_loss(params, ds.image_feats[train_idx],
                               ds.text_feats[ds.pair_of[train_idx]], cfg.margin_alpha)
        gmm = fit_gmm_em(losses, cfg.gmm_max_iters, cfg.gmm_tol)
        clean_pos, noisy_pos = split_by_confidence(gmm, losses)
        clean, noisy = train_idx[clean_pos], train_idx[noisy_pos]
        posterior = gmm.posterior_clean(losses)
    # utilization measured against the pre-update threshold, then one
    # controller step, then the partition with the fresh threshold
    if len(noisy):
        lambda_current = float((tracker.pcs_array(noisy) >= controller.tau).mean())
    else:
        lambda_current = 1.0
    lambda_target = controller.lambda_target(epoch, cfg.total_epochs)
    tau = controller.update(lambda_current, epoch, cfg.total_epochs)
    refinable, ambiguous = partition_noisy(noisy, tracker, tau)
    division = DivisionResult(clean=clean, refinable=refinable, ambiguous=ambiguous,
                              clean_posterior=posterior, indices=train_idx)
    info = {"tau": tau, "lambda_current": lambda_current, "lambda_target": lambda_target}
    return division, info


def _rematch_map(params: ModelParams, ds: PairDataset,
                 division: DivisionResult) -> np.ndarray:
    """Per-epoch caption rematch: each refinable image is paired with the
    clean caption whose pseudo-distribution it most resembles."""
    pool_caps = ds.pair_of[division.clean]
    pool_probs = params.classify_probs(params.embed_text(ds.text_feats[pool_caps]))
    ref_probs = params.classify_probs(params.embed_image(ds.image_feats[division.refinable]))
    return pool_caps[rematch_captions(ref_probs, pool_probs)]


def stage_of(epoch: int, cfg: TrainConfig) -> int:
    """Training stage of a 1-based post-warmup epoch."""
    if epoch < cfg.stage2_start:
        return 1
    if epoch < cfg.stage3_start:
        return 2
    return 3


def run_stage_epoch(params: ModelParams, ds: PairDataset, division: DivisionResult,
                    stage: int, cfg: TrainConfig, adam_towers: AdamState,
                    adam_head: AdamState, epoch: int, info: dict,
                    val_idx: np.ndarray | None = None) -> EpochReport:
    """Optimize one epoch at the given stage and assemble its report.

    Clean batches update towers and head; refinable batches (stage >= 2)
    train towers on rematched captions; ambiguous batches (stage 3) train
    towers through the frozen head. Subsets below 2 samples are skipped.
    """
    w = cfg.weights()
    if len(division.clean) < 2:
        raise TrainingError(f"clean set collapsed to {len(division.clean)} pairs")
    sums = {"clean": 0.0, "refinable": 0.0, "ambiguous": 0.0}
    counts = {"clean": 0, "refinable": 0, "ambiguous": 0}

    for batch in batch_iter(division.clean, cfg.batch_size, epoch,
                            derive_seed(cfg.seed, "clean")):
        params.zero_grad()
        comp = clean_batch_loss(params, ds.image_feats[batch],
                                ds.text_feats[ds.pair_of[batch]], w)
        _check_finite(comp["total"], f"clean batch, epoch {epoch}")
        adam_step(params.tower_params(), params.tower_grads(), adam_towers, lr=cfg.lr)
        adam_step(params.head.params(), params.head.grads(), adam_head, lr=cfg.head_lr)
        sums["clean"] += comp["total"]
        counts["clean"] += 1

    if stage >= 2 and cfg.use_refinable and len(division.refinable) >= 2:
        rematched = _rematch_map(params, ds, division)
        order = np.arange(len(division.refinable))
        for pos in batch_iter(order, cfg.batch_size, epoch,
                              derive_seed(cfg.seed, "refinable")):
            params.zero_grad()
            img = ds.image_feats[division.refinable[pos]]
            txt = ds.text_feats[rematched[pos]]
            U, V = params.embed_image(img), params.embed_text(txt)
            comp = triplet_batch_loss(params, img, txt, _pair_margins(params, U, V, w))
            _check_finite(comp["total"], f"refinable batch, epoch {epoch}")
            assert not params.head.grads()[0].any(), "head must not train on refinable data"
            adam_step(params.tower_params(), params.tower_grads(), adam_towers, lr=cfg.lr)
            sums["refinable"] += comp["total"]
            counts["refinable"] += 1

    if stage >= 3 and cfg.use_ambiguous and len(division.ambiguous) >= 2:
        for batch in batch_iter(division.ambiguous, cfg.batch_size, epoch,
                                derive_seed(cfg.seed, "ambiguous")):
            params.zero_grad()
            comp = ambiguous_batch_loss(params, ds.image_feats[batch],
                                        ds.text_feats[ds.pair_of[batch]], w)
            _check_finite(comp["total"], f"ambiguous batch, epoch {epoch}")
            assert not params.head.grads()[0].any(), "head must not train on ambiguous data"
            adam_step(params.tower_params(), params.tower_grads(), adam_towers, lr=cfg.lr)
            sums["ambiguous"] += comp["total"]
            counts["ambiguous"] += 1

    audit = audit_division(division, ds.corruption_mask)
    val_report = None
    if val_idx is not None and len(val_idx) >= 10:
        val_report = evaluate(params, ds, val_idx).to_dict()
    mean = lambda key: sums[key] / counts[key] if counts[key] else None
    return EpochReport(
        epoch=epoch, stage=stage, tau=info["tau"],
        lambda_current=info["lambda_current"], lambda_target=info["lambda_target"],
        n_clean=len(division.clean), n_refinable=len(division.refinable),
        n_ambiguous=len(division.ambiguous),
        loss_clean=mean("clean"), loss_refinable=mean("refinable"),
        loss_ambiguous=mean("ambiguous"),
        division_precision=audit.clean_precision, division_recall=audit.clean_recall,
        corrupted_in_refinable=audit.corrupted_in_refinable,
        corrupted_in_ambiguous=audit.corrupted_in_ambiguous,
        val=val_report)


def train(cfg: TrainConfig, ds: PairDataset, split: SplitSpec | None = None,
          out_dir=None, log=None) -> TrainResult:
    """Run warmup plus the full three-stage schedule; returns final params
    and one report per post-warmup epoch.

    When ``out_dir`` is given, per-epoch reports, a rolling last-good
    checkpoint, cadenced checkpoints, and the final checkpoint are written
    there. A non-finite loss aborts with a TrainingError carrying the last
    good checkpoint path.
    """
    if ds.d_img < 1 or cfg.batch_size > ds.n_images:
        raise ConfigurationError("batch_size exceeds dataset size")
    if split is None:
        split = split_indices(ds.n_images, cfg.val_fraction, cfg.test_fraction, cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    report_dir = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        report_dir = out / "reports"
        report_dir.mkdir(exist_ok=True)
    params = ModelParams(ds.d_img, ds.d_txt, cfg.d_hidden, cfg.d_embed,
                         cfg.k_classes, seed=cfg.seed)
    adam_towers = AdamState(params.tower_params())
    adam_head = AdamState(params.head.params())
    tracker = ConsistencyTracker(cfg.k_classes)
    controller = cfg.controller()
    last_good = None

    def say(msg):
        if log is not None:
            log(msg)

    try:
        warmup_losses = run_warmup(params, ds, split.train, cfg, adam_towers)
        say(f"warmup done ({cfg.warmup_epochs} epochs)")
        reports: list[EpochReport] = []
        prev_stage = 0
        for epoch in range(1, cfg.total_epochs + 1):
            division, info = compute_division(params, ds, split.train, tracker,
                                              controller, cfg, epoch)
            stage = stage_of(epoch, cfg)
            if stage != prev_stage:
                say(f"epoch {epoch}: entering stage {stage}")
                prev_stage = stage
            report = run_stage_epoch(params, ds, division, stage, cfg,
                                     adam_towers, adam_head, epoch, info,
                                     val_idx=split.val)
            for p in params.all_params():
                if not np.isfinite(p).all():
                    raise TrainingError(f"non-finite parameters after epoch {epoch}")
            reports.append(report)
            say(f"epoch {epoch}: stage {stage} tau {info['tau']:.3f} "
                f"sizes {report.n_clean}/{report.n_refinable}/{report.n_ambiguous}")
            if out is not None:
                (report_dir / f"epoch_{epoch:04d}.json").write_text(
                    json.dumps(report.to_dict(), sort_keys=True) + "\n")
                last_good = out / "checkpoint_last.bin"
                save_checkpoint(params, last_good, epoch=epoch)
                if cfg.checkpoint_every > 0 and epoch % cfg.checkpoint_every == 0:
                    save_checkpoint(params, out / f"checkpoint_epoch_{epoch:04d}.bin",
                                    epoch=epoch)
        if out is not None:
            save_checkpoint(params, out / "checkpoint_final.bin", epoch=cfg.total_epochs)
    except TrainingError as exc:
        exc.checkpoint = last_good
        raise
    return TrainResult(params=params, reports=reports, split=split,
                       warmup_losses=warmup_losses)

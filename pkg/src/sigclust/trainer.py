"""Two-stage training: supervised pairwise pre-training on a labeled auxiliary
set, then threshold-gated self-labeled fine-tuning that clusters a target set.

Target labels, when present, are used for per-epoch reporting only; no gradient
ever sees them. Both stages are bit-deterministic given (model, config, data).
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds_mod
from . import losses, metrics, nn
from .errors import NonFiniteLossError

VAL_IMPROVE_DELTA = 1e-4


@dataclass
class TrainConfig:
    lambda_pretrain: float = 0.1
    lambda_finetune: float = 100.0
    u: float = 0.95
    l: float = 0.7
    batch_size: int = 64
    lr: float = 1e-3
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.1
    stop_delta: float = 0.001
    seed: int = 0

    def validate(self):
        if not (0.0 <= self.l < self.u <= 1.0):
            raise ValueError(f"thresholds must satisfy 0 <= l < u <= 1, got u={self.u}, l={self.l}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must be in (0, 1)")
        if self.lambda_pretrain < 0 or self.lambda_finetune < 0:
            raise ValueError("lambda must be non-negative")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        return self


@dataclass
class PretrainResult:
    model: nn.ModelState
    history: list
    best_epoch: int
    best_val_loss: float
    epochs_run: int


@dataclass
class ClusterResult:
    assignments: np.ndarray
    features: np.ndarray
    epochs_run: int
    final_loss: float
    selected_pair_fraction: float
    history: list = field(default_factory=list)
    skipped_batches: int = 0


def _epoch_seed(seed: int, stage: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, stage, epoch]).generate_state(1)[0])


def _check_finite(loss: float) -> float:
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"loss became non-finite ({loss})")
    return loss


def eval_features(model: nn.ModelState, signals: np.ndarray, batch_size: int) -> np.ndarray:
    """Eval-mode features over a full signal array, batched in index order."""
    parts = [
        nn.forward(model, signals[i:i + batch_size], train_mode=False)
        for i in range(0, len(signals), batch_size)
    ]
    return np.vstack(parts)


def assign_labels(features: np.ndarray) -> np.ndarray:
    """Cluster index per row: argmax entry, ties to the lowest index."""
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[0] < 1:
        raise ValueError("expected a non-empty m x k feature matrix")
    return np.argmax(f, axis=1)


def _mean_pair_loss(model, signals, labels, lam, batch_size):
    """Pairs-weighted mean label-pair loss in eval mode (0.0 if no pairs)."""
    total, weight = 0.0, 0
    for i in range(0, len(signals), batch_size):
        xb = signals[i:i + batch_size]
        if len(xb) < 2:
            continue
        feats = nn.forward(model, xb, train_mode=False)
        pairs = losses.pairs_from_labels(labels[i:i + batch_size], model.num_classes)
        res = losses.pairwise_loss(losses.similarity_matrix(feats), pairs, lam)
        total += res.loss * res.num_selected
        weight += res.num_selected
    return total / weight if weight else 0.0


def pretrain(model: nn.ModelState, aux: ds_mod.SignalDataset, cfg: TrainConfig) -> PretrainResult:
    """Supervised pairwise pre-training with early stopping on validation loss.

    Splits aux by a seeded shuffle, trains with label-derived pairs, and stops
    once validation loss has not improved by more than 1e-4 for cfg.patience
    consecutive epochs (or at cfg.max_epochs). Returns the best-validation
    epoch's parameters.
    """
    cfg.validate()
    if not aux.labeled:
        raise ValueError("pre-training needs a labeled auxiliary dataset")
    if aux.num_classes != model.num_classes:
        raise ValueError(
            f"auxiliary dataset has {aux.num_classes} classes, model expects {model.num_classes}"
        )
    if aux.signal_length != model.signal_length:
        raise ValueError(
            f"auxiliary signal length {aux.signal_length} != model length {model.signal_length}"
        )
    if len(aux) < 2:
        raise ValueError("auxiliary dataset needs at least two records")

    signals = aux.stacked()
    labels = aux.labels()
    n = len(aux)
    perm = np.random.default_rng(cfg.seed).permutation(n)
    n_val = min(max(1, round(n * cfg.val_fraction)), n - 1)
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    model = model.copy()
    best = model.copy()
    best_val = math.inf
    best_epoch = 0
    bad_epochs = 0
    history = []
    epochs_run = 0

    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        order = np.random.default_rng(_epoch_seed(cfg.seed, 1, epoch)).permutation(train_idx)
        loss_sum, loss_weight = 0.0, 0
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb = signals[idx]
            feats = nn.forward(model, xb, train_mode=True)
            pairs = losses.pairs_from_labels(labels[idx], model.num_classes)
            res = losses.pairwise_loss(losses.similarity_matrix(feats), pairs, cfg.lambda_pretrain)
            if res.num_selected == 0:
                continue
            _check_finite(res.loss)
            grads = nn.backward(model, xb, losses.feature_gradient(feats, res.grad))
            nn.adam_step(model, grads, cfg.lr)
            loss_sum += res.loss * res.num_selected
            loss_weight += res.num_selected
        train_loss = loss_sum / loss_weight if loss_weight else 0.0
        val_loss = _check_finite(
            _mean_pair_loss(model, signals[val_idx], labels[val_idx], cfg.lambda_pretrain,
                            cfg.batch_size)
        )
        history.append({
            "epoch": epoch, "stage": "pretrain",
            "loss": train_loss, "val_loss": val_loss,
        })
        if val_loss < best_val - VAL_IMPROVE_DELTA:
            best_val = val_loss
            best = model.copy()
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                break

    return PretrainResult(model=best, history=history, best_epoch=best_epoch,
                          best_val_loss=best_val, epochs_run=epochs_run)


def finetune_cluster(
    model: nn.ModelState,
    target: ds_mod.SignalDataset,
    cfg: TrainConfig,
    n_clusters: int | None = None,
) -> ClusterResult:
    """Self-labeled fine-tuning and cluster assignment on an unlabeled target.

    Per batch: threshold-gated pairs from the batch similarity matrix drive the
    pairwise loss (batches with no selected pair are skipped and counted).
    After each epoch the full dataset is re-assigned in eval mode; training
    stops when the fraction of changed assignments drops below cfg.stop_delta.
    Target labels are only ever read for the per-epoch report.
    """
    cfg.validate()
    if target.signal_length != model.signal_length:
        raise ValueError(
            f"target signal length {target.signal_length} != model length {model.signal_length}"
        )
    model = model.copy()
    if n_clusters is not None and n_clusters != model.num_classes:
        nn.reinit_head(model, n_clusters, seed=cfg.seed)

    signals = target.stacked()
    report_labels = target.labels()
    prev_assign = assign_labels(eval_features(model, signals, cfg.batch_size))

    history = []
    skipped = 0
    epochs_run = 0
    final_loss = 0.0
    final_sel_fraction = 0.0

    for epoch in range(1, cfg.max_epochs + 1):
        epochs_run = epoch
        batches = ds_mod.make_batches(target, cfg.batch_size,
                                      seed=_epoch_seed(cfg.seed, 2, epoch))
        loss_sum, loss_weight = 0.0, 0
        selected, possible = 0, 0
        for idx in batches:
            if len(idx) < 2:
                continue
            xb = signals[idx]
            feats = nn.forward(model, xb, train_mode=True)
            sim = losses.similarity_matrix(feats)
            pairs = losses.pairs_from_similarity(sim, cfg.u, cfg.l)
            res = losses.pairwise_loss(sim, pairs, cfg.lambda_finetune)
            possible += len(idx) * (len(idx) - 1)
            selected += res.num_selected
            if res.num_selected == 0:
                skipped += 1
                continue
            _check_finite(res.loss)
            grads = nn.backward(model, xb, losses.feature_gradient(feats, res.grad))
            nn.adam_step(model, grads, cfg.lr)
            loss_sum += res.loss * res.num_selected
            loss_weight += res.num_selected

        final_loss = loss_sum / loss_weight if loss_weight else 0.0
        final_sel_fraction = selected / possible if possible else 0.0
        assign = assign_labels(eval_features(model, signals, cfg.batch_size))
        change_fraction = float(np.mean(assign != prev_assign))
        prev_assign = assign

        entry = {
            "epoch": epoch, "stage": "finetune",
            "loss": final_loss,
            "selected_pair_fraction": final_sel_fraction,
            "change_fraction": change_fraction,
        }
        if report_labels is not None:
            entry.update(metrics.evaluate(report_labels, assign, k=max(
                model.num_classes, int(report_labels.max()) + 1)))
        history.append(entry)
        if change_fraction < cfg.stop_delta:
            break

    features = eval_features(model, signals, cfg.batch_size)
    return ClusterResult(
        assignments=prev_assign,
        features=features,
        epochs_run=epochs_run,
        final_loss=final_loss,
        selected_pair_fraction=final_sel_fraction,
        history=history,
        skipped_batches=skipped,
    )


def format_log_line(entry: dict) -> str:
    """One line-oriented training-log record."""
    parts = [f"epoch={entry['epoch']}", f"stage={entry['stage']}", f"loss={entry['loss']:.6f}"]
    for key in ("val_loss", "selected_pair_fraction", "change_fraction", "nmi", "ari", "acc"):
        if key in entry:
            parts.append(f"{key}={entry[key]:.6f}")
    return " ".join(parts)

"""Alternating MAP training.

Each epoch takes Adam steps on the encoder tail, metric weights and readout
with the column covariances frozen; every ``cov_update_every`` epochs the
covariances are then refit in closed form with all weights frozen.
Training keeps the parameters of the best validation epoch.
"""

import csv
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .objective import (CovarianceState, DegenerateWeightsError, RegWeights, bce_loss,
                        covariance_update, total_loss)

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "FitResult",
    "TrainingError",
    "validation_loss",
    "train_epoch",
    "update_covariances",
    "trace_term",
    "fit",
    "grid_search",
    "GridResult",
]

log = logging.getLogger(__name__)

ZERO_TOL = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    reg: RegWeights = field(default_factory=RegWeights)
    cov_update_every: int = 1
    patience: int = 5
    max_epochs: int = 30
    seed: int = 0
    proximal_l1: bool = False

    def __post_init__(self):
        if isinstance(self.reg, dict):
            self.reg = RegWeights(**self.reg)
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.cov_update_every < 1:
            raise ValueError("cov_update_every must be at least 1")
        if self.max_epochs < 0 or self.lr < 0:
            raise ValueError("max_epochs and lr must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    zero_frac: float
    zero_frac_filters: float
    trace_term: float
    cov_min_eig: float
    cov_trace_err: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    initial_val_loss: float = None
    best_epoch: int = 0

    FIELDS = ("epoch", "train_loss", "val_loss", "zero_frac", "zero_frac_filters",
              "trace_term", "cov_min_eig", "cov_trace_err")

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.FIELDS)
            for r in self.records:
                w.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in self.FIELDS[1:]])


@dataclass
class FitResult:
    model: object
    covs: CovarianceState
    log: TrainLog

    @property
    def best_val_loss(self):
        if self.log.best_epoch == 0:
            return self.log.initial_val_loss
        return self.log.records[self.log.best_epoch - 1].val_loss


def validation_loss(model, feats, pairs, chunk=4096):
    """Mean per-pair BCE in infer mode."""
    if len(pairs) == 0:
        raise TrainingError("empty validation set")
    probs = np.concatenate([
        model.score(feats, pairs.right[s:s + chunk], pairs.left[s:s + chunk])
        for s in range(0, len(pairs), chunk)])
    return bce_loss(probs, pairs.labels) / len(pairs)


def zero_fraction(arrays, tol=ZERO_TOL):
    arrays = list(arrays)
    total = sum(a.size for a in arrays)
    if total == 0:
        return 0.0
    return float(sum(np.count_nonzero(np.abs(a) < tol) for a in arrays)) / total


def trace_term(model, covs):
    """Unweighted ``sum_j tr(W_j (Lambda_j + eps I)^-1 W_j^T)``."""
    return float(sum(np.sum((model.params[n] @ prec) * model.params[n])
                     for n, prec in zip(model.metric_weight_names(), covs.precisions())))


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    starts = list(range(0, n, batch_size))
    batches = [order[s:s + batch_size] for s in starts]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def train_epoch(model, covs, feats, pairs, config, adam, epoch=1):
    """One pass of mini-batch Adam over ``pairs`` with ``covs`` held fixed.

    The batch order is drawn from ``(config.seed, epoch)``.  Mutates and
    returns ``(model, adam_state, mean_loss_per_pair)``.
    """
    if len(pairs) < 2:
        raise TrainingError("training needs at least two pairs")
    rng = np.random.default_rng([config.seed, epoch])
    reg = config.reg
    l1_groups = ((reg.lambda2, model.filter_l1_names()),
                 (reg.lambda3, model.readout_l1_names()))
    total = 0.0
    for b, idx in enumerate(_batches(len(pairs), config.batch_size, rng)):
        batch = pairs.take(idx)
        loss, grads, _ = total_loss(model, feats, batch.right, batch.left, batch.labels,
                                    covs, reg, l1_in_grad=not config.proximal_l1)
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b}")
        params, adam = nn.adam_step(model.params, grads, adam)
        if config.proximal_l1:
            for lam, names in l1_groups:
                if lam:
                    for name in names:
                        params[name] = _soft_threshold(params[name], lam * adam.lr)
        model.params = params
        total += loss
    return model, adam, total / len(pairs)


def update_covariances(model, covs):
    """Closed-form refit of every layer's column covariance."""
    mats = []
    for j, name in enumerate(model.metric_weight_names()):
        try:
            mats.append(covariance_update(model.params[name]))
        except DegenerateWeightsError:
            log.warning("layer %s has all-zero weights; keeping its covariance", name)
            mats.append(covs.matrices[j])
    new = CovarianceState(mats, eps=covs.eps)
    new.check()
    return new


def fit(model, feats, train_pairs, val_pairs, config, covs=None, val_loss_fn=None):
    """Alternate Adam epochs and covariance refits with early stopping.

    Stops once the validation loss has not improved on the best value seen
    (the untrained model included) for ``config.patience`` epochs, or after
    ``config.max_epochs``.  Returns the parameters of the completed epoch
    with the lowest validation loss; the initial model is returned only
    when no epoch ran.
    """
    if len(train_pairs) == 0:
        raise TrainingError("empty training set")
    if len(val_pairs) == 0:
        raise TrainingError("empty validation set")
    if covs is None:
        covs = CovarianceState.identity(model.metric_input_dims())
    if val_loss_fn is None:
        def val_loss_fn(m):
            return validation_loss(m, feats, val_pairs)

    adam = nn.AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    trainlog = TrainLog(initial_val_loss=val_loss_fn(model))
    best = (np.inf, model.copy(), covs)
    reference = trainlog.initial_val_loss
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        model, adam, train_loss = train_epoch(model, covs, feats, train_pairs, config, adam, epoch)
        if epoch % config.cov_update_every == 0:
            covs = update_covariances(model, covs)
        val = val_loss_fn(model)
        eigs = [np.linalg.eigvalsh(m).min() for m in covs.matrices]
        trainlog.records.append(EpochRecord(
            epoch, train_loss, val,
            zero_fraction(model.params[n] for n in model.readout_l1_names()),
            zero_fraction(model.params[n] for n in model.filter_l1_names()),
            trace_term(model, covs), float(min(eigs)),
            float(max(abs(np.trace(m) - 1.0) for m in covs.matrices))))
        log.info("epoch %d train %.6g val %.6g", epoch, train_loss, val)
        if val < best[0]:
            best = (val, model.copy(), covs)
            trainlog.best_epoch = epoch
        if val < reference:
            reference = val
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return FitResult(best[1], best[2], trainlog)


# -- grid search ---------------------------------------------------------------


@dataclass
class GridResult:
    best: RegWeights
    cells: list

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda1", "lambda2", "lambda3", "val_loss", "best_epoch", "error"])
            for c in self.cells:
                w.writerow([repr(c["lambda1"]), repr(c["lambda2"]), repr(c["lambda3"]),
                            "" if c["val_loss"] is None else repr(c["val_loss"]),
                            "" if c["best_epoch"] is None else c["best_epoch"],
                            c["error"] or ""])


def _run_cell(args):
    model_factory, feats, train_pairs, val_pairs, config, reg = args
    cell = {"lambda1": reg.lambda1, "lambda2": reg.lambda2, "lambda3": reg.lambda3,
            "val_loss": None, "best_epoch": None, "error": None}
    try:
        res = fit(model_factory(config.seed), feats, train_pairs, val_pairs, replace(config, reg=reg))
        cell["val_loss"] = float(res.best_val_loss)
        cell["best_epoch"] = res.log.best_epoch
        cell["result"] = res
    except Exception as exc:  # a failed cell is reported, not fatal
        cell["error"] = f"{type(exc).__name__}: {exc}"
    return cell


def grid_search(model_factory, feats, train_pairs, val_pairs, grids, config, jobs=1):
    """Fit one model per ``(lambda1, lambda2, lambda3)`` cell and keep the best.

    ``model_factory(seed)`` must return a freshly initialized model; every
    cell uses ``config.seed``.  Ties on validation loss go to the
    lexicographically smallest lambdas.
    """
    g1, g2, g3 = (list(g) for g in grids)
    if not (g1 and g2 and g3):
        raise ValueError("every lambda grid needs at least one value")
    regs = [RegWeights(*lam) for lam in itertools.product(g1, g2, g3)]
    tasks = [(model_factory, feats, train_pairs, val_pairs, config, r) for r in regs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    ok = [c for c in cells if c["error"] is None]
    if not ok:
        raise TrainingError("every grid cell failed: " + cells[0]["error"])
    best = min(ok, key=lambda c: (c["val_loss"], c["lambda1"], c["lambda2"], c["lambda3"]))
    return GridResult(RegWeights(best["lambda1"], best["lambda2"], best["lambda3"]), cells)

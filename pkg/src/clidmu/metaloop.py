"""Bilevel training loop: Virtual-Train, Meta-Train, Actual-Train.

One iteration works on a labeled train batch and an (optionally
unlabeled) meta batch:

1. Virtual-Train takes a tentative classifier step using the current
   per-sample weights, without touching the real parameters.
2. Meta-Train pushes the weighting network in the exact direction that
   reduces the configured meta objective at the tentative parameters.
   The update is the closed-form chain rule through the tentative step:
   for each sample, the alignment g_i between its loss gradient and the
   meta-objective gradient scales the weight network's own gradient.
3. Actual-Train commits the classifier step, re-weighted with the just
   updated weighting network but evaluated at the original parameters.

The divergence meta objective consumes features only; cross-entropy and
mean-absolute-error meta objectives consume the meta batch's labels.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .clid import clid_grad
from .data import LabeledDataset, MetaSet, select_meta_set
from .ensemble import Snapshot, SnapshotStore
from .evaluation import MetricsRow, clid_on_set, evaluate_model
from .networks import (MetaNet, MlpClassifier, ParamVector, backward_weighted_ce,
                       backward_weighted_mae, classifier_forward, layer_grad_norms,
                       metanet_forward, metanet_grad_matrix, per_sample_ce,
                       per_sample_grad_matrix)
from .numerics import make_rng

logger = logging.getLogger(__name__)

META_OBJECTIVES = ("clid", "ce", "mae")
SG_MODES = ("target_q", "target_e", "none")
META_SET_STRATEGIES = ("random_noisy", "class_balanced_noisy", "pseudo_clean_gmm",
                       "oracle_clean")


class NonfiniteError(RuntimeError):
    """A loss, gradient, or parameter update stopped being finite."""


@dataclass
class TrainConfig:
    """Hyperparameters of one training run."""

    alpha: float = 0.1          # classifier learning rate
    gamma: float = 0.05         # meta-net learning rate
    tau: float = 0.5            # similarity temperature
    batch_size: int = 100       # train batch size
    meta_batch_size: int = 100  # meta batch size
    epochs: int = 30
    max_iters: int | None = None  # iteration cap T; None means epochs * batches
    snapshots: int = 5          # K retained snapshots
    meta_objective: str = "clid"
    meta_set_strategy: str = "random_noisy"
    meta_size: int = 1000
    warmup_epochs: int = 10     # pseudo-clean strategy only
    sg_mode: str = "target_q"
    seed: int = 0
    hidden_sizes: tuple = (32, 32)
    meta_hidden: int = 100
    eval_cap: int = 2048
    setting: str = "run"

    def validate(self):
        if not (self.alpha > 0 and self.gamma > 0 and self.tau > 0):
            raise ValueError("alpha, gamma and tau must be positive")
        if (self.batch_size < 1 or self.meta_batch_size < 1 or self.snapshots < 1
                or self.meta_size < 1):
            raise ValueError("batch sizes, snapshots and meta_size must be >= 1")
        if self.max_iters is not None and self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epochs and warmup_epochs must be >= 0")
        if self.meta_objective not in META_OBJECTIVES:
            raise ValueError(f"meta_objective must be one of {META_OBJECTIVES}")
        if self.meta_set_strategy not in META_SET_STRATEGIES:
            raise ValueError(f"meta_set_strategy must be one of {META_SET_STRATEGIES}")
        if self.sg_mode not in SG_MODES:
            raise ValueError(f"sg_mode must be one of {SG_MODES}")
        if not self.hidden_sizes:
            raise ValueError("need at least one hidden layer")


@dataclass
class TrainerState:
    """Mutable state of the loop; single-owner, never shared across threads."""

    config: TrainConfig
    model: MlpClassifier
    meta: MetaNet
    t: int
    epoch: int
    rng: np.random.Generator
    store: SnapshotStore
    rows: list = field(default_factory=list)


@dataclass
class VirtualStep:
    """Intermediates of one Virtual-Train step, reused by the next two steps.

    Everything here was evaluated at the pre-step parameters: ``losses`` are
    the per-sample cross-entropies, ``grads`` their per-sample gradients,
    ``weights`` the weighting-net outputs, and ``theta_hat`` the tentative
    parameters.
    """

    t: int
    theta_hat: ParamVector
    losses: np.ndarray
    weights: np.ndarray
    grads: np.ndarray
    batch_size: int


def weighted_param_step(theta: np.ndarray, alpha: float, weights: np.ndarray,
                        grads: np.ndarray) -> np.ndarray:
    """theta - (alpha / n) * sum_i weights_i * grads_i."""
    weights = np.asarray(weights, dtype=np.float64)
    return theta - (alpha / len(weights)) * (weights @ grads)


def virtual_train_step(state: TrainerState, X: np.ndarray, labels: np.ndarray) -> VirtualStep:
    """Tentative step with the current weights; the real model is untouched."""
    trace = classifier_forward(state.model, X)
    losses = per_sample_ce(trace.Q, labels)
    weights = metanet_forward(state.meta, losses)
    grads = per_sample_grad_matrix(state.model, trace, labels)
    if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(grads))):
        raise NonfiniteError(f"nonfinite loss or gradient at iteration {state.t}")
    theta = state.model.to_params()
    theta_hat = ParamVector(theta.layout,
                            weighted_param_step(theta.values, state.config.alpha,
                                                weights, grads))
    if not np.all(np.isfinite(theta_hat.values)):
        raise NonfiniteError(f"nonfinite tentative parameters at iteration {state.t}")
    return VirtualStep(state.t, theta_hat, losses, weights, grads, len(losses))


def meta_train_step(state: TrainerState, virtual: VirtualStep, meta_X: np.ndarray,
                    meta_labels: np.ndarray | None = None) -> np.ndarray:
    """Update the weighting net through the tentative step; returns g_i.

    With the divergence objective the meta batch is features only and
    passing labels is an error; the supervised objectives require them.
    """
    if virtual.t != state.t:
        raise ValueError(f"virtual step from iteration {virtual.t}, state at {state.t}")
    cfg = state.config
    model_hat = MlpClassifier.from_params(virtual.theta_hat)
    if cfg.meta_objective == "clid":
        if meta_labels is not None:
            raise ValueError("the divergence meta objective consumes features only")
        try:
            H = clid_grad(model_hat, meta_X, cfg.tau, cfg.sg_mode).values
        except ValueError as exc:
            # shapes are consistent by construction here, so a failure inside
            # the graph pipeline means overflowed activations
            raise NonfiniteError(f"divergence gradient failed at iteration "
                                 f"{state.t}: {exc}") from exc
    else:
        if meta_labels is None:
            raise ValueError(f"meta objective {cfg.meta_objective!r} needs labels")
        trace_hat = classifier_forward(model_hat, meta_X)
        ones = np.ones(trace_hat.batch_size)
        if cfg.meta_objective == "ce":
            H = backward_weighted_ce(model_hat, trace_hat, meta_labels, ones).values
        else:
            H = backward_weighted_mae(model_hat, trace_hat, meta_labels, ones).values
    g = virtual.grads @ H
    if not np.all(np.isfinite(g)):
        raise NonfiniteError(f"nonfinite meta alignment at iteration {state.t}")
    d_omega = metanet_grad_matrix(state.meta, virtual.losses)
    psi = state.meta.to_params()
    psi.values = psi.values + (cfg.alpha * cfg.gamma / virtual.batch_size) * (g @ d_omega)
    if not np.all(np.isfinite(psi.values)):
        raise NonfiniteError(f"nonfinite meta-net update at iteration {state.t}")
    state.meta = MetaNet.from_params(psi)
    return g


def actual_train_step(state: TrainerState, virtual: VirtualStep) -> ParamVector:
    """Commit the step: new weights from the updated meta-net, gradients and
    losses exactly as evaluated at the original parameters. Returns the mean
    weighted gradient that was applied (before the learning rate)."""
    if virtual.t != state.t:
        raise ValueError(f"virtual step from iteration {virtual.t}, state at {state.t}")
    weights = metanet_forward(state.meta, virtual.losses)
    theta = state.model.to_params()
    new_values = weighted_param_step(theta.values, state.config.alpha, weights,
                                     virtual.grads)
    if not np.all(np.isfinite(new_values)):
        raise NonfiniteError(f"nonfinite parameter update at iteration {state.t}")
    state.model = MlpClassifier.from_params(ParamVector(theta.layout, new_values))
    applied = (weights @ virtual.grads) / virtual.batch_size
    return ParamVector(theta.layout, applied)


# ---------------------------------------------------------------------------
# Pseudo-clean sample selection: 2-component Gaussian mixture over losses.
# ---------------------------------------------------------------------------


def _gmm2_em(x: np.ndarray, max_iter: int = 200, tol: float = 1e-8):
    """EM for a two-component 1-d Gaussian mixture; deterministic quantile init."""
    n = len(x)
    mu = np.quantile(x, [0.1, 0.9])
    var = np.full(2, max(float(np.var(x)), 1e-12))
    w = np.array([0.5, 0.5])
    prev_ll = -np.inf
    resp = None
    for _ in range(max_iter):
        diff = x[None, :] - mu[:, None]
        log_pdf = -0.5 * (diff * diff / var[:, None] + np.log(2.0 * np.pi * var[:, None]))
        log_joint = np.log(np.maximum(w[:, None], 1e-300)) + log_pdf
        log_norm = np.logaddexp(log_joint[0], log_joint[1])
        resp = np.exp(log_joint - log_norm)
        ll = float(np.sum(log_norm))
        nk = np.maximum(resp.sum(axis=1), 1e-12)
        w = nk / n
        mu = (resp @ x) / nk
        var = np.maximum((resp @ (x * x)) / nk - mu * mu, 1e-12)
        if abs(ll - prev_ll) < tol:
            break
        prev_ll = ll
    return mu, var, w, resp


def select_pseudo_clean_gmm(losses: np.ndarray, labels: np.ndarray, size: int,
                            rng=None, n_classes: int | None = None) -> np.ndarray:
    """Indices of presumed-clean samples: low-loss mixture component,
    evenly across classes, shortfall filled by global lowest loss.

    Degenerate inputs (all losses equal, or a failed fit) fall back to the
    globally lowest losses with index tie-breaks. Selection is fully
    deterministic; ``rng`` is accepted for interface uniformity only.
    """
    losses = np.asarray(losses, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n = len(losses)
    if labels.shape != (n,):
        raise ValueError("losses and labels must have equal length")
    if not 1 <= size <= n:
        raise ValueError(f"target size {size} out of range for {n} samples")
    if size == n:
        return np.arange(n, dtype=np.int64)
    c = int(n_classes) if n_classes is not None else int(labels.max()) + 1
    order = np.argsort(losses, kind="stable")

    if float(np.ptp(losses)) < 1e-15:
        return np.sort(order[:size])
    mu, var, w, resp = _gmm2_em(losses)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(resp))):
        return np.sort(order[:size])
    low = int(np.argmin(mu))
    candidate = resp[low] >= 0.5

    per = size // c
    selected = []
    taken = np.zeros(n, dtype=bool)
    for k in range(c):
        members = [i for i in order if labels[i] == k and candidate[i]]
        chosen = members[:per]
        selected.extend(chosen)
        taken[chosen] = True
    short = size - len(selected)
    if short > 0:
        for i in order:
            if not taken[i]:
                selected.append(i)
                taken[i] = True
                short -= 1
                if short == 0:
                    break
    return np.sort(np.asarray(selected, dtype=np.int64))


# ---------------------------------------------------------------------------
# Full run: Algorithm driver with per-epoch snapshot scoring.
# ---------------------------------------------------------------------------


def _full_set_losses(model: MlpClassifier, ds: LabeledDataset, chunk: int = 4096) -> np.ndarray:
    losses = np.empty(ds.n_samples)
    for start in range(0, ds.n_samples, chunk):
        sl = slice(start, start + chunk)
        trace = classifier_forward(model, ds.X[sl])
        losses[sl] = per_sample_ce(trace.Q, ds.y_noisy[sl])
    return losses


def run_training(config: TrainConfig, train_set: LabeledDataset,
                 meta_set: MetaSet | None = None,
                 eval_set: LabeledDataset | None = None):
    """Run the full bilevel loop; returns (snapshot store, metrics rows).

    Iterations are capped at ``config.max_iters`` when set. At every epoch
    end the current model is scored by its divergence over the whole meta
    set and offered to the bounded snapshot store. With the pseudo-clean
    strategy the first ``warmup_epochs`` epochs run plain unweighted
    cross-entropy steps, after which the meta set is re-selected from the
    loss mixture once per epoch.
    """
    config.validate()
    N = train_set.n_samples
    n = config.batch_size
    if n > N:
        logger.warning("train batch size %d exceeds dataset size %d; using %d", n, N, N)
        n = N
    rng = make_rng(config.seed)
    model = MlpClassifier.initialize(train_set.dim, config.hidden_sizes,
                                     train_set.n_classes, rng)
    meta = MetaNet.initialize(rng, config.meta_hidden)
    iters_per_epoch = max(1, math.ceil(N / n))
    T = config.max_iters if config.max_iters is not None else config.epochs * iters_per_epoch
    store = SnapshotStore(config.snapshots)
    state = TrainerState(config, model, meta, 0, 0, rng, store)

    strategy = config.meta_set_strategy
    meta_size = min(config.meta_size, N)
    if meta_size < config.meta_size:
        logger.warning("meta-set size %d exceeds dataset size; using %d",
                       config.meta_size, meta_size)
    meta_indices = None
    if meta_set is not None:
        meta_indices = np.asarray(meta_set.indices, dtype=np.int64)
    elif strategy != "pseudo_clean_gmm":
        meta_indices = select_meta_set(train_set, meta_size, strategy, rng).indices

    m = config.meta_batch_size
    if m > meta_size:
        logger.warning("meta batch size %d exceeds meta-set size %d; using %d",
                       m, meta_size, meta_size)
        m = meta_size

    oracle_labels = strategy == "oracle_clean"

    for epoch in range(config.epochs):
        if state.t >= T:
            break
        state.epoch = epoch
        warm = strategy == "pseudo_clean_gmm" and epoch < config.warmup_epochs
        if strategy == "pseudo_clean_gmm" and not warm:
            losses_full = _full_set_losses(state.model, train_set)
            meta_indices = select_pseudo_clean_gmm(losses_full, train_set.y_noisy,
                                                   meta_size, n_classes=train_set.n_classes)
        perm = state.rng.permutation(N)
        norm_sums: dict = {}
        steps_in_epoch = 0
        for start in range(0, N, n):
            if state.t >= T:
                break
            idx = perm[start:start + n]
            Xb, yb = train_set.X[idx], train_set.y_noisy[idx]
            if warm:
                trace = classifier_forward(state.model, Xb)
                g = backward_weighted_ce(state.model, trace, yb, np.ones(len(idx)))
                theta = state.model.to_params()
                theta.values = theta.values - config.alpha * g.values
                if not np.all(np.isfinite(theta.values)):
                    raise NonfiniteError(f"nonfinite warmup update at iteration {state.t}")
                state.model = MlpClassifier.from_params(theta)
                applied = g
            else:
                virtual = virtual_train_step(state, Xb, yb)
                mb = state.rng.choice(meta_indices, size=m, replace=True)
                if config.meta_objective == "clid":
                    meta_train_step(state, virtual, train_set.X[mb])
                else:
                    labels_src = train_set.y_clean if oracle_labels else train_set.y_noisy
                    meta_train_step(state, virtual, train_set.X[mb], labels_src[mb])
                applied = actual_train_step(state, virtual)
            for name, value in layer_grad_norms(applied).items():
                norm_sums[name] = norm_sums.get(name, 0.0) + value
            steps_in_epoch += 1
            state.t += 1
        if steps_in_epoch == 0:
            break
        norms = {name: total / steps_in_epoch for name, total in norm_sums.items()}
        if meta_indices is not None and not warm:
            try:
                c_t = clid_on_set(state.model, train_set.X[meta_indices], config.tau,
                                  cap=config.eval_cap)
            except ValueError as exc:
                raise NonfiniteError(f"snapshot scoring failed at epoch {epoch}: {exc}") from exc
            store.maybe_insert(Snapshot(state.model.to_params(), c_t, epoch))
        _log_epoch(state, train_set, meta_indices, eval_set, norms, warm)
    return store, state.rows


def _log_epoch(state: TrainerState, train_set: LabeledDataset, meta_indices,
               eval_set: LabeledDataset | None, norms: dict, warm: bool) -> None:
    cfg = state.config
    acc, ce, clid = evaluate_model(state.model, train_set.X, train_set.y_noisy,
                                   cfg.tau, cap=cfg.eval_cap)
    state.rows.append(MetricsRow(state.epoch, cfg.setting, "train", acc, ce, clid, norms))
    if meta_indices is not None and not warm:
        sub = train_set.subset(meta_indices)
        labels = sub.y_clean if cfg.meta_set_strategy == "oracle_clean" else sub.y_noisy
        acc, ce, clid = evaluate_model(state.model, sub.X, labels, cfg.tau, cap=cfg.eval_cap)
        state.rows.append(MetricsRow(state.epoch, cfg.setting, "meta", acc, ce, clid))
    if eval_set is not None:
        acc, ce, clid = evaluate_model(state.model, eval_set.X, eval_set.y_clean,
                                       cfg.tau, cap=cfg.eval_cap)
        state.rows.append(MetricsRow(state.epoch, cfg.setting, "test", acc, ce, clid))

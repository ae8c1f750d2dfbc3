"""Model-quality metrics and the cross-noise correlation study.

The study trains one plain cross-entropy model per noise setting under a
shared seed discipline (identical initialization and batch order, only
the labels differ), then reports the per-epoch Pearson correlation
between test cross-entropy and the divergence score across settings,
plus relative-performance ratios against the clean setting.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .clid import clid_from_batch
from .data import LabeledDataset, NoiseSpec, apply_noise, generate_blobs
from .networks import (MlpClassifier, backward_weighted_ce, classifier_forward,
                       per_sample_ce)
from .numerics import make_rng


def accuracy(P: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax matches the label (ties: lowest index)."""
    P = np.asarray(P, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if P.size == 0 or P.shape[0] != labels.shape[0]:
        raise ValueError("empty input or row/label count mismatch")
    return float(np.mean(np.argmax(P, axis=1) == labels))


def rpr(p_clean: float, p_noisy: float) -> float:
    """Relative performance ratio: clean-setting metric over noisy-setting metric."""
    if p_noisy == 0.0:
        raise ValueError("noisy-setting performance is zero; ratio undefined")
    return float(p_clean) / float(p_noisy)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation coefficient of two equal-length series."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two 1-d series of equal length >= 2")
    da = a - a.mean()
    db = b - b.mean()
    sa = np.sqrt(np.sum(da * da))
    sb = np.sqrt(np.sum(db * db))
    if sa == 0.0 or sb == 0.0:
        raise ValueError("zero variance; correlation undefined")
    return float(np.sum(da * db) / (sa * sb))


def clid_on_set(model: MlpClassifier, X: np.ndarray, tau: float, cap: int = 2048) -> float:
    """Divergence of a whole set: one graph when it fits under ``cap`` rows,
    otherwise the mean over fixed-size disjoint chunks (a trailing chunk of
    one row is dropped since a graph needs two)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    m = X.shape[0]
    if m < 2:
        raise ValueError("need at least 2 rows")
    if m <= cap:
        return clid_from_batch(model, X, tau).value
    values = []
    for start in range(0, m, cap):
        chunk = X[start:start + cap]
        if chunk.shape[0] >= 2:
            values.append(clid_from_batch(model, chunk, tau).value)
    return float(np.mean(values))


@dataclass
class MetricsRow:
    """One evaluation record: a (epoch, setting, split) cell of the log."""

    epoch: int
    setting: str
    split: str
    accuracy: float
    ce_loss: float
    clid: float
    grad_norms: dict | None = None


def write_metrics_csv(rows, path) -> None:
    """Fixed-order CSV: epoch,setting,split,accuracy,ce_loss,clid,grad_norm_*."""
    norm_names = []
    for row in rows:
        if row.grad_norms:
            for name in row.grad_norms:
                if name not in norm_names:
                    norm_names.append(name)
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "setting", "split", "accuracy", "ce_loss", "clid"]
                        + [f"grad_norm_{n}" for n in norm_names])
        for row in rows:
            cells = [str(row.epoch), row.setting, row.split,
                     f"{row.accuracy:.17g}", f"{row.ce_loss:.17g}", f"{row.clid:.17g}"]
            for name in norm_names:
                if row.grad_norms and name in row.grad_norms:
                    cells.append(f"{row.grad_norms[name]:.17g}")
                else:
                    cells.append("")
            writer.writerow(cells)


def grad_magnitude_trace(rows) -> dict:
    """Per-epoch per-block gradient norms pulled from train-split rows."""
    trace = {}
    for row in rows:
        if row.split == "train" and row.grad_norms:
            trace[row.epoch] = dict(row.grad_norms)
    return trace


def evaluate_model(model: MlpClassifier, X: np.ndarray, labels: np.ndarray,
                   tau: float, cap: int = 2048):
    """(accuracy, mean CE, divergence) of a model on one labeled set."""
    trace = classifier_forward(model, X)
    acc = accuracy(trace.Q, labels)
    ce = float(np.mean(per_sample_ce(trace.Q, labels)))
    clid = clid_on_set(model, X, tau, cap=cap)
    return acc, ce, clid


def train_plain_ce(train_ds: LabeledDataset, test_ds: LabeledDataset | None, *,
                   hidden_sizes=(32, 32), alpha: float = 0.1, batch_n: int = 100,
                   epochs: int = 30, seed: int = 0, tau: float = 0.5,
                   setting: str = "ce", eval_cap: int = 2048):
    """Unweighted cross-entropy SGD baseline; logs one test row per epoch."""
    rng = make_rng(seed)
    model = MlpClassifier.initialize(train_ds.dim, hidden_sizes, train_ds.n_classes, rng)
    n = min(batch_n, train_ds.n_samples)
    rows = []
    for epoch in range(epochs):
        perm = rng.permutation(train_ds.n_samples)
        for start in range(0, train_ds.n_samples, n):
            idx = perm[start:start + n]
            Xb, yb = train_ds.X[idx], train_ds.y_noisy[idx]
            trace = classifier_forward(model, Xb)
            g = backward_weighted_ce(model, trace, yb, np.ones(len(idx)))
            theta = model.to_params()
            theta.values -= alpha * g.values
            model = MlpClassifier.from_params(theta)
        if test_ds is not None:
            acc, ce, clid = evaluate_model(model, test_ds.X, test_ds.y_clean, tau, cap=eval_cap)
            rows.append(MetricsRow(epoch, setting, "test", acc, ce, clid))
    return model, rows


@dataclass
class CorrelationStudyConfig:
    """Desk-scale protocol: blobs, symmetric noise sweep, plain-CE models."""

    seed: int = 0
    n_samples: int = 4000
    dim: int = 8
    n_classes: int = 4
    class_sep: float = 2.0
    test_samples: int = 1000
    rates: tuple = (0.0, 0.2, 0.4, 0.6)
    noise_kind: str = "symmetric"
    epochs: int = 30
    hidden_sizes: tuple = (32, 32)
    alpha: float = 0.1
    batch_n: int = 100
    tau: float = 0.5
    eval_cap: int = 2048


@dataclass
class CorrelationReport:
    """Per-epoch Pearson r between two metrics across noise settings.

    ``r`` is NaN on epochs where either series has zero variance across
    settings (degenerate, e.g. duplicated settings). RPR columns hold the
    clean-setting test CE divided by each setting's test CE; NaN when no
    zero-rate setting exists.
    """

    settings: list
    epochs: int
    r: np.ndarray
    rpr_ce: np.ndarray = field(repr=False)  # (epochs, settings)


def correlation_study(cfg: CorrelationStudyConfig):
    """Train one plain-CE model per noise setting and correlate CE with CLID."""
    if len(cfg.rates) < 3:
        raise ValueError("correlation study needs at least 3 noise settings, "
                         f"got {len(cfg.rates)}")
    base = generate_blobs(cfg.seed, cfg.n_samples, cfg.dim, cfg.n_classes, cfg.class_sep)
    test = generate_blobs(cfg.seed + 500, cfg.test_samples, cfg.dim, cfg.n_classes,
                          cfg.class_sep)
    settings = []
    all_rows = []
    per_setting_rows = []
    for rate in cfg.rates:
        label = f"{cfg.noise_kind}{int(round(rate * 100))}"
        settings.append(label)
        # seed derived from the rate: duplicated settings stay bit-identical
        noise_seed = cfg.seed + 1000 + int(round(rate * 10000))
        noisy = apply_noise(base, NoiseSpec(cfg.noise_kind, rate, noise_seed))
        _, rows = train_plain_ce(noisy, test, hidden_sizes=cfg.hidden_sizes,
                                 alpha=cfg.alpha, batch_n=cfg.batch_n, epochs=cfg.epochs,
                                 seed=cfg.seed, tau=cfg.tau, setting=label,
                                 eval_cap=cfg.eval_cap)
        per_setting_rows.append(rows)
        all_rows.extend(rows)
    n_set = len(settings)
    r = np.full(cfg.epochs, np.nan)
    rpr_ce = np.full((cfg.epochs, n_set), np.nan)
    clean_idx = next((i for i, rate in enumerate(cfg.rates) if rate == 0.0), None)
    for t in range(cfg.epochs):
        ce_vec = np.array([per_setting_rows[s][t].ce_loss for s in range(n_set)])
        clid_vec = np.array([per_setting_rows[s][t].clid for s in range(n_set)])
        try:
            r[t] = pearson(ce_vec, clid_vec)
        except ValueError:
            pass  # zero variance: leave the error row as NaN
        if clean_idx is not None:
            for s in range(n_set):
                if ce_vec[s] != 0.0:
                    rpr_ce[t, s] = rpr(ce_vec[clean_idx], ce_vec[s])
    return CorrelationReport(settings, cfg.epochs, r, rpr_ce), all_rows


def write_correlation_csv(report: CorrelationReport, path) -> None:
    """CSV schema: epoch,r,rpr_<setting>..."""
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "r"] + [f"rpr_{s}" for s in report.settings])
        for t in range(report.epochs):
            cells = [str(t), f"{report.r[t]:.17g}"]
            cells += [f"{v:.17g}" for v in report.rpr_ce[t]]
            writer.writerow(cells)

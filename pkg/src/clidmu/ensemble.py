"""Bounded top-K snapshot retention and averaged-probability inference.

The store keeps the K parameter snapshots with the smallest divergence
scores seen so far (first seen wins on ties). Inference averages the
snapshots' softmax outputs. The exponential loss of the averaged
prediction is bounded by the geometric mean of the per-snapshot risks,
and :func:`bound_check` evaluates both sides of that inequality.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .networks import MlpClassifier, ParamVector, classifier_forward, model_from_text, model_to_text


@dataclass
class Snapshot:
    """One retained set of classifier parameters with its score."""

    params: ParamVector
    clid_score: float
    epoch: int

    def __post_init__(self):
        if not np.isfinite(self.clid_score) or self.clid_score < 0.0:
            raise ValueError(f"snapshot score must be finite and >= 0, got {self.clid_score}")
        if not np.all(np.isfinite(self.params.values)):
            raise ValueError("snapshot parameters must be finite")

    def to_model(self) -> MlpClassifier:
        return MlpClassifier.from_params(self.params)


class SnapshotStore:
    """Bounded list of the K lowest-scoring snapshots seen so far."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.entries: list[Snapshot] = []

    def __len__(self):
        return len(self.entries)

    def maybe_insert(self, snapshot: Snapshot) -> "SnapshotStore":
        """Insert while below capacity; else replace the worst entry iff
        the new score is strictly smaller. Equal-score ties keep the entry
        seen first (lower epoch)."""
        if len(self.entries) < self.capacity:
            self.entries.append(snapshot)
            return self
        worst = max(range(len(self.entries)),
                    key=lambda i: (self.entries[i].clid_score, self.entries[i].epoch))
        if snapshot.clid_score < self.entries[worst].clid_score:
            self.entries[worst] = snapshot
        return self

    def sorted_entries(self):
        return sorted(self.entries, key=lambda s: (s.clid_score, s.epoch))


def ensemble_predict(store: SnapshotStore, X: np.ndarray) -> np.ndarray:
    """Average the class-probability outputs of every stored snapshot."""
    if len(store) == 0:
        raise ValueError("empty snapshot store")
    F = None
    for snap in store.entries:
        Q = classifier_forward(snap.to_model(), X).Q
        F = Q if F is None else F + Q
    return F / len(store)


def _true_class_scores(F: np.ndarray, labels: np.ndarray) -> np.ndarray:
    F = np.asarray(F, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= F.shape[1]:
        raise ValueError(f"label out of range for {F.shape[1]} classes")
    return F[np.arange(F.shape[0]), labels]


def exponential_loss(F: np.ndarray, labels: np.ndarray) -> float:
    """Mean of exp(-predicted probability of the true class)."""
    return float(np.mean(np.exp(-_true_class_scores(F, labels))))


def per_snapshot_risk(snapshot: Snapshot, X: np.ndarray, labels: np.ndarray) -> float:
    """Exponential loss of a single snapshot's own predictions."""
    Q = classifier_forward(snapshot.to_model(), X).Q
    return exponential_loss(Q, labels)


@dataclass
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool


def bound_check_scores(scores: np.ndarray, slack: float = 1e-12) -> BoundCheck:
    """Check the ensemble bound on a (K, n) matrix of true-class scores.

    lhs is the exponential loss of the score average over K; rhs is the
    geometric mean of the per-row exponential losses.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    lhs = float(np.mean(np.exp(-scores.mean(axis=0))))
    risks = np.mean(np.exp(-scores), axis=1)
    rhs = float(np.exp(np.mean(np.log(risks))))
    return BoundCheck(lhs, rhs, bool(lhs <= rhs + slack))


def bound_check(store: SnapshotStore, X: np.ndarray, labels: np.ndarray) -> BoundCheck:
    """Evaluate both sides of the exponential-loss bound for a store."""
    if len(store) == 0:
        raise ValueError("empty snapshot store")
    labels = np.asarray(labels, dtype=np.int64)
    rows = []
    for snap in store.entries:
        Q = classifier_forward(snap.to_model(), X).Q
        rows.append(_true_class_scores(Q, labels))
    return bound_check_scores(np.stack(rows))


# --------------------------------------------------------------------------
# Snapshot files: two metadata lines followed by the classifier text format.
# --------------------------------------------------------------------------

SNAPSHOT_MAGIC = "clid-snapshot 1"


def snapshot_to_text(snapshot: Snapshot) -> str:
    return (f"{SNAPSHOT_MAGIC}\n"
            f"epoch {snapshot.epoch}\n"
            f"clid_score {snapshot.clid_score:.17g}\n"
            + model_to_text(snapshot.to_model()))


def snapshot_from_text(text: str) -> Snapshot:
    lines = text.splitlines()
    if not lines or lines[0] != SNAPSHOT_MAGIC:
        raise ValueError("not a serialized snapshot (bad magic line)")
    if not lines[1].startswith("epoch ") or not lines[2].startswith("clid_score "):
        raise ValueError("malformed snapshot header")
    epoch = int(lines[1].split()[1])
    score = float(lines[2].split()[1])
    model = model_from_text("\n".join(lines[3:]))
    return Snapshot(model.to_params(), score, epoch)


def write_snapshot(snapshot: Snapshot, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(snapshot_to_text(snapshot))


def read_snapshot(path) -> Snapshot:
    with open(path, "r", encoding="ascii") as fh:
        return snapshot_from_text(fh.read())


def load_snapshot_dir(path) -> SnapshotStore:
    """Build a store from every ``*.snapshot`` file in a directory."""
    files = sorted(Path(path).glob("*.snapshot"))
    if not files:
        raise ValueError(f"no *.snapshot files in {path}")
    store = SnapshotStore(len(files))
    for f in files:
        store.maybe_insert(read_snapshot(f))
    return store

"""Classifier and loss-weighting networks with hand-written backward passes.

The classifier is a plain ReLU multilayer perceptron split into an
extractor (everything up to and including the last hidden layer, whose
output is the embedding ``Z``) and a softmax head producing class
probabilities ``Q``. The meta-network maps a scalar per-sample loss to a
weight in (0, 1) through one ReLU hidden layer and a sigmoid output.

No autodiff framework is used: every gradient in this module is an
explicit application of the chain rule, and the test suite checks each
one against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import LOG_FLOOR, relu, sigmoid, softmax


class ParamLayout:
    """Named, ordered blocks of a flattened parameter vector."""

    def __init__(self, blocks):
        self.blocks = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in blocks)
        self._slices = {}
        offset = 0
        for name, shape in self.blocks:
            size = int(np.prod(shape)) if shape else 1
            if name in self._slices:
                raise ValueError(f"duplicate block name {name!r}")
            self._slices[name] = (slice(offset, offset + size), shape)
            offset += size
        self.size = offset

    def names(self):
        return [name for name, _ in self.blocks]

    def slice_of(self, name):
        return self._slices[name]

    def __eq__(self, other):
        return isinstance(other, ParamLayout) and self.blocks == other.blocks

    def __repr__(self):
        return f"ParamLayout({self.blocks!r})"


class ParamVector:
    """Flat float64 copy of a network's parameters with named block views."""

    def __init__(self, layout: ParamLayout, values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (layout.size,):
            raise ValueError(f"expected {layout.size} values, got shape {values.shape}")
        self.layout = layout
        self.values = values

    @classmethod
    def zeros(cls, layout: ParamLayout) -> "ParamVector":
        return cls(layout, np.zeros(layout.size))

    def block(self, name: str) -> np.ndarray:
        sl, shape = self.layout.slice_of(name)
        return self.values[sl].reshape(shape)

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.values.copy())

    def __repr__(self):
        return f"ParamVector(size={self.layout.size})"


def _he_normal(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class MlpClassifier:
    """ReLU MLP ``extractor -> softmax head`` over float64 parameters."""

    def __init__(self, extractor, head):
        self.extractor = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64))
                          for W, b in extractor]
        if not self.extractor:
            raise ValueError("extractor needs at least one layer")
        Wh, bh = head
        self.head = (np.asarray(Wh, dtype=np.float64), np.asarray(bh, dtype=np.float64))
        self._validate()

    def _validate(self):
        prev = self.extractor[0][0].shape[0]
        for i, (W, b) in enumerate(self.extractor):
            if W.ndim != 2 or b.ndim != 1 or W.shape[1] != b.shape[0]:
                raise ValueError(f"extractor layer {i + 1} has inconsistent shapes")
            if W.shape[0] != prev:
                raise ValueError(f"extractor layer {i + 1} does not chain: {W.shape[0]} != {prev}")
            prev = W.shape[1]
        Wh, bh = self.head
        if Wh.shape[0] != prev or Wh.shape[1] != bh.shape[0]:
            raise ValueError("head does not chain onto the extractor")
        for W, b in [*self.extractor, self.head]:
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise ValueError("nonfinite parameters")

    @classmethod
    def initialize(cls, input_dim: int, hidden_sizes, n_classes: int,
                   rng: np.random.Generator) -> "MlpClassifier":
        """He-initialized weights, zero biases, drawn in layer order."""
        hidden_sizes = tuple(int(h) for h in hidden_sizes)
        if input_dim < 1 or n_classes < 2 or not hidden_sizes:
            raise ValueError("need input_dim >= 1, n_classes >= 2 and at least one hidden layer")
        extractor = []
        prev = int(input_dim)
        for h in hidden_sizes:
            extractor.append((_he_normal(rng, prev, h), np.zeros(h)))
            prev = h
        head = (_he_normal(rng, prev, int(n_classes)), np.zeros(int(n_classes)))
        return cls(extractor, head)

    @property
    def input_dim(self) -> int:
        return self.extractor[0][0].shape[0]

    @property
    def hidden_sizes(self):
        return tuple(W.shape[1] for W, _ in self.extractor)

    @property
    def embed_dim(self) -> int:
        return self.extractor[-1][0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.head[0].shape[1]

    def layout(self) -> ParamLayout:
        blocks = []
        for i, (W, b) in enumerate(self.extractor):
            blocks.append((f"ext{i + 1}.w", W.shape))
            blocks.append((f"ext{i + 1}.b", b.shape))
        blocks.append(("head.w", self.head[0].shape))
        blocks.append(("head.b", self.head[1].shape))
        return ParamLayout(blocks)

    def to_params(self) -> ParamVector:
        parts = []
        for W, b in [*self.extractor, self.head]:
            parts.append(W.ravel())
            parts.append(b.ravel())
        return ParamVector(self.layout(), np.concatenate(parts))

    @classmethod
    def from_params(cls, params: ParamVector) -> "MlpClassifier":
        """Rebuild a classifier from a vector whose layout names its layers."""
        extractor = []
        head = None
        names = params.layout.names()
        i = 0
        while i < len(names):
            name = names[i]
            if name.startswith("ext") and name.endswith(".w"):
                W = params.block(name).copy()
                b = params.block(names[i + 1]).copy()
                extractor.append((W, b))
                i += 2
            elif name == "head.w":
                head = (params.block("head.w").copy(), params.block("head.b").copy())
                i += 2
            else:
                raise ValueError(f"unrecognized block {name!r} for a classifier layout")
        if head is None:
            raise ValueError("layout has no head block")
        return cls(extractor, head)


class MetaNet:
    """Scalar loss -> weight in (0, 1): affine, ReLU, affine, sigmoid."""

    def __init__(self, hidden_w, hidden_b, out_w, out_b):
        self.hidden_w = np.asarray(hidden_w, dtype=np.float64).reshape(1, -1)
        self.hidden_b = np.asarray(hidden_b, dtype=np.float64).ravel()
        self.out_w = np.asarray(out_w, dtype=np.float64).reshape(-1, 1)
        self.out_b = np.asarray(out_b, dtype=np.float64).ravel()
        h = self.hidden_w.shape[1]
        if self.hidden_b.shape[0] != h or self.out_w.shape[0] != h:
            raise ValueError("meta-net layer shapes do not chain")
        if self.out_b.shape != (1,):
            raise ValueError("meta-net output must be scalar")

    @classmethod
    def initialize(cls, rng: np.random.Generator, hidden: int = 100) -> "MetaNet":
        """He hidden layer; output layer all zero so the initial weight is 0.5."""
        if hidden < 1:
            raise ValueError("hidden size must be >= 1")
        return cls(_he_normal(rng, 1, hidden), np.zeros(hidden),
                   np.zeros((hidden, 1)), np.zeros(1))

    @property
    def hidden_size(self) -> int:
        return self.hidden_w.shape[1]

    def layout(self) -> ParamLayout:
        return ParamLayout([
            ("hidden.w", self.hidden_w.shape),
            ("hidden.b", self.hidden_b.shape),
            ("out.w", self.out_w.shape),
            ("out.b", self.out_b.shape),
        ])

    def to_params(self) -> ParamVector:
        return ParamVector(self.layout(), np.concatenate([
            self.hidden_w.ravel(), self.hidden_b.ravel(),
            self.out_w.ravel(), self.out_b.ravel(),
        ]))

    @classmethod
    def from_params(cls, params: ParamVector) -> "MetaNet":
        return cls(params.block("hidden.w").copy(), params.block("hidden.b").copy(),
                   params.block("out.w").copy(), params.block("out.b").copy())


@dataclass
class ForwardTrace:
    """Cached intermediates of one classifier forward pass over a batch.

    ``activations[0]`` is the input batch; ``activations[i]`` the post-ReLU
    output of extractor layer ``i``. ``Z`` is the final embedding batch and
    ``Q`` the softmax class probabilities.
    """

    activations: list = field(repr=False)
    pre_activations: list = field(repr=False)
    logits: np.ndarray = field(repr=False)
    Q: np.ndarray = field(repr=False)

    @property
    def Z(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def batch_size(self) -> int:
        return self.Q.shape[0]


def classifier_forward(model: MlpClassifier, X: np.ndarray) -> ForwardTrace:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.input_dim:
        raise ValueError(f"input has {X.shape[1]} features, model expects {model.input_dim}")
    activations = [X]
    pre_activations = []
    a = X
    for W, b in model.extractor:
        pre = a @ W + b
        a = relu(pre)
        pre_activations.append(pre)
        activations.append(a)
    Wh, bh = model.head
    logits = a @ Wh + bh
    Q = softmax(logits)
    return ForwardTrace(activations, pre_activations, logits, Q)


def _check_labels(labels: np.ndarray, n_classes: int, n_rows: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise ValueError(f"expected {n_rows} labels, got shape {labels.shape}")
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range for {n_classes} classes")
    return labels


def per_sample_ce(Q: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Cross-entropy -log Q[i, y_i] per row, floored at LOG_FLOOR."""
    Q = np.asarray(Q, dtype=np.float64)
    labels = _check_labels(labels, Q.shape[1], Q.shape[0])
    p = Q[np.arange(Q.shape[0]), labels]
    return -np.log(np.maximum(p, LOG_FLOOR))


def per_sample_mae(Q: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """L1 distance between each probability row and its one-hot label."""
    Q = np.asarray(Q, dtype=np.float64)
    labels = _check_labels(labels, Q.shape[1], Q.shape[0])
    onehot = np.zeros_like(Q)
    onehot[np.arange(Q.shape[0]), labels] = 1.0
    return np.abs(Q - onehot).sum(axis=1)


def _onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _backprop_from_dlogits(model: MlpClassifier, trace: ForwardTrace,
                           dlogits: np.ndarray) -> ParamVector:
    """Accumulate parameter gradients given d(loss)/d(logits) for a batch."""
    grads = {}
    Wh, _ = model.head
    grads["head.w"] = trace.activations[-1].T @ dlogits
    grads["head.b"] = dlogits.sum(axis=0)
    delta = dlogits @ Wh.T
    for i in range(len(model.extractor) - 1, -1, -1):
        W, _ = model.extractor[i]
        delta = delta * (trace.pre_activations[i] > 0.0)
        grads[f"ext{i + 1}.w"] = trace.activations[i].T @ delta
        grads[f"ext{i + 1}.b"] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ W.T
    layout = model.layout()
    return ParamVector(layout, np.concatenate([grads[n].ravel() for n in layout.names()]))


def backprop_embedding_gradient(model: MlpClassifier, trace: ForwardTrace,
                                dZ: np.ndarray) -> ParamVector:
    """Gradient of a scalar w.r.t. extractor params given d(scalar)/dZ.

    The head block is identically zero: Z does not depend on it.
    """
    grads = {"head.w": np.zeros_like(model.head[0]),
             "head.b": np.zeros_like(model.head[1])}
    delta = np.asarray(dZ, dtype=np.float64)
    for i in range(len(model.extractor) - 1, -1, -1):
        W, _ = model.extractor[i]
        delta = delta * (trace.pre_activations[i] > 0.0)
        grads[f"ext{i + 1}.w"] = trace.activations[i].T @ delta
        grads[f"ext{i + 1}.b"] = delta.sum(axis=0)
        if i > 0:
            delta = delta @ W.T
    layout = model.layout()
    return ParamVector(layout, np.concatenate([grads[n].ravel() for n in layout.names()]))


def softmax_vjp(Q: np.ndarray, dQ: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    return Q * (dQ - np.sum(dQ * Q, axis=1, keepdims=True))


def backward_weighted_ce(model: MlpClassifier, trace: ForwardTrace, labels: np.ndarray,
                         weights: np.ndarray) -> ParamVector:
    """Gradient of (1/n) sum_i w_i * CE_i w.r.t. all classifier parameters."""
    n = trace.batch_size
    labels = _check_labels(labels, model.n_classes, n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {weights.shape}")
    dlogits = (trace.Q - _onehot(labels, model.n_classes)) * (weights / n)[:, None]
    return _backprop_from_dlogits(model, trace, dlogits)


def backward_weighted_mae(model: MlpClassifier, trace: ForwardTrace, labels: np.ndarray,
                          weights: np.ndarray) -> ParamVector:
    """Gradient of (1/n) sum_i w_i * MAE_i w.r.t. all classifier parameters."""
    n = trace.batch_size
    labels = _check_labels(labels, model.n_classes, n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError(f"expected {n} weights, got shape {weights.shape}")
    sign = np.ones_like(trace.Q)
    sign[np.arange(n), labels] = -1.0
    dlogits = softmax_vjp(trace.Q, sign) * (weights / n)[:, None]
    return _backprop_from_dlogits(model, trace, dlogits)


def per_sample_grad_matrix(model: MlpClassifier, trace: ForwardTrace,
                           labels: np.ndarray) -> np.ndarray:
    """(n, P) matrix whose row i is the gradient of CE_i alone.

    Row-mean equals backward_weighted_ce with unit weights. Materializing
    the full matrix is deliberate: the meta step needs every g_i = G_i . H
    exactly, and P stays small at this scale.
    """
    n = trace.batch_size
    labels = _check_labels(labels, model.n_classes, n)
    DL = trace.Q - _onehot(labels, model.n_classes)
    blocks = {}
    blocks["head.w"] = np.einsum("ne,nc->nec", trace.activations[-1], DL).reshape(n, -1)
    blocks["head.b"] = DL.copy()
    Wh, _ = model.head
    delta = DL @ Wh.T
    for i in range(len(model.extractor) - 1, -1, -1):
        W, _ = model.extractor[i]
        delta = delta * (trace.pre_activations[i] > 0.0)
        blocks[f"ext{i + 1}.w"] = np.einsum("ni,nj->nij", trace.activations[i], delta).reshape(n, -1)
        blocks[f"ext{i + 1}.b"] = delta.copy()
        if i > 0:
            delta = delta @ W.T
    layout = model.layout()
    return np.concatenate([blocks[name] for name in layout.names()], axis=1)


def per_sample_grads(model: MlpClassifier, trace: ForwardTrace, labels: np.ndarray):
    """Per-sample CE gradients as a list of ParamVector."""
    G = per_sample_grad_matrix(model, trace, labels)
    layout = model.layout()
    return [ParamVector(layout, G[i].copy()) for i in range(G.shape[0])]


def metanet_forward(meta: MetaNet, losses: np.ndarray) -> np.ndarray:
    """Map per-sample losses to sample weights, each strictly in (0, 1)."""
    losses = np.asarray(losses, dtype=np.float64).ravel()
    hidden = relu(losses[:, None] * meta.hidden_w.ravel() + meta.hidden_b)
    out = hidden @ meta.out_w.ravel() + meta.out_b[0]
    return sigmoid(out)


def metanet_grad_matrix(meta: MetaNet, losses: np.ndarray) -> np.ndarray:
    """(n, P_psi) matrix: row i is d weight_i / d psi at fixed input loss_i."""
    losses = np.asarray(losses, dtype=np.float64).ravel()
    hpre = losses[:, None] * meta.hidden_w.ravel() + meta.hidden_b
    hidden = relu(hpre)
    out = hidden @ meta.out_w.ravel() + meta.out_b[0]
    w = sigmoid(out)
    sp = (w * (1.0 - w))[:, None]
    d_out_w = sp * hidden
    d_out_b = sp
    dpre = sp * meta.out_w.ravel() * (hpre > 0.0)
    d_hidden_w = dpre * losses[:, None]
    d_hidden_b = dpre
    return np.concatenate([d_hidden_w, d_hidden_b, d_out_w, d_out_b], axis=1)


def metanet_grad(meta: MetaNet, loss: float) -> ParamVector:
    """Gradient of the scalar weight output w.r.t. the meta-net parameters."""
    row = metanet_grad_matrix(meta, np.array([float(loss)]))[0]
    return ParamVector(meta.layout(), row)


def layer_grad_norms(g: ParamVector) -> dict:
    """Euclidean norm of each named parameter block."""
    return {name: float(np.linalg.norm(g.block(name))) for name in g.layout.names()}


# ---------------------------------------------------------------------------
# Text serialization. The schema is line oriented:
#
#   mlp-classifier 1
#   input_dim <d>
#   hidden <h1> <h2> ...
#   classes <c>
#   block <name> <dim> [<dim>]
#   <one line of %.17g values per matrix row; one line for a bias vector>
#   ... one block stanza per layout block, in layout order ...
#
# %.17g preserves every float64 bit pattern through a text round trip.
# ---------------------------------------------------------------------------

MODEL_MAGIC = "mlp-classifier 1"


def _format_row(values: np.ndarray) -> str:
    return " ".join(f"{v:.17g}" for v in values)


def model_to_text(model: MlpClassifier) -> str:
    lines = [MODEL_MAGIC,
             f"input_dim {model.input_dim}",
             "hidden " + " ".join(str(h) for h in model.hidden_sizes),
             f"classes {model.n_classes}"]
    params = model.to_params()
    for name, shape in params.layout.blocks:
        lines.append("block " + name + " " + " ".join(str(s) for s in shape))
        arr = params.block(name)
        if arr.ndim == 1:
            lines.append(_format_row(arr))
        else:
            for row in arr:
                lines.append(_format_row(row))
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> MlpClassifier:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MODEL_MAGIC:
        raise ValueError("not a serialized classifier (bad magic line)")
    if not (lines[1].startswith("input_dim ") and lines[2].startswith("hidden ")
            and lines[3].startswith("classes ")):
        raise ValueError("malformed classifier header")
    idx = 4
    blocks = {}
    order = []
    while idx < len(lines):
        parts = lines[idx].split()
        if parts[0] != "block":
            raise ValueError(f"expected block header at line {idx + 1}")
        name = parts[1]
        shape = tuple(int(s) for s in parts[2:])
        n_rows = shape[0] if len(shape) == 2 else 1
        rows = []
        for r in range(n_rows):
            vals = [float(v) for v in lines[idx + 1 + r].split()]
            rows.append(vals)
        arr = np.array(rows, dtype=np.float64).reshape(shape)
        blocks[name] = arr
        order.append((name, shape))
        idx += 1 + n_rows
    layout = ParamLayout(order)
    flat = np.concatenate([blocks[name].ravel() for name, _ in order])
    return MlpClassifier.from_params(ParamVector(layout, flat))

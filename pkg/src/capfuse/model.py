"""Tied-weight siamese MLP with contrastive losses and hand-written backprop.

Both wings share one parameter set. A wing is a stack of affine layers with
rectifiers between them; the last layer is linear and its output is scaled
to unit length. Pairs are compared by the euclidean distance between the two
unit embeddings.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import Pair

DEFAULT_LAYERS = (1024, 2048, 1024, 512, 512)
DEFAULT_INPUT_DIM = 1024
LOSS_KINDS = ("standard", "modified")
CHECKPOINT_MAGIC = "SIAMESE v1"


class DegenerateEmbedding(ArithmeticError):
    """A wing produced an all-zero vector before normalization."""


class TrainingDiverged(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class SiameseModel:
    input_dim: int
    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        fan_in = self.input_dim
        if len(self.weights) != len(self.layer_dims) or len(self.biases) != len(self.layer_dims):
            raise ValueError("one weight matrix and one bias per layer required")
        for l, (units, w, b) in enumerate(zip(self.layer_dims, self.weights, self.biases)):
            if w.shape != (units, fan_in):
                raise ValueError(f"layer {l}: weight shape {w.shape} != {(units, fan_in)}")
            if b.shape != (units,):
                raise ValueError(f"layer {l}: bias shape {b.shape} != {(units,)}")
            fan_in = units

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        """Weights and biases interleaved: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def copy(self) -> "SiameseModel":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class LossConfig:
    margin: float = 1.0
    batch_size: int = 64
    loss_kind: str = "modified"

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    shuffle_each_epoch: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)


def init_model(input_dim: int = DEFAULT_INPUT_DIM, layer_dims: Sequence[int] = DEFAULT_LAYERS, seed: int = 0) -> SiameseModel:
    """He-normal weights (std sqrt(2/fan_in)), zero biases."""
    layer_dims = [int(u) for u in layer_dims]
    if input_dim < 1 or not layer_dims or min(layer_dims) < 1:
        raise ValueError("input_dim and every layer width must be positive")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    fan_in = input_dim
    for units in layer_dims:
        weights.append(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(units, fan_in)))
        biases.append(np.zeros(units))
        fan_in = units
    return SiameseModel(input_dim, layer_dims, weights, biases)


def _wing(m: SiameseModel, X: np.ndarray):
    """Forward one wing on a row batch. Returns (embeddings, norms, cache)."""
    acts = [X]
    h = X
    last = len(m.weights) - 1
    for l, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = h @ w.T + b
        h = np.maximum(z, 0.0) if l < last else z
        acts.append(h)
    norms = np.sqrt(np.einsum("ij,ij->i", h, h))
    if np.any(norms <= 1e-12):
        raise DegenerateEmbedding("pre-normalization output is the zero vector")
    return h / norms[:, None], norms, acts


def _wing_backward(m: SiameseModel, g_emb, emb, norms, acts):
    """Backprop dE/d(embedding) through normalization and all layers."""
    # d(u/|u|)/du = (I - e e^T) / |u|
    g = (g_emb - emb * np.einsum("ij,ij->i", emb, g_emb)[:, None]) / norms[:, None]
    grads_w = [None] * len(m.weights)
    grads_b = [None] * len(m.weights)
    for l in range(len(m.weights) - 1, -1, -1):
        grads_w[l] = g.T @ acts[l]
        grads_b[l] = g.sum(axis=0)
        if l > 0:
            g = (g @ m.weights[l]) * (acts[l] > 0)
    return grads_w, grads_b


def _check_input(m: SiameseModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != m.input_dim:
        raise ValueError(f"input dim {X.shape[1]} != model input_dim {m.input_dim}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite input")
    return X


def forward(m: SiameseModel, x) -> np.ndarray:
    """Unit-norm embedding of one input vector, or of each row of a matrix."""
    X = _check_input(m, x)
    emb, _, _ = _wing(m, X)
    return emb[0] if np.ndim(x) == 1 else emb


def embedding_distance(e1, e2) -> float:
    return float(np.linalg.norm(np.asarray(e1) - np.asarray(e2)))


def _check_grades(y: np.ndarray, kind: str) -> None:
    if kind == "standard":
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("standard contrastive loss needs binary relevance (0 or 1)")
    elif not np.all((y >= 0) & (y <= 3)):
        raise ValueError("relevance grade out of range 0-3")


def _terms(d: np.ndarray, y: np.ndarray, kind: str, margin: float):
    """Per-pair loss terms and their derivatives with respect to d.

    Hinge terms are active only strictly inside the margin, so the boundary
    itself contributes zero value and zero slope.
    """
    if kind == "standard":
        slack = margin - d
        active = slack > 0
        term = y * d + (1 - y) * np.where(active, slack, 0.0)
        slope = y - (1 - y) * active
    else:
        slack = margin - d * d
        active = (y == 0) & (slack > 0)
        term = y * y * d + np.where(active, slack, 0.0)
        slope = y * y - np.where(active, 2.0 * d, 0.0)
    return term, slope


def _pair_loss(pairs, cfg: LossConfig, kind: str) -> float:
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    if arr.shape[0] == 0:
        return 0.0
    d, y = arr[:, 0], arr[:, 1]
    _check_grades(y, kind)
    term, _ = _terms(d, y, kind, cfg.margin)
    return float(term.sum() / (2 * arr.shape[0]))


def loss_standard(pairs, cfg: LossConfig = LossConfig()) -> float:
    """Binary contrastive loss over (d, y) pairs, y in {0, 1}:
    mean over pairs of ``y*d + (1-y)*max(margin - d, 0)``, halved."""
    return _pair_loss(pairs, cfg, "standard")


def loss_modified(pairs, cfg: LossConfig = LossConfig()) -> float:
    """Graded contrastive loss over (d, y) pairs, y in 0..3:
    mean over pairs of ``y**2 * d + [y == 0] * max(margin - d**2, 0)``, halved.
    """
    return _pair_loss(pairs, cfg, "modified")


def _batch_loss_and_grad(m: SiameseModel, Xa, Xb, y, cfg: LossConfig, need_grad=True):
    y = np.asarray(y, dtype=np.float64)
    _check_grades(y, cfg.loss_kind)
    n = y.shape[0]
    ea, na, ca = _wing(m, Xa)
    eb, nb, cb = _wing(m, Xb)
    diff = ea - eb
    d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    term, slope = _terms(d, y, cfg.loss_kind, cfg.margin)
    loss = float(term.sum() / (2 * n))
    if not need_grad:
        return loss, None
    # dd/de_a = (e_a - e_b)/d, taken as 0 at d = 0
    safe_d = np.where(d > 0, d, 1.0)
    coef = np.where(d > 0, slope / (2 * n) / safe_d, 0.0)
    g_a = coef[:, None] * diff
    gw_a, gb_a = _wing_backward(m, g_a, ea, na, ca)
    gw_b, gb_b = _wing_backward(m, -g_a, eb, nb, cb)
    grads = []
    for wa, ba, wb, bb in zip(gw_a, gb_a, gw_b, gb_b):
        grads += [wa + wb, ba + bb]
    return loss, grads


def batch_grad(m: SiameseModel, batch, cfg: LossConfig = LossConfig()):
    """Loss of a batch of (x_a, x_b, y) triples and its exact gradient.

    Gradients come back in :meth:`SiameseModel.params` order. Each one sums
    the contributions of both wings, computed separately so that swapping
    the roles of a and b gives bit-identical results.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    Xa = _check_input(m, np.vstack([np.asarray(t[0], dtype=np.float64) for t in batch]))
    Xb = _check_input(m, np.vstack([np.asarray(t[1], dtype=np.float64) for t in batch]))
    y = np.array([t[2] for t in batch], dtype=np.float64)
    return _batch_loss_and_grad(m, Xa, Xb, y, cfg)


def batch_loss(m: SiameseModel, batch, cfg: LossConfig = LossConfig()) -> float:
    Xa = _check_input(m, np.vstack([np.asarray(t[0], dtype=np.float64) for t in batch]))
    Xb = _check_input(m, np.vstack([np.asarray(t[1], dtype=np.float64) for t in batch]))
    y = np.array([t[2] for t in batch], dtype=np.float64)
    return _batch_loss_and_grad(m, Xa, Xb, y, cfg, need_grad=False)[0]


def sgd_step(m: SiameseModel, grads, cfg: TrainConfig, velocity=None):
    """Classical momentum, in place: ``v = mu*v - lr*g; theta += v``.

    Returns ``(m, velocity)``; pass ``velocity=None`` on the first step.
    """
    params = m.params()
    if len(grads) != len(params):
        raise ValueError(f"expected {len(params)} gradient arrays, got {len(grads)}")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocity):
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        v *= cfg.momentum
        v -= cfg.learning_rate * g
        p += v
    return m, velocity


def train(
    m: SiameseModel,
    pairs: Sequence[Pair],
    lookup: Callable[[str], np.ndarray] | dict,
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[SiameseModel, TrainHistory]:
    """Mini-batch SGD over ``pairs``; returns a trained copy and the history.

    ``lookup`` maps an image id to its network input (a dict works). Epoch
    loss is the pair-weighted mean of the batch losses.
    """
    get = lookup.__getitem__ if isinstance(lookup, dict) else lookup
    m = m.copy()
    history = TrainHistory()
    if train_cfg.epochs == 0 or not pairs:
        return m, history

    ids = list(dict.fromkeys([p.id_a for p in pairs] + [p.id_b for p in pairs]))
    index = {id_: i for i, id_ in enumerate(ids)}
    rows = []
    for id_ in ids:
        try:
            rows.append(get(id_))
        except KeyError:
            raise KeyError(f"pair id {id_!r} has no input vector") from None
    X = _check_input(m, np.vstack(rows))
    ia = np.array([index[p.id_a] for p in pairs])
    ib = np.array([index[p.id_b] for p in pairs])
    y = np.array([p.y for p in pairs], dtype=np.float64)
    _check_grades(y, loss_cfg.loss_kind)

    rng = np.random.default_rng(train_cfg.seed)
    velocity = None
    n, bs = len(pairs), loss_cfg.batch_size
    for epoch in range(train_cfg.epochs):
        order = rng.permutation(n) if train_cfg.shuffle_each_epoch else np.arange(n)
        total = 0.0
        for start in range(0, n, bs):
            sel = order[start:start + bs]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = _batch_loss_and_grad(m, X[ia[sel]], X[ib[sel]], y[sel], loss_cfg)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch + 1}, batch starting {start}")
            total += loss * len(sel)
            m, velocity = sgd_step(m, grads, train_cfg, velocity)
        mean = total / n
        history.epoch_loss.append(mean)
        if on_epoch is not None:
            on_epoch(epoch + 1, mean)
    return m, history


def _fmt(x) -> str:
    return repr(float(x))


def save_model(m: SiameseModel, path) -> None:
    lines = [
        CHECKPOINT_MAGIC,
        f"input_dim {m.input_dim}",
        "layers " + " ".join(map(str, [len(m.layer_dims), *m.layer_dims])),
    ]
    for key, value in m.meta.items():
        lines.append(f"# {key} {value}")
    for l, (w, b) in enumerate(zip(m.weights, m.biases)):
        lines.append(f"W {l} {w.shape[0]} {w.shape[1]}")
        lines.extend(" ".join(map(_fmt, row)) for row in w)
        lines.append(f"b {l} {b.shape[0]}")
        lines.append(" ".join(map(_fmt, b)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> SiameseModel:
    """Parse a checkpoint; never returns a partially filled model."""
    with open(path) as fh:
        text = fh.read()
    lines = text.split("\n")
    if not lines or lines[0].strip() != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a '{CHECKPOINT_MAGIC}' checkpoint (got {lines[0][:40]!r})")
    try:
        key, value = lines[1].split()
        if key != "input_dim":
            raise ValueError
        input_dim = int(value)
        head = lines[2].split()
        if head[0] != "layers":
            raise ValueError
        n_layers = int(head[1])
        layer_dims = [int(t) for t in head[2:]]
    except (ValueError, IndexError):
        raise CheckpointError(f"{path}: malformed header") from None
    if len(layer_dims) != n_layers:
        raise CheckpointError(f"{path}: header declares {n_layers} layers but lists {len(layer_dims)}")
    if input_dim < 1 or not layer_dims or min(layer_dims) < 1:
        raise CheckpointError(f"{path}: non-positive dimension in header")

    meta = {}
    pos = 3
    while pos < len(lines) and lines[pos].startswith("#"):
        parts = lines[pos][1:].strip().split(None, 1)
        if parts:
            meta[parts[0]] = parts[1] if len(parts) > 1 else ""
        pos += 1
    tokens = " ".join(lines[pos:]).split()
    cursor = 0

    def take(count, what):
        nonlocal cursor
        chunk = tokens[cursor:cursor + count]
        if len(chunk) != count:
            raise CheckpointError(f"{path}: truncated while reading {what}")
        cursor += count
        return chunk

    try:
        weights, biases = _read_layers(path, take, input_dim, layer_dims)
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: unparseable value ({exc})") from None
    if cursor != len(tokens):
        raise CheckpointError(f"{path}: {len(tokens) - cursor} unexpected trailing values after layer {n_layers - 1}")
    for l, (w, b) in enumerate(zip(weights, biases)):
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise CheckpointError(f"{path}: non-finite parameter in layer {l}")
    return SiameseModel(input_dim, layer_dims, weights, biases, meta)


def _read_layers(path, take, input_dim, layer_dims):
    weights, biases = [], []
    fan_in = input_dim
    for l, units in enumerate(layer_dims):
        tag = take(4, f"layer {l} weight header")
        if tag[0] != "W" or tag[1] != str(l):
            raise CheckpointError(f"{path}: expected weight header for layer {l}, got {' '.join(tag)!r}")
        rows, cols = int(tag[2]), int(tag[3])
        if (rows, cols) != (units, fan_in):
            raise CheckpointError(
                f"{path}: layer {l} weight declared {rows}x{cols}, architecture needs {units}x{fan_in}"
            )
        w = np.array(take(rows * cols, f"layer {l} weights"), dtype=np.float64)
        tag = take(3, f"layer {l} bias header")
        if tag[0] != "b" or tag[1] != str(l):
            raise CheckpointError(f"{path}: layer {l} weight size mismatch or missing bias header")
        if int(tag[2]) != units:
            raise CheckpointError(f"{path}: layer {l} bias declared {tag[2]}, architecture needs {units}")
        b = np.array(take(units, f"layer {l} biases"), dtype=np.float64)
        weights.append(w.reshape(rows, cols))
        biases.append(b)
        fan_in = units
    return weights, biases

"""Per-episode classification heads over frozen feature vectors.

All heads map query features to a (rows x K) probability matrix whose rows
sum to 1. Feature blocks are float32; every reduction (means, dot products,
training) runs in float64. Trained heads use full-support batches by
default, which makes fitting deterministic without any seed dependence.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .sampler import SplitMix64

logger = logging.getLogger(__name__)

WarnFn = Callable[[str], None]

DISTANCES = ("negative-cosine", "squared-euclidean")


def _warn(warn: WarnFn | None, message: str) -> None:
    if warn is None:
        logger.warning(message)
    else:
        warn(message)


@dataclass(frozen=True)
class FeatureMatrix:
    """A dense float32 feature block, with local class labels iff support."""

    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        values = np.ascontiguousarray(self.values, dtype=np.float32)
        if values.ndim != 2:
            raise ValueError("feature block must be 2-D (rows x dim)")
        if not np.isfinite(values).all():
            raise ValueError("non-finite feature value")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (values.shape[0],):
                raise ValueError("labels must have one entry per row")
            if labels.min(initial=0) < 0:
                raise ValueError("local class ids must be non-negative")
            labels.flags.writeable = False
            object.__setattr__(self, "labels", labels)

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])

    def require_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("operation needs a labelled support block")
        return self.labels


@dataclass(frozen=True)
class TrainConfig:
    """SGD-with-momentum recipe shared by the trained heads.

    ``batch_size`` of None means one full-support batch per epoch.
    """

    epochs: int = 100
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int | None = None
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


@dataclass(frozen=True)
class LinearHead:
    weights: np.ndarray  # (K, dim)
    bias: np.ndarray  # (K,)


@dataclass(frozen=True)
class CosineHead:
    weights: np.ndarray  # (K, dim) class direction vectors
    scale: float  # logit multiplier applied to cosine similarities


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax in float64."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _num_classes(labels: np.ndarray) -> int:
    k = int(labels.max()) + 1
    present = np.unique(labels)
    if present.size != k:
        missing = sorted(set(range(k)) - set(present.tolist()))
        raise ValueError(f"support labels must cover all classes; missing {missing}")
    return k


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((labels.size, k))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _epoch_batches(
    n: int, batch_size: int | None, rng: SplitMix64
) -> list[np.ndarray | None]:
    # None stands for the full block, letting callers skip the index copy.
    if batch_size is None or batch_size >= n:
        return [None]
    order = list(range(n))
    rng.shuffle(order)
    order = np.asarray(order)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _check_loss(loss: float, epoch: int) -> None:
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss at epoch {epoch}")


def fit_linear(support: FeatureMatrix, config: TrainConfig, seed: int) -> LinearHead:
    """Train a softmax linear probe with SGD + momentum.

    Weights and bias start at zero and take exactly ``config.epochs`` passes
    of mean cross-entropy descent; the velocity update is
    v = momentum * v + grad, w -= lr * v. Weight decay applies to the
    weights only. The seed only matters when mini-batching shuffles.
    """
    labels = support.require_labels()
    k = _num_classes(labels)
    x = support.values.astype(np.float64)
    y = _one_hot(labels, k)

    w = np.zeros((k, support.dim))
    b = np.zeros(k)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    rng = SplitMix64(seed)

    for epoch in range(config.epochs):
        for batch in _epoch_batches(support.rows, config.batch_size, rng):
            xb = x if batch is None else x[batch]
            yb = y if batch is None else y[batch]
            logits = xb @ w.T + b
            probs = softmax(logits)
            loss = -np.mean(np.log(np.maximum(probs[yb.astype(bool)], 1e-300)))
            _check_loss(loss, epoch)
            g = (probs - yb) / xb.shape[0]
            gw = g.T @ xb + config.weight_decay * w
            gb = g.sum(axis=0)
            vw = config.momentum * vw + gw
            vb = config.momentum * vb + gb
            w = w - config.learning_rate * vw
            b = b - config.learning_rate * vb
    return LinearHead(w, b)


def predict_linear(head: LinearHead, features: FeatureMatrix) -> np.ndarray:
    """Softmax of W x + b per row."""
    if features.dim != head.weights.shape[1]:
        raise ValueError(
            f"feature dim {features.dim} does not match head dim"
            f" {head.weights.shape[1]}"
        )
    logits = features.values.astype(np.float64) @ head.weights.T + head.bias
    return softmax(logits)


def _safe_row_normalize(
    block: np.ndarray, what: str, warn: WarnFn | None
) -> np.ndarray:
    """Rows scaled to unit norm; zero rows stay zero (cosine 0 to everything)."""
    norms = np.linalg.norm(block, axis=1, keepdims=True)
    zero = norms[:, 0] == 0
    if zero.any():
        _warn(warn, f"{int(zero.sum())} zero-norm {what} treated as cosine 0")
        norms[zero] = 1.0
    return block / norms


def centroid_predict(
    support: FeatureMatrix,
    query: FeatureMatrix,
    distance: str = "negative-cosine",
    warn: WarnFn | None = None,
) -> np.ndarray:
    """Classify queries by softmax over negative distances to class means.

    ``negative-cosine`` gives the mean-centroid classifier (softmax of
    cosine similarity to each prototype); ``squared-euclidean`` gives the
    frozen-feature prototype rule. Zero-norm queries or prototypes under
    cosine are scored as similarity 0 and reported through ``warn``.
    """
    if distance not in DISTANCES:
        raise ValueError(f"distance must be one of {DISTANCES}, got {distance!r}")
    labels = support.require_labels()
    if support.dim != query.dim:
        raise ValueError("support/query dim mismatch")
    k = _num_classes(labels)
    x = support.values.astype(np.float64)
    q = query.values.astype(np.float64)

    counts = np.bincount(labels, minlength=k).astype(np.float64)
    prototypes = np.zeros((k, support.dim))
    np.add.at(prototypes, labels, x)
    prototypes /= counts[:, None]

    if distance == "negative-cosine":
        qn = _safe_row_normalize(q, "query rows", warn)
        pn = _safe_row_normalize(prototypes, "prototypes", warn)
        logits = qn @ pn.T
    else:
        d2 = (q**2).sum(axis=1, keepdims=True) - 2.0 * q @ prototypes.T
        d2 = d2 + (prototypes**2).sum(axis=1)
        logits = -d2
    return softmax(logits)


def fit_cosine(
    support: FeatureMatrix, config: TrainConfig, seed: int, scale: float = 10.0
) -> CosineHead:
    """Train per-class direction vectors under scaled-cosine softmax loss.

    Weights start from a seeded standard Gaussian times 1e-2 and follow the
    same SGD-with-momentum recipe as the linear probe on logits
    scale * cos(x, w_k).
    """
    labels = support.require_labels()
    k = _num_classes(labels)
    if scale <= 0:
        raise ValueError("scale must be > 0")
    x = support.values.astype(np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm support feature under cosine head")
    xn = x / norms
    y = _one_hot(labels, k)

    w = 1e-2 * np.random.default_rng(seed & ((1 << 64) - 1)).standard_normal(
        (k, support.dim)
    )
    vw = np.zeros_like(w)
    rng = SplitMix64(seed)

    for epoch in range(config.epochs):
        for batch in _epoch_batches(support.rows, config.batch_size, rng):
            xb = xn if batch is None else xn[batch]
            yb = y if batch is None else y[batch]
            wnorm = np.linalg.norm(w, axis=1, keepdims=True)
            wn = w / wnorm
            cos = xb @ wn.T
            probs = softmax(scale * cos)
            loss = -np.mean(np.log(np.maximum(probs[yb.astype(bool)], 1e-300)))
            _check_loss(loss, epoch)
            g = (probs - yb) / xb.shape[0]
            # d cos_{i,k} / d w_k = (x_i_hat - cos_{i,k} * w_k_hat) / |w_k|
            gw = scale * (g.T @ xb - ((g * cos).sum(axis=0)[:, None] * wn)) / wnorm
            gw += config.weight_decay * w
            vw = config.momentum * vw + gw
            w = w - config.learning_rate * vw
    return CosineHead(w, float(scale))


def predict_cosine(head: CosineHead, features: FeatureMatrix) -> np.ndarray:
    """Softmax over scale * cosine(x, w_k)."""
    if features.dim != head.weights.shape[1]:
        raise ValueError(
            f"feature dim {features.dim} does not match head dim"
            f" {head.weights.shape[1]}"
        )
    x = features.values.astype(np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero-norm feature row under cosine head")
    wn = head.weights / np.linalg.norm(head.weights, axis=1, keepdims=True)
    return softmax(head.scale * ((x / norms) @ wn.T))


def matching_predict(
    support: FeatureMatrix, query: FeatureMatrix, warn: WarnFn | None = None
) -> np.ndarray:
    """Attention-weighted vote over support labels.

    Attention over support examples is the softmax (temperature 1) of
    cosine similarity between the query and each support feature; the
    output row is the attention-weighted sum of one-hot support labels.
    Zero-norm vectors score cosine 0 and are reported through ``warn``.
    """
    labels = support.require_labels()
    if support.dim != query.dim:
        raise ValueError("support/query dim mismatch")
    k = _num_classes(labels)
    sn = _safe_row_normalize(support.values.astype(np.float64), "support rows", warn)
    qn = _safe_row_normalize(query.values.astype(np.float64), "query rows", warn)
    attention = softmax(qn @ sn.T)
    return attention @ _one_hot(labels, k)


def transductive_standardize(
    support: FeatureMatrix, query: FeatureMatrix
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Standardize both blocks with per-dimension query statistics.

    The query block supplies mean and (population) standard deviation;
    both blocks become (x - mean) / (std + 1e-5). This adapts the feature
    space to the unlabelled query batch before any classifier runs.
    """
    if query.rows < 2:
        raise ValueError("transductive standardization needs >= 2 query rows")
    if support.dim != query.dim:
        raise ValueError("support/query dim mismatch")
    q = query.values.astype(np.float64)
    mean = q.mean(axis=0)
    denom = q.std(axis=0) + 1e-5
    std_support = (support.values.astype(np.float64) - mean) / denom
    std_query = (q - mean) / denom
    return (
        FeatureMatrix(std_support.astype(np.float32), support.labels),
        FeatureMatrix(std_query.astype(np.float32)),
    )

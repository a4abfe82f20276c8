"""Shared fixtures-by-hand and independent oracles for the test suite.

The oracle implementations here are deliberately loop-based float64 code
with no shared machinery with the package, so they stay valid checks of
the vectorized paths.
"""

from __future__ import annotations

import math

import numpy as np

from fsleval import EmbeddingDataset, FeatureMatrix, LayerKey


def build_dataset(labels, feature_map=None, dataset_id="test"):
    """Dataset from plain label list and optional {name: matrix} map."""
    labels = np.asarray(labels)
    if feature_map is None:
        feature_map = {"m0": np.zeros((labels.size, 1), dtype=np.float32)}
    features = {
        LayerKey(model_id, 0): np.asarray(matrix, dtype=np.float32)
        for model_id, matrix in feature_map.items()
    }
    return EmbeddingDataset.build(labels, features, dataset_id=dataset_id)


def random_blocks(rng, ways, shots, queries, dim, scale=1.0):
    """Random support/query FeatureMatrix pair with local labels."""
    support = FeatureMatrix(
        scale * rng.standard_normal((ways * shots, dim)),
        np.repeat(np.arange(ways), shots),
    )
    query = FeatureMatrix(scale * rng.standard_normal((ways * queries, dim)))
    return support, query


def margin_two_class(rng, n_per_class, dim, margin=4.0, sigma=1.0):
    """Two linearly separable clusters with a guaranteed margin on axis 0."""
    values = sigma * rng.standard_normal((2 * n_per_class, dim))
    gap = margin / 2.0 + np.abs(rng.standard_normal(2 * n_per_class)) * sigma
    labels = np.repeat(np.arange(2), n_per_class)
    values[:, 0] = np.where(labels == 0, -gap, gap)
    return FeatureMatrix(values, labels)


# ---------------------------------------------------------------------------
# Brute-force oracles (explicit loops, float64)
# ---------------------------------------------------------------------------


def oracle_gap(tensor):
    tensor = np.asarray(tensor, dtype=np.float64)
    c, h, w = tensor.shape
    out = []
    for ci in range(c):
        total = 0.0
        for hi in range(h):
            for wi in range(w):
                total += float(tensor[ci, hi, wi])
        out.append(total / (h * w))
    return np.asarray(out)


def oracle_centroid_probs(support_values, support_labels, query_values, distance):
    """Direct per-element evaluation of the prototype softmax rule."""
    support = np.asarray(support_values, dtype=np.float64)
    query = np.asarray(query_values, dtype=np.float64)
    labels = list(support_labels)
    k = max(labels) + 1
    dim = support.shape[1]

    prototypes = []
    for cls in range(k):
        rows = [i for i, y in enumerate(labels) if y == cls]
        proto = [0.0] * dim
        for i in rows:
            for d in range(dim):
                proto[d] += float(support[i, d])
        prototypes.append([v / len(rows) for v in proto])

    def cosine(u, v):
        dot = sum(a * b for a, b in zip(u, v))
        nu = math.sqrt(sum(a * a for a in u))
        nv = math.sqrt(sum(b * b for b in v))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return dot / (nu * nv)

    probs = np.zeros((query.shape[0], k))
    for qi in range(query.shape[0]):
        q = [float(v) for v in query[qi]]
        dists = []
        for proto in prototypes:
            if distance == "negative-cosine":
                dists.append(-cosine(q, proto))
            else:
                dists.append(sum((a - b) ** 2 for a, b in zip(q, proto)))
        # plain exp(-d) normalization; oracle inputs stay small
        weights = [math.exp(-d) for d in dists]
        total = sum(weights)
        for cls in range(k):
            probs[qi, cls] = weights[cls] / total
    return probs


def oracle_matching_probs(support_values, support_labels, query_values):
    """Attention rule computed one similarity at a time."""
    support = np.asarray(support_values, dtype=np.float64)
    query = np.asarray(query_values, dtype=np.float64)
    labels = list(support_labels)
    k = max(labels) + 1

    def cosine(u, v):
        dot = float(np.dot(u, v))
        nu = math.sqrt(float(np.dot(u, u)))
        nv = math.sqrt(float(np.dot(v, v)))
        if nu == 0.0 or nv == 0.0:
            return 0.0
        return dot / (nu * nv)

    probs = np.zeros((query.shape[0], k))
    for qi in range(query.shape[0]):
        sims = [cosine(query[qi], support[si]) for si in range(support.shape[0])]
        m = max(sims)
        att = [math.exp(s - m) for s in sims]
        total = sum(att)
        for si, y in enumerate(labels):
            probs[qi, y] += att[si] / total
    return probs


def oracle_nearest_centroid(support_values, support_labels, query_values):
    """Argmax class by smallest squared euclidean distance to class mean."""
    support = np.asarray(support_values, dtype=np.float64)
    query = np.asarray(query_values, dtype=np.float64)
    labels = list(support_labels)
    k = max(labels) + 1
    out = []
    for qi in range(query.shape[0]):
        best_cls, best_d = 0, None
        for cls in range(k):
            rows = [i for i, y in enumerate(labels) if y == cls]
            proto = support[rows].mean(axis=0)
            d = float(((query[qi] - proto) ** 2).sum())
            if best_d is None or d < best_d:
                best_cls, best_d = cls, d
        out.append(best_cls)
    return np.asarray(out)

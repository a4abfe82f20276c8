"""Incremental multi-model selection over a library of embedding layers.

Stage 1 keeps the best layer of each source model by stratified five-fold
cross-validated linear-probe error on the support set. Stage 2 greedily
accretes those per-model winners, accepting a layer only when it strictly
reduces the cross-validated error of the concatenated probe. The final
classifier is a linear probe on the concatenation of the accepted layers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .classifiers import (
    FeatureMatrix,
    TrainConfig,
    WarnFn,
    fit_linear,
    predict_linear,
)
from .dataio import EmbeddingDataset, LayerKey
from .sampler import Episode, SplitMix64, splitmix64


@dataclass(frozen=True)
class ModelLibrary:
    """The layer pool IMS selects from, backed by one multi-layer dataset."""

    dataset: EmbeddingDataset
    sources: tuple[str, ...]
    layers_per_model: dict[str, tuple[LayerKey, ...]]

    @classmethod
    def from_dataset(cls, dataset: EmbeddingDataset) -> "ModelLibrary":
        sources = tuple(dataset.model_ids)
        if not sources:
            raise ValueError("dataset carries no layers")
        layers = {m: tuple(dataset.layers_of(m)) for m in sources}
        return cls(dataset, sources, layers)

    @property
    def all_layers(self) -> list[LayerKey]:
        return [key for m in self.sources for key in self.layers_per_model[m]]


@dataclass(frozen=True)
class CvConfig:
    """Cross-validation recipe for the per-layer probe scoring."""

    folds: int = 5
    seed: int = 0
    probe: TrainConfig = TrainConfig()

    def __post_init__(self) -> None:
        if self.folds < 2:
            raise ValueError("folds must be >= 2")


@dataclass(frozen=True)
class LayerSelection:
    """Selection outcome: per-model winners and the accreted layer set.

    ``trace[i]`` is the cross-validation error after accepting
    ``selected[i]``; the sequence is strictly decreasing by construction.
    """

    stage1: dict[str, tuple[LayerKey, float]]
    selected: tuple[LayerKey, ...]
    trace: tuple[float, ...]

    def to_json_dict(self) -> dict:
        return {
            "stage1": {
                model: {"layer_index": key.layer_index, "cv_error": err}
                for model, (key, err) in self.stage1.items()
            },
            "stage2": [
                {
                    "model_id": key.model_id,
                    "layer_index": key.layer_index,
                    "cv_error": err,
                }
                for key, err in zip(self.selected, self.trace)
            ],
        }


@dataclass(frozen=True)
class ImsResult:
    probabilities: np.ndarray
    selection: LayerSelection | None  # None when selection was bypassed
    layers: tuple[LayerKey, ...]
    final_dim: int


def episode_layer_features(
    dataset: EmbeddingDataset, episode: Episode, layer: LayerKey
) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Support and query feature blocks of one layer, with local labels."""
    if layer not in dataset.features:
        raise ValueError(f"layer {layer} not present in dataset")
    matrix = dataset.features[layer]
    ways, shots = episode.support.shape
    support = FeatureMatrix(
        matrix[episode.support.reshape(-1)],
        np.repeat(np.arange(ways), shots),
    )
    query = FeatureMatrix(matrix[episode.query.reshape(-1)])
    return support, query


def concat_features(
    layers: Sequence[LayerKey], blocks: Mapping[LayerKey, FeatureMatrix]
) -> FeatureMatrix:
    """Row-wise concatenation of the given layers, in order."""
    if not layers:
        raise ValueError("need at least one layer to concatenate")
    parts = []
    labels = blocks[layers[0]].labels
    rows = blocks[layers[0]].rows
    for key in layers:
        block = blocks[key]
        if block.rows != rows:
            raise ValueError(
                f"row count mismatch: layer {key} has {block.rows} rows,"
                f" expected {rows}"
            )
        parts.append(block.values)
    if len(parts) == 1:
        return FeatureMatrix(parts[0], labels)
    return FeatureMatrix(np.concatenate(parts, axis=1), labels)


def stratified_folds(
    labels: np.ndarray, folds: int, seed: int, warn: WarnFn | None = None
) -> list[np.ndarray]:
    """Deal each class round-robin to folds after a seeded shuffle.

    When the smallest class has fewer items than ``folds`` the fold count
    drops to that size (reported through ``warn``); below 2 the split is
    impossible and an error is raised.
    """
    class_ids, counts = np.unique(labels, return_counts=True)
    effective = min(folds, int(counts.min()))
    if effective < folds and warn is not None:
        warn(
            f"reduced cross-validation folds from {folds} to {effective}"
            f" (smallest class has {int(counts.min())} items)"
        )
    if effective < 2:
        raise ValueError(
            "cross-validation needs every class to have >= 2 support items"
        )
    assignments: list[list[int]] = [[] for _ in range(effective)]
    for cid in class_ids:
        rows = np.flatnonzero(labels == cid).tolist()
        SplitMix64(splitmix64((seed + int(cid)) & ((1 << 64) - 1))).shuffle(rows)
        for i, row in enumerate(rows):
            assignments[i % effective].append(row)
    return [np.asarray(sorted(fold), dtype=np.int64) for fold in assignments]


def cv_error(
    blocks: Mapping[LayerKey, FeatureMatrix],
    layers: Sequence[LayerKey],
    cfg: CvConfig,
    warn: WarnFn | None = None,
) -> float:
    """Mean held-out misclassification rate of a linear probe.

    Folds are stratified and fully determined by ``cfg.seed``; each fold
    trains a fresh probe on the concatenated out-of-fold features.
    """
    support = concat_features(layers, blocks)
    labels = support.require_labels()
    folds = stratified_folds(labels, cfg.folds, cfg.seed, warn)
    x = support.values
    errors = []
    for i, held_out in enumerate(folds):
        train_idx = np.concatenate([f for j, f in enumerate(folds) if j != i])
        train = FeatureMatrix(x[train_idx], labels[train_idx])
        head = fit_linear(train, cfg.probe, seed=splitmix64(cfg.seed + i + 1))
        probs = predict_linear(head, FeatureMatrix(x[held_out]))
        predicted = probs.argmax(axis=1)
        errors.append(float(np.mean(predicted != labels[held_out])))
    return float(np.mean(errors))


def stage1_select(
    library: ModelLibrary,
    blocks: Mapping[LayerKey, FeatureMatrix],
    cfg: CvConfig,
    warn: WarnFn | None = None,
) -> dict[str, tuple[LayerKey, float]]:
    """Pick each model's lowest-error layer; ties go to the lower index."""
    winners: dict[str, tuple[LayerKey, float]] = {}
    for model in library.sources:
        best: tuple[LayerKey, float] | None = None
        for key in sorted(library.layers_per_model[model], key=lambda k: k.layer_index):
            err = cv_error(blocks, [key], cfg, warn)
            if best is None or err < best[1]:
                best = (key, err)
        assert best is not None  # library guarantees >= 1 layer per model
        winners[model] = best
    return winners


def stage2_select(
    stage1: Mapping[str, tuple[LayerKey, float]],
    blocks: Mapping[LayerKey, FeatureMatrix],
    cfg: CvConfig,
    warn: WarnFn | None = None,
) -> LayerSelection:
    """Greedily accrete stage-1 winners that strictly reduce the CV error.

    The winner with the lowest stage-1 error seeds the set; the rest are
    visited in ascending stage-1 error (library order on ties) and appended
    only on strict improvement of the concatenated probe.
    """
    if not stage1:
        raise ValueError("stage1 selection is empty")
    ordered = sorted(
        ((err, pos, key) for pos, (key, err) in enumerate(stage1.values())),
    )
    best_err, _, best_key = ordered[0]
    selected = [best_key]
    trace = [best_err]
    for err, _, key in ordered[1:]:
        candidate_err = cv_error(blocks, selected + [key], cfg, warn)
        if candidate_err < trace[-1]:
            selected.append(key)
            trace.append(candidate_err)
    return LayerSelection(dict(stage1), tuple(selected), tuple(trace))


def final_probe_seed(cv_seed: int) -> int:
    """Seed of the final concatenated probe, derived from the CV seed."""
    return splitmix64(cv_seed)


def ims_classify(
    library: ModelLibrary,
    episode: Episode,
    cfg: CvConfig,
    probe: TrainConfig,
    bypass_selection: bool = False,
    warn: WarnFn | None = None,
) -> ImsResult:
    """Run the full selection pipeline and classify the episode queries.

    With ``bypass_selection`` every layer of every model is concatenated
    (the all-embeddings baseline) and no selection record is attached.
    """
    support_blocks: dict[LayerKey, FeatureMatrix] = {}
    query_blocks: dict[LayerKey, FeatureMatrix] = {}
    for key in library.all_layers:
        support_blocks[key], query_blocks[key] = episode_layer_features(
            library.dataset, episode, key
        )

    selection: LayerSelection | None = None
    if bypass_selection:
        layers: Sequence[LayerKey] = library.all_layers
    else:
        stage1 = stage1_select(library, support_blocks, cfg, warn)
        selection = stage2_select(stage1, support_blocks, cfg, warn)
        layers = selection.selected

    support = concat_features(layers, support_blocks)
    query = concat_features(layers, query_blocks)
    head = fit_linear(support, probe, seed=final_probe_seed(cfg.seed))
    probabilities = predict_linear(head, query)
    return ImsResult(probabilities, selection, tuple(layers), support.dim)

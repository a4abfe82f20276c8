"""Episode-loop evaluation, accuracy aggregation, and report serialization.

Every method is scored on the same derived episode stream for a given
master seed, so per-episode accuracies are paired across methods. Reports
are serialized as canonical JSON (sorted keys, floats at 17 significant
digits) so identical runs produce byte-identical files; wall time is kept
in memory only for that reason.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .classifiers import (
    TrainConfig,
    centroid_predict,
    fit_cosine,
    fit_linear,
    matching_predict,
    predict_cosine,
    predict_linear,
    transductive_standardize,
)
from .dataio import EmbeddingDataset, LayerKey
from .ims import (
    CvConfig,
    ImsResult,
    ModelLibrary,
    episode_layer_features,
    ims_classify,
)
from .sampler import (
    Episode,
    EpisodeConfig,
    SplitMix64,
    sample_episode,
    splitmix64,
)

METHOD_KINDS = (
    "linear",
    "mean-centroid",
    "cosine",
    "proto",
    "matching",
    "transductive-linear",
    "ims",
    "all-embeddings",
    "random-baseline",
)
_SINGLE_LAYER_KINDS = (
    "linear",
    "mean-centroid",
    "cosine",
    "proto",
    "matching",
    "transductive-linear",
)
_LIBRARY_KINDS = ("ims", "all-embeddings")

# Distinct per-episode seed streams for training, cross-validation folds,
# and the random baseline, so none aliases the sampling stream.
_TRAIN_STREAM = 0x545249
_CV_STREAM = 0x435646
_GUESS_STREAM = 0x475553


class ConfigError(ValueError):
    """Invalid method, flag, or run configuration."""


@dataclass(frozen=True)
class MethodSpec:
    """A named classification method plus the sub-configs it needs."""

    kind: str
    train: TrainConfig = TrainConfig()
    cv: CvConfig | None = None
    layer: LayerKey | None = None
    cosine_scale: float = 10.0

    def __post_init__(self) -> None:
        if self.kind not in METHOD_KINDS:
            raise ConfigError(
                f"unknown method {self.kind!r}; expected one of {METHOD_KINDS}"
            )

    def resolve(self, dataset: EmbeddingDataset) -> "MethodSpec":
        """Fill defaults against a dataset and check required sub-configs."""
        method = self
        if method.kind in _LIBRARY_KINDS and method.cv is None:
            if method.kind == "ims":
                raise ConfigError("method 'ims' requires a cross-validation config")
            method = dataclasses.replace(method, cv=CvConfig(probe=method.train))
        if method.kind in _SINGLE_LAYER_KINDS:
            if method.layer is None:
                keys = dataset.layer_keys
                if len(keys) != 1:
                    raise ConfigError(
                        f"method {method.kind!r} needs an explicit layer; dataset"
                        f" has {len(keys)} layers"
                    )
                method = dataclasses.replace(method, layer=keys[0])
            if method.layer not in dataset.features:
                raise ConfigError(f"layer {method.layer} not present in dataset")
        return method

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "train": dataclasses.asdict(self.train),
            "cv": None
            if self.cv is None
            else {
                "folds": self.cv.folds,
                "seed": self.cv.seed,
                "probe": dataclasses.asdict(self.cv.probe),
            },
            "layer": None
            if self.layer is None
            else {"model_id": self.layer.model_id, "layer_index": self.layer.layer_index},
            "cosine_scale": self.cosine_scale,
        }


@dataclass(frozen=True)
class EvalReport:
    """Aggregated run outcome plus the configuration needed to repeat it."""

    config: dict
    per_episode_accuracy: tuple[float, ...]
    mean: float
    ci95: float
    warnings: tuple[str, ...]
    wall_time_seconds: float

    def to_json_dict(self) -> dict:
        # wall_time_seconds is deliberately left out: identical runs must
        # serialize identically.
        return {
            "config": self.config,
            "per_episode_accuracy": list(self.per_episode_accuracy),
            "mean": self.mean,
            "ci95": self.ci95,
            "warnings": list(self.warnings),
        }


def confidence_interval(accuracies) -> tuple[float, float]:
    """Mean and 95% half-width (1.96 * sample std / sqrt(n))."""
    values = np.asarray(accuracies, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise ValueError("confidence interval needs at least 2 values")
    mean = float(values.mean())
    half = 1.96 * float(values.std(ddof=1)) / math.sqrt(values.size)
    return mean, half


def format_report(report: EvalReport) -> str:
    """Accuracy line in table style, e.g. ``73.29% ± 0.71%``."""
    return f"{report.mean * 100:.2f}% ± {report.ci95 * 100:.2f}%"


def _canonical_json(value, out: list[str]) -> None:
    if value is None or isinstance(value, bool):
        out.append("null" if value is None else ("true" if value else "false"))
    elif isinstance(value, (int, np.integer)):
        out.append(str(int(value)))
    elif isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            raise ValueError("cannot serialize non-finite float")
        out.append(format(float(value), ".17g"))
    elif isinstance(value, str):
        out.append(json.dumps(value))
    elif isinstance(value, (list, tuple)):
        out.append("[")
        for i, item in enumerate(value):
            if i:
                out.append(",")
            _canonical_json(item, out)
        out.append("]")
    elif isinstance(value, dict):
        out.append("{")
        for i, key in enumerate(sorted(value)):
            if i:
                out.append(",")
            if not isinstance(key, str):
                raise ValueError("canonical JSON keys must be strings")
            out.append(json.dumps(key))
            out.append(":")
            _canonical_json(value[key], out)
        out.append("}")
    else:
        raise TypeError(f"cannot serialize {type(value).__name__}")


def canonical_json(value) -> str:
    """Canonical JSON: sorted keys, 17-significant-digit floats."""
    out: list[str] = []
    _canonical_json(value, out)
    return "".join(out)


def write_report(report: EvalReport, path: str | Path) -> None:
    """Write the report as canonical JSON (byte-identical for equal runs)."""
    Path(path).write_text(canonical_json(report.to_json_dict()) + "\n")


def _uniform_probabilities(rows: int, ways: int) -> np.ndarray:
    return np.full((rows, ways), 1.0 / ways)


def _evaluate_episode(
    dataset: EmbeddingDataset,
    method: MethodSpec,
    config: EpisodeConfig,
    index: int,
    library: ModelLibrary | None,
) -> tuple[float, list[str]]:
    episode = sample_episode(dataset, config, index)
    notes: list[str] = []

    def warn(message: str) -> None:
        notes.append(f"episode {index}: {message}")

    try:
        probs = _episode_probabilities(dataset, method, config, episode, library, warn)
    except (ValueError, FloatingPointError) as exc:
        # Failed episodes stay in the run: uniform probabilities fall to the
        # lowest-id tie-break and the report carries the reason.
        probs = _uniform_probabilities(config.ways * config.queries, config.ways)
        warn(f"{exc}; scored by tie-break")

    truth = np.repeat(np.arange(config.ways), config.queries)
    predicted = probs.argmax(axis=1)  # ties resolve to the lowest local id
    accuracy = float(np.mean(predicted == truth))
    return accuracy, notes


def _episode_probabilities(
    dataset: EmbeddingDataset,
    method: MethodSpec,
    config: EpisodeConfig,
    episode: Episode,
    library: ModelLibrary | None,
    warn: Callable[[str], None],
) -> np.ndarray:
    kind = method.kind
    if kind == "random-baseline":
        rng = SplitMix64(splitmix64(episode.seed + _GUESS_STREAM))
        rows = config.ways * config.queries
        probs = np.zeros((rows, config.ways))
        for i in range(rows):
            probs[i, rng.below(config.ways)] = 1.0
        return probs

    if kind in _LIBRARY_KINDS:
        assert library is not None and method.cv is not None
        episode_cv = dataclasses.replace(
            method.cv, seed=method.cv.seed ^ splitmix64(episode.seed + _CV_STREAM)
        )
        result: ImsResult = ims_classify(
            library,
            episode,
            episode_cv,
            method.train,
            bypass_selection=(kind == "all-embeddings"),
            warn=warn,
        )
        return result.probabilities

    assert method.layer is not None
    support, query = episode_layer_features(dataset, episode, method.layer)
    train_seed = splitmix64(episode.seed + _TRAIN_STREAM)

    if kind == "linear":
        return predict_linear(fit_linear(support, method.train, train_seed), query)
    if kind == "mean-centroid":
        return centroid_predict(support, query, "negative-cosine", warn)
    if kind == "proto":
        return centroid_predict(support, query, "squared-euclidean", warn)
    if kind == "cosine":
        head = fit_cosine(support, method.train, train_seed, scale=method.cosine_scale)
        return predict_cosine(head, query)
    if kind == "matching":
        return matching_predict(support, query, warn)
    if kind == "transductive-linear":
        support, query = transductive_standardize(support, query)
        return predict_linear(fit_linear(support, method.train, train_seed), query)
    raise ConfigError(f"unhandled method kind {kind!r}")


def run_evaluation(
    dataset: EmbeddingDataset,
    method: MethodSpec,
    episodes: EpisodeConfig,
    threads: int = 1,
) -> EvalReport:
    """Score ``episodes.episodes`` sampled tasks with the given method.

    The report is identical for any ``threads`` value: episode seeds are
    index-derived and results are collected in index order.
    """
    started = time.perf_counter()
    if episodes.episodes < 2:
        raise ConfigError("a report needs at least 2 episodes for its interval")
    if threads < 1:
        raise ConfigError("threads must be >= 1")
    method = method.resolve(dataset)

    run_warnings: list[str] = []
    need = episodes.shots + episodes.queries
    skipped = sorted(
        c for c, rows in dataset.class_index.items() if rows.size < need
    )
    if skipped:
        run_warnings.append(
            f"excluded {len(skipped)} classes with fewer than"
            f" {need} items: {skipped}"
        )
    if method.kind == "transductive-linear":
        run_warnings.append(
            "transductive_adaptation: features standardized with query-batch"
            " statistics before the linear probe"
        )

    library = (
        ModelLibrary.from_dataset(dataset) if method.kind in _LIBRARY_KINDS else None
    )

    def job(index: int) -> tuple[float, list[str]]:
        return _evaluate_episode(dataset, method, episodes, index, library)

    indices = range(episodes.episodes)
    if threads == 1:
        outcomes = [job(i) for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(job, indices))

    accuracies = tuple(acc for acc, _ in outcomes)
    for _, notes in outcomes:
        run_warnings.extend(notes)
    mean, ci95 = confidence_interval(accuracies)

    config_echo = {
        "dataset_id": dataset.dataset_id,
        "method": method.to_json_dict(),
        "episodes": {
            "ways": episodes.ways,
            "shots": episodes.shots,
            "queries": episodes.queries,
            "episodes": episodes.episodes,
            "master_seed": episodes.master_seed,
        },
    }
    return EvalReport(
        config=config_echo,
        per_episode_accuracy=accuracies,
        mean=mean,
        ci95=ci95,
        warnings=tuple(run_warnings),
        wall_time_seconds=time.perf_counter() - started,
    )

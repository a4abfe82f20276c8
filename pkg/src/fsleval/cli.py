"""Command-line front end: evaluate, synth, ims-trace, inspect.

Exit codes: 0 success, 2 configuration error, 3 data error. A TOML or JSON
run-configuration file may supply any flag value (keys mirror the flag
names); explicit flags win. ``FSL_SEED`` provides the master seed when
``--seed`` is absent.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any, Sequence

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version-dependent import
    import tomli as tomllib

import numpy as np

from .classifiers import TrainConfig
from .dataio import (
    DataFormatError,
    LayerKey,
    SyntheticLayer,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    write_dataset,
)
from .evaluation import (
    ConfigError,
    MethodSpec,
    canonical_json,
    format_report,
    run_evaluation,
    write_report,
)
from .ims import CvConfig, ModelLibrary, ims_classify
from .sampler import EpisodeConfig, InsufficientDataError, sample_episode

_EVALUATE_FLAGS = {
    "dataset": str,
    "library": str,
    "method": str,
    "layer": str,
    "ways": int,
    "shots": int,
    "queries": int,
    "episodes": int,
    "seed": int,
    "epochs": int,
    "lr": float,
    "momentum": float,
    "weight-decay": float,
    "batch-size": int,
    "cosine-scale": float,
    "folds": int,
    "threads": int,
    "output": str,
}
_SYNTH_FLAGS = {
    "classes": int,
    "per-class": int,
    "dim": int,
    "separation": float,
    "shift": float,
    "sigma": float,
    "seed": int,
    "layers": list,
    "out": str,
}
_TRACE_FLAGS = {
    "library": str,
    "ways": int,
    "shots": int,
    "queries": int,
    "episodes": int,
    "seed": int,
    "epochs": int,
    "lr": float,
    "momentum": float,
    "weight-decay": float,
    "batch-size": int,
    "folds": int,
    "output": str,
}


def _load_config_file(path: str) -> dict[str, Any]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    if p.suffix == ".json":
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    elif p.suffix == ".toml":
        try:
            data = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: invalid TOML ({exc})") from exc
    else:
        raise ConfigError(f"config file must end in .json or .toml: {p}")
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a table/object")
    return data


class _Options:
    """Flag values merged from the command line, config file, and defaults."""

    def __init__(
        self, namespace: argparse.Namespace, flags: dict[str, type]
    ) -> None:
        config: dict[str, Any] = {}
        if getattr(namespace, "config", None):
            config = _load_config_file(namespace.config)
            unknown = sorted(set(config) - set(flags))
            if unknown:
                raise ConfigError(f"unknown config keys: {unknown}")
        self._flags = flags
        self._namespace = namespace
        self._config = config

    def get(self, name: str, default: Any = None) -> Any:
        value = getattr(self._namespace, name.replace("-", "_"))
        if value is None and name in self._config:
            value = self._config[name]
            kind = self._flags[name]
            if kind is list:
                if not isinstance(value, list) or not all(
                    isinstance(v, str) for v in value
                ):
                    raise ConfigError(f"config key {name!r} must be a list of strings")
            elif kind in (int, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"config key {name!r} must be a number")
                value = kind(value)
            elif not isinstance(value, kind):
                raise ConfigError(f"config key {name!r} must be a {kind.__name__}")
        return default if value is None else value

    def require(self, name: str) -> Any:
        value = self.get(name)
        if value is None:
            raise ConfigError(f"missing required flag --{name}")
        return value

    def seed(self) -> int:
        value = self.get("seed")
        if value is None:
            env = os.environ.get("FSL_SEED")
            if env is not None:
                try:
                    return int(env)
                except ValueError as exc:
                    raise ConfigError(f"FSL_SEED must be an integer, got {env!r}") from exc
            return 0
        return int(value)


def _add_flags(parser: argparse.ArgumentParser, flags: dict[str, type]) -> None:
    for name, kind in flags.items():
        if kind is list:
            parser.add_argument(f"--{name}", nargs="+", default=None)
        else:
            parser.add_argument(f"--{name}", type=kind, default=None)
    parser.add_argument("--config", type=str, default=None)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fsleval",
        description="Few-shot evaluation over precomputed embedding datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    evaluate = sub.add_parser("evaluate", help="run an episodic evaluation")
    _add_flags(evaluate, _EVALUATE_FLAGS)

    synth = sub.add_parser("synth", help="generate a synthetic embedding dataset")
    _add_flags(synth, _SYNTH_FLAGS)

    trace = sub.add_parser("ims-trace", help="emit per-episode selection traces")
    _add_flags(trace, _TRACE_FLAGS)

    inspect = sub.add_parser("inspect", help="summarize a dataset directory")
    inspect.add_argument("--dataset", type=str, default=None)
    inspect.add_argument("--config", type=str, default=None)
    return parser


def _train_config(opts: _Options) -> TrainConfig:
    batch = int(opts.get("batch-size", 0))
    return TrainConfig(
        epochs=int(opts.get("epochs", 100)),
        learning_rate=float(opts.get("lr", 0.01)),
        momentum=float(opts.get("momentum", 0.9)),
        batch_size=None if batch == 0 else batch,
        weight_decay=float(opts.get("weight-decay", 0.0)),
    )


def _episode_config(opts: _Options) -> EpisodeConfig:
    try:
        return EpisodeConfig(
            ways=int(opts.get("ways", 5)),
            shots=int(opts.require("shots")),
            queries=int(opts.get("queries", 15)),
            episodes=int(opts.get("episodes", 600)),
            master_seed=opts.seed(),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_evaluate(namespace: argparse.Namespace) -> int:
    opts = _Options(namespace, _EVALUATE_FLAGS)
    method_kind = opts.require("method")
    train = _train_config(opts)
    episode_cfg = _episode_config(opts)

    if method_kind in ("ims", "all-embeddings"):
        library_path = opts.get("library")
        if library_path is None:
            raise ConfigError(f"--library is required for method {method_kind!r}")
        dataset = load_dataset(library_path)
        cv = CvConfig(
            folds=int(opts.get("folds", 5)), seed=episode_cfg.master_seed, probe=train
        )
        method = MethodSpec(kind=method_kind, train=train, cv=cv)
    else:
        dataset_path = opts.get("dataset")
        if dataset_path is None:
            raise ConfigError(f"--dataset is required for method {method_kind!r}")
        dataset = load_dataset(dataset_path)
        layer_text = opts.get("layer")
        layer = None
        if layer_text is not None:
            try:
                layer = LayerKey.parse(layer_text)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        method = MethodSpec(
            kind=method_kind,
            train=train,
            layer=layer,
            cosine_scale=float(opts.get("cosine-scale", 10.0)),
        )

    report = run_evaluation(
        dataset, method, episode_cfg, threads=int(opts.get("threads", 1))
    )
    print(format_report(report))
    output = opts.get("output")
    if output is not None:
        write_report(report, output)
    for message in report.warnings[:10]:
        print(f"warning: {message}", file=sys.stderr)
    return 0


def _parse_layer_specs(tokens: Sequence[str]) -> tuple[SyntheticLayer, ...]:
    """Parse tokens like ``m0=informative,pure-noise:128`` into descriptors."""
    layers: list[SyntheticLayer] = []
    for token in tokens:
        model_id, sep, kinds = token.partition("=")
        if not sep or not model_id or not kinds:
            raise ConfigError(
                f"layer spec must look like 'MODEL=KIND[:DIM],...', got {token!r}"
            )
        for index, entry in enumerate(kinds.split(",")):
            kind, _, dim_text = entry.partition(":")
            layer_dim = None
            if dim_text:
                try:
                    layer_dim = int(dim_text)
                except ValueError as exc:
                    raise ConfigError(f"bad layer dim in {entry!r}") from exc
            layers.append(
                SyntheticLayer(
                    model_id=model_id, layer_index=index, kind=kind, dim=layer_dim
                )
            )
    return tuple(layers)


def _cmd_synth(namespace: argparse.Namespace) -> int:
    opts = _Options(namespace, _SYNTH_FLAGS)
    dim = int(opts.require("dim"))
    layer_tokens = opts.get("layers")
    layers = (
        _parse_layer_specs(layer_tokens)
        if layer_tokens is not None
        else (SyntheticLayer(),)
    )
    try:
        spec = SyntheticSpec(
            num_classes=int(opts.require("classes")),
            items_per_class=int(opts.require("per-class")),
            dim=dim,
            class_separation=float(opts.require("separation")),
            shift_level=float(opts.get("shift", 0.0)),
            noise_sigma=float(opts.get("sigma", 1.0)),
            layers=layers,
        )
        seed = opts.seed()
        dataset = generate_synthetic(spec, seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(opts.require("out"))
    write_dataset(dataset, out)
    print(
        f"wrote {dataset.num_items} items x {len(dataset.features)} layers"
        f" to {out}"
    )
    return 0


def _cmd_ims_trace(namespace: argparse.Namespace) -> int:
    opts = _Options(namespace, _TRACE_FLAGS)
    dataset = load_dataset(opts.require("library"))
    library = ModelLibrary.from_dataset(dataset)
    episode_cfg = _episode_config(opts)
    train = _train_config(opts)
    cv = CvConfig(
        folds=int(opts.get("folds", 5)), seed=episode_cfg.master_seed, probe=train
    )

    lines: list[str] = []
    for index in range(episode_cfg.episodes):
        episode = sample_episode(dataset, episode_cfg, index)
        result = ims_classify(library, episode, cv, train)
        truth = np.repeat(np.arange(episode_cfg.ways), episode_cfg.queries)
        accuracy = float(np.mean(result.probabilities.argmax(axis=1) == truth))
        document = {
            "episode_index": index,
            "seed": episode.seed,
            "final_dim": result.final_dim,
            "query_accuracy": accuracy,
        }
        assert result.selection is not None
        document.update(result.selection.to_json_dict())
        lines.append(canonical_json(document))

    output = opts.get("output")
    text = "\n".join(lines) + "\n"
    if output is None:
        sys.stdout.write(text)
    else:
        Path(output).write_text(text)
    return 0


def _cmd_inspect(namespace: argparse.Namespace) -> int:
    opts = _Options(namespace, {"dataset": str})
    dataset = load_dataset(opts.require("dataset"))
    counts = [rows.size for rows in dataset.class_index.values()]
    print(f"dataset: {dataset.dataset_id}")
    print(f"items: {dataset.num_items}")
    print(
        f"classes: {dataset.num_classes}"
        f" (items per class: min {min(counts)}, max {max(counts)})"
    )
    for model_id in dataset.model_ids:
        layers = ", ".join(
            f"layer {key.layer_index} (dim {dataset.features[key].shape[1]})"
            for key in dataset.layers_of(model_id)
        )
        print(f"model {model_id}: {layers}")
    return 0


_COMMANDS = {
    "evaluate": _cmd_evaluate,
    "synth": _cmd_synth,
    "ims-trace": _cmd_ims_trace,
    "inspect": _cmd_inspect,
}


def run_cli(argv: Sequence[str]) -> int:
    """Parse and dispatch; returns the process exit code."""
    parser = _build_parser()
    try:
        namespace = parser.parse_args(list(argv))
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else 2
        return 0 if code == 0 else 2
    try:
        return _COMMANDS[namespace.command](namespace)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, InsufficientDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_cli(sys.argv[1:]))

"""Embedding dataset I/O, synthetic domain generation, and the on-disk format.

A dataset directory holds a JSON manifest plus flat binary files:

    manifest.json   {"version": 1, "num_items": N, "labels_file": "labels.bin",
                     "models": [{"model_id": "m0",
                                 "layers": [{"layer_index": 0, "dim": 64,
                                             "file": "m0_layer0.fslb"}]}]}
    labels file     one little-endian uint32 class id per item, item-major
    *.fslb          magic b"FSLB" | uint32 LE version (=1) | uint64 LE item
                    count | uint32 LE flattened dim | item-major float32 LE

A layer entry may declare ``"shape": [C, H, W]`` instead of ``"dim"``; such
payloads are stored as raw C*H*W tensors per item and reduced to length-C
vectors by global average pooling at load time. Pooled features are never
written back in pooled form unless the dataset itself is re-saved.

Feature payloads are float32 on disk and in memory; every accumulation here
(pooling, means) runs in float64 and is rounded to float32 once.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

MAGIC = b"FSLB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")  # magic, version, item count, flattened dim

LAYER_KINDS = ("informative", "pure-noise", "random-projection")

_MODEL_ID_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9_\-]*")


class DataFormatError(RuntimeError):
    """Raised when a manifest or layer binary violates the on-disk contract."""


@dataclass(frozen=True, order=True)
class LayerKey:
    """Identifies one embedding source: a model and a layer within it."""

    model_id: str
    layer_index: int

    def __str__(self) -> str:
        return f"{self.model_id}:{self.layer_index}"

    @classmethod
    def parse(cls, text: str) -> "LayerKey":
        model_id, sep, idx = text.rpartition(":")
        if not sep or not model_id:
            raise ValueError(f"layer key must look like 'model:index', got {text!r}")
        return cls(model_id, int(idx))


@dataclass(frozen=True)
class EmbeddingDataset:
    """Immutable labelled item collection with one feature matrix per layer.

    ``labels[i]`` is the class id of item ``i``; item ids are the row
    positions 0..num_items-1. Every matrix in ``features`` has ``num_items``
    rows of float32. Instances are safe to share across threads.
    """

    labels: np.ndarray
    features: dict[LayerKey, np.ndarray]
    class_index: dict[int, np.ndarray]
    dataset_id: str = ""

    @classmethod
    def build(
        cls,
        labels: np.ndarray | Sequence[int],
        features: Mapping[LayerKey, np.ndarray],
        dataset_id: str = "",
    ) -> "EmbeddingDataset":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1 or labels.size == 0:
            raise ValueError("labels must be a non-empty 1-D sequence")
        if labels.min() < 0:
            raise ValueError("class ids must be non-negative")
        labels.flags.writeable = False

        frozen: dict[LayerKey, np.ndarray] = {}
        for key, mat in features.items():
            mat = np.ascontiguousarray(mat, dtype=np.float32)
            if mat.ndim != 2:
                raise ValueError(f"layer {key}: feature matrix must be 2-D")
            if mat.shape[0] != labels.size:
                raise ValueError(
                    f"layer {key}: {mat.shape[0]} rows but {labels.size} labels"
                )
            if not np.isfinite(mat).all():
                raise ValueError(f"layer {key}: non-finite feature value")
            mat.flags.writeable = False
            frozen[key] = mat

        class_index: dict[int, np.ndarray] = {}
        for cid in np.unique(labels):
            rows = np.flatnonzero(labels == cid)
            rows.flags.writeable = False
            class_index[int(cid)] = rows
        return cls(labels, frozen, class_index, dataset_id)

    @property
    def num_items(self) -> int:
        return int(self.labels.size)

    @property
    def num_classes(self) -> int:
        return len(self.class_index)

    @property
    def items(self) -> Iterator[tuple[int, int]]:
        return ((i, int(label)) for i, label in enumerate(self.labels))

    @property
    def layer_keys(self) -> list[LayerKey]:
        return list(self.features)

    @property
    def model_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for key in self.features:
            seen.setdefault(key.model_id, None)
        return list(seen)

    def layers_of(self, model_id: str) -> list[LayerKey]:
        return [k for k in self.features if k.model_id == model_id]


def global_average_pool(tensor: np.ndarray) -> np.ndarray:
    """Reduce a C x H x W activation tensor to a length-C vector.

    Each channel is averaged over its H x W spatial grid, accumulating in
    float64.
    """
    tensor = np.asarray(tensor)
    if tensor.ndim != 3:
        raise ValueError(f"expected a 3-axis C x H x W tensor, got {tensor.ndim} axes")
    if tensor.shape[1] < 1 or tensor.shape[2] < 1:
        raise ValueError(f"empty spatial extent in shape {tensor.shape}")
    return tensor.astype(np.float64).mean(axis=(1, 2))


def _pool_items(payload: np.ndarray) -> np.ndarray:
    # payload: (num_items, C, H, W) raw floats; returns (num_items, C) float32
    return payload.astype(np.float64).mean(axis=(2, 3)).astype(np.float32)


def _read_layer_file(path: Path, expected_dim: int) -> tuple[int, np.ndarray]:
    if not path.is_file():
        raise DataFormatError(f"missing layer file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported version {version}, expected {FORMAT_VERSION}"
        )
    if dim != expected_dim:
        raise DataFormatError(
            f"{path}: header dim {dim} disagrees with manifest dim {expected_dim}"
        )
    expected_bytes = _HEADER.size + 4 * count * dim
    if len(raw) != expected_bytes:
        raise DataFormatError(
            f"{path}: payload is {len(raw)} bytes, expected {expected_bytes}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        offset = _HEADER.size + 4 * int(bad[0])
        raise DataFormatError(
            f"{path}: non-finite value at byte offset {offset} (element {int(bad[0])})"
        )
    return int(count), values.reshape(count, dim)


def load_dataset(manifest_path: str | Path) -> EmbeddingDataset:
    """Load a dataset directory through its manifest.

    Layers declared with a spatial ``shape`` are pooled to vectors during
    the load; everything else is returned bit-for-bit as stored.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    if not manifest_path.is_file():
        raise DataFormatError(f"missing manifest: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    for key in ("version", "num_items", "labels_file", "models"):
        if key not in manifest:
            raise DataFormatError(f"{manifest_path}: manifest missing field {key!r}")
    if manifest["version"] != FORMAT_VERSION:
        raise DataFormatError(
            f"{manifest_path}: manifest version {manifest['version']},"
            f" expected {FORMAT_VERSION}"
        )
    num_items = int(manifest["num_items"])
    base = manifest_path.parent

    labels_path = base / manifest["labels_file"]
    if not labels_path.is_file():
        raise DataFormatError(f"missing labels file: {labels_path}")
    labels_raw = labels_path.read_bytes()
    if len(labels_raw) % 4:
        raise DataFormatError(f"{labels_path}: size {len(labels_raw)} not a multiple of 4")
    labels = np.frombuffer(labels_raw, dtype="<u4").astype(np.int64)

    features: dict[LayerKey, np.ndarray] = {}
    counts: list[tuple[str, int]] = [(labels_path.name, labels.size)]
    for model in manifest["models"]:
        model_id = model["model_id"]
        declared = len(model["layers"])
        for layer in model["layers"]:
            key = LayerKey(model_id, int(layer["layer_index"]))
            if key in features:
                raise DataFormatError(f"{manifest_path}: duplicate layer {key}")
            if key.layer_index >= declared:
                raise DataFormatError(
                    f"{manifest_path}: layer index {key.layer_index} out of range"
                    f" for model {model_id!r} with {declared} layers"
                )
            shape = layer.get("shape")
            if shape is not None:
                c, h, w = (int(v) for v in shape)
                if h < 1 or w < 1:
                    raise DataFormatError(
                        f"{manifest_path}: layer {key} declares empty spatial"
                        f" extent {shape}"
                    )
                flat_dim = c * h * w
            else:
                flat_dim = int(layer["dim"])
            path = base / layer["file"]
            count, values = _read_layer_file(path, flat_dim)
            counts.append((path.name, count))
            if shape is not None:
                values = _pool_items(values.reshape(count, c, h, w))
            features[key] = values

    if any(count != num_items for _, count in counts):
        detail = ", ".join(f"{name}: {count} rows" for name, count in counts)
        raise DataFormatError(
            f"{manifest_path}: row counts disagree with manifest num_items"
            f" {num_items} ({detail})"
        )
    return EmbeddingDataset.build(labels, features, dataset_id=str(manifest_path))


def write_dataset(dataset: EmbeddingDataset, out_dir: str | Path) -> None:
    """Write a dataset directory readable by :func:`load_dataset`.

    Float32 payloads survive a write/load round trip bit-exactly. The
    manifest is written last so a failed run leaves no manifest behind.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    for model_id in dataset.model_ids:
        if not _MODEL_ID_RE.fullmatch(model_id):
            raise ValueError(f"model_id {model_id!r} is not filesystem-safe")
        indices = sorted(k.layer_index for k in dataset.layers_of(model_id))
        if indices != list(range(len(indices))):
            raise ValueError(
                f"model {model_id!r}: layer indices {indices} must be 0..L-1"
                " to satisfy the manifest contract"
            )

    labels_file = "labels.bin"
    (out_dir / labels_file).write_bytes(
        np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes()
    )

    models: list[dict] = []
    by_model: dict[str, list[dict]] = {}
    for key, values in dataset.features.items():
        fname = f"{key.model_id}_layer{key.layer_index}.fslb"
        header = _HEADER.pack(MAGIC, FORMAT_VERSION, values.shape[0], values.shape[1])
        payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
        (out_dir / fname).write_bytes(header + payload)
        by_model.setdefault(key.model_id, []).append(
            {"layer_index": key.layer_index, "dim": int(values.shape[1]), "file": fname}
        )
    for model_id in dataset.model_ids:
        models.append({"model_id": model_id, "layers": by_model[model_id]})

    manifest = {
        "version": FORMAT_VERSION,
        "num_items": dataset.num_items,
        "labels_file": labels_file,
        "models": models,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    )


@dataclass(frozen=True)
class SyntheticLayer:
    """One generated embedding source.

    ``informative`` layers carry the class signal, ``pure-noise`` layers are
    label-independent, and ``random-projection`` layers apply a fixed seeded
    linear map to the informative signal (a stand-in for an untrained
    feature extractor).
    """

    model_id: str = "m0"
    layer_index: int = 0
    kind: str = "informative"
    dim: int | None = None


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian-mixture domain with a single difficulty knob per axis.

    Class means sit at scaled simplex vertices a mutual ``class_separation``
    apart; ``shift_level`` applies a seeded rigid motion (blended rotation
    plus a translation of that norm) to the whole feature cloud, degrading
    origin-sensitive classifiers without changing the mixture geometry.
    """

    num_classes: int
    items_per_class: int
    dim: int
    class_separation: float
    shift_level: float = 0.0
    noise_sigma: float = 1.0
    layers: tuple[SyntheticLayer, ...] = (SyntheticLayer(),)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.items_per_class < 1:
            raise ValueError("items_per_class must be >= 1")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be > 0")
        if self.class_separation < 0:
            raise ValueError("class_separation must be >= 0")
        if self.shift_level < 0:
            raise ValueError("shift_level must be >= 0")
        if self.class_separation > 0 and self.dim < self.num_classes:
            raise ValueError(
                "simplex mean placement needs dim >= num_classes"
                f" (got dim={self.dim}, num_classes={self.num_classes})"
            )
        if not self.layers:
            raise ValueError("at least one layer descriptor is required")
        seen = set()
        for layer in self.layers:
            key = (layer.model_id, layer.layer_index)
            if key in seen:
                raise ValueError(f"duplicate layer descriptor {key}")
            seen.add(key)
            if layer.kind not in LAYER_KINDS:
                raise ValueError(f"unknown layer kind {layer.kind!r}")
            if layer.kind == "informative" and layer.dim not in (None, self.dim):
                raise ValueError("informative layers must use the spec dim")
            if layer.dim is not None and layer.dim < 1:
                raise ValueError("layer dim must be >= 1")


def simplex_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Centred class means with every pairwise distance equal to separation.

    Uses scaled standard basis vectors, so it requires dim >= num_classes.
    """
    if separation > 0 and dim < num_classes:
        raise ValueError("simplex mean placement needs dim >= num_classes")
    means = np.zeros((num_classes, dim))
    if separation > 0:
        scale = separation / math.sqrt(2.0)
        means[np.arange(num_classes), np.arange(num_classes)] = scale
        means -= means.mean(axis=0, keepdims=True)
    return means


def _rigid_motion(
    dim: int, shift_level: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    # The rotation blends the identity with a seeded orthogonal matrix; the
    # blend fraction and translation norm both grow monotonically with
    # shift_level. The random draws do not depend on shift_level, so the
    # same seed yields the same motion direction at every level.
    gauss = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(gauss)
    q *= np.sign(np.diag(r))  # fix the QR sign ambiguity
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)

    if shift_level == 0:
        return np.eye(dim), np.zeros(dim)
    alpha = shift_level / (1.0 + shift_level)
    blend = (1.0 - alpha) * np.eye(dim) + alpha * q
    u, _, vt = np.linalg.svd(blend)
    rotation = u @ vt  # nearest orthogonal matrix to the blend
    return rotation, shift_level * direction


def generate_synthetic(spec: SyntheticSpec, seed: int) -> EmbeddingDataset:
    """Deterministically generate a Gaussian-mixture embedding dataset.

    The output is a pure function of (spec, seed). Items are grouped by
    class: item i belongs to class i // items_per_class.
    """
    spec.validate()
    seq = np.random.SeedSequence(seed & ((1 << 64) - 1))
    latent_seq, motion_seq, *layer_seqs = seq.spawn(2 + len(spec.layers))

    n = spec.num_classes * spec.items_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.items_per_class)
    means = simplex_means(spec.num_classes, spec.dim, spec.class_separation)
    rotation, translation = _rigid_motion(
        spec.dim, spec.shift_level, np.random.default_rng(motion_seq)
    )

    def informative_cloud(rng: np.random.Generator) -> np.ndarray:
        base = means[labels] + spec.noise_sigma * rng.standard_normal((n, spec.dim))
        return base @ rotation.T + translation

    latent = informative_cloud(np.random.default_rng(latent_seq))
    first_informative: np.ndarray | None = None

    features: dict[LayerKey, np.ndarray] = {}
    for layer, layer_seq in zip(spec.layers, layer_seqs):
        rng = np.random.default_rng(layer_seq)
        ldim = layer.dim if layer.dim is not None else spec.dim
        if layer.kind == "informative":
            block = informative_cloud(rng)
            if first_informative is None:
                first_informative = block
        elif layer.kind == "pure-noise":
            block = spec.noise_sigma * rng.standard_normal((n, ldim))
        else:  # random-projection
            source = first_informative if first_informative is not None else latent
            proj = rng.standard_normal((ldim, spec.dim)) / math.sqrt(spec.dim)
            block = source @ proj.T
        features[LayerKey(layer.model_id, layer.layer_index)] = block.astype(np.float32)

    layer_summary = "+".join(
        f"{layer.model_id}:{layer.layer_index}:{layer.kind}" for layer in spec.layers
    )
    dataset_id = (
        f"synthetic(classes={spec.num_classes},per_class={spec.items_per_class},"
        f"dim={spec.dim},separation={spec.class_separation},"
        f"shift={spec.shift_level},sigma={spec.noise_sigma},"
        f"layers={layer_summary},seed={seed})"
    )
    return EmbeddingDataset.build(labels, features, dataset_id=dataset_id)


def _standard_normal_cdf(x: float) -> float:
    return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def bayes_accuracy(
    spec: SyntheticSpec, mc_samples: int = 200_000, mc_seed: int = 0
) -> float:
    """Bayes-optimal accuracy of the spec's Gaussian class mixture.

    Two classes have the closed form Phi(separation / (2 sigma)). More
    classes are integrated by Monte Carlo over ``mc_samples`` draws with the
    fixed ``mc_seed``; the draws are shared across calls, so accuracy is
    exactly monotone in separation and sigma on a parameter grid. Rigid
    motion does not affect the value.
    """
    spec.validate()
    if spec.class_separation == 0:
        return 1.0 / spec.num_classes
    if spec.num_classes == 2:
        return _standard_normal_cdf(spec.class_separation / (2.0 * spec.noise_sigma))

    means = simplex_means(spec.num_classes, spec.dim, spec.class_separation)
    mean_sq = (means**2).sum(axis=1)
    rng = np.random.default_rng(mc_seed)
    correct = 0
    chunk = 20_000
    remaining = mc_samples
    while remaining > 0:
        m = min(chunk, remaining)
        # By symmetry it suffices to sample from class 0.
        x = means[0] + spec.noise_sigma * rng.standard_normal((m, spec.dim))
        scores = x @ means.T - 0.5 * mean_sq  # argmax equals nearest mean
        correct += int((scores.argmax(axis=1) == 0).sum())
        remaining -= m
    return correct / mc_samples

"""Long-tailed split construction, synthetic tasks and batch iteration."""
from __future__ import annotations

import json
import math
import pickle
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MANIFEST_VERSION = 1
MANY_SHOT_MIN = 100  # many: n > 100
FEW_SHOT_MAX = 20  # few: n < 20


def exponential_counts(n_max: int, beta: float, num_classes: int) -> list[int]:
    """Per-class sizes ``floor(n_max * beta ** (-j / (num_classes - 1)))``.

    >>> exponential_counts(100, 4, 3)
    [100, 50, 25]
    """
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    if not beta >= 1:
        raise ValueError(f"imbalance factor beta must be >= 1, got {beta}")
    if math.floor(n_max / beta) < 1:
        raise ValueError(f"n_max={n_max} with beta={beta} leaves the smallest class empty")
    if num_classes == 1:
        return [int(n_max)]
    # dividing by beta**x (not multiplying by (1/beta)**x) keeps the last
    # entry equal to floor(n_max / beta) under rounding
    return [int(n_max / beta ** (j / (num_classes - 1.0))) for j in range(num_classes)]


@dataclass(frozen=True)
class LongTailSpec:
    num_classes: int
    n_max: int
    beta: float
    counts: tuple[int, ...]

    @classmethod
    def build(cls, n_max: int, beta: float, num_classes: int) -> "LongTailSpec":
        return cls(num_classes, int(n_max), float(beta), tuple(exponential_counts(n_max, beta, num_classes)))

    def __post_init__(self):
        if len(self.counts) != self.num_classes:
            raise ValueError("counts length must equal num_classes")
        if self.counts[0] != self.n_max:
            raise ValueError("counts[0] must equal n_max")
        if any(a < b for a, b in zip(self.counts, self.counts[1:])):
            raise ValueError("counts must be non-increasing")
        if self.num_classes > 1 and self.counts[-1] != math.floor(self.n_max / self.beta):
            raise ValueError("counts[-1] must equal floor(n_max / beta)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = list(self.counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LongTailSpec":
        return cls(int(d["num_classes"]), int(d["n_max"]), float(d["beta"]), tuple(int(c) for c in d["counts"]))


@dataclass
class DatasetSplit:
    """Inputs ``x`` (first axis = sample), int64 labels ``y`` and source ids."""

    x: np.ndarray
    y: np.ndarray
    num_classes: int
    ids: np.ndarray | None = None
    spec: LongTailSpec | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if self.ids is None:
            self.ids = np.arange(len(self.y), dtype=np.int64)
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def per_class_index(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.y == c) for c in range(self.num_classes)}

    def class_counts(self) -> list[int]:
        return np.bincount(self.y, minlength=self.num_classes).tolist()

    def subset(self, idx: np.ndarray, spec: LongTailSpec | None = None) -> "DatasetSplit":
        return DatasetSplit(self.x[idx], self.y[idx], self.num_classes, self.ids[idx], spec)


def build_longtail_split(
    source: DatasetSplit,
    spec: LongTailSpec,
    seed: int,
    class_order: Sequence[int] | None = None,
) -> DatasetSplit:
    """Uniformly subsample each class without replacement to the sizes in ``spec``.

    ``class_order[j]`` is the source class that receives ``spec.counts[j]``
    samples; the default keeps the original label order.
    """
    if spec.num_classes != source.num_classes:
        raise ValueError(f"spec has {spec.num_classes} classes, source has {source.num_classes}")
    order = list(range(spec.num_classes)) if class_order is None else [int(c) for c in class_order]
    if sorted(order) != list(range(spec.num_classes)):
        raise ValueError("class_order must be a permutation of the class ids")
    rng = np.random.default_rng(seed)
    index = source.per_class_index
    picked = []
    for rank, cls in enumerate(order):
        avail = index[cls]
        need = spec.counts[rank]
        if len(avail) < need:
            raise ValueError(f"class {cls} has {len(avail)} samples, {need} required")
        picked.append(np.sort(rng.choice(avail, size=need, replace=False)))
    idx = np.sort(np.concatenate(picked))
    return source.subset(idx, spec)


@dataclass(frozen=True)
class ClassGroups:
    many: tuple[int, ...]
    medium: tuple[int, ...]
    few: tuple[int, ...]

    def items(self):
        return (("many", self.many), ("medium", self.medium), ("few", self.few))

    def to_dict(self) -> dict:
        return {name: list(members) for name, members in self.items()}


def group_classes(counts: Sequence[int]) -> ClassGroups:
    """Many (> 100), medium (20..100 inclusive) and few (< 20) shot classes."""
    if len(counts) == 0:
        raise ValueError("counts must be non-empty")
    many = tuple(j for j, n in enumerate(counts) if n > MANY_SHOT_MIN)
    few = tuple(j for j, n in enumerate(counts) if n < FEW_SHOT_MAX)
    medium = tuple(j for j, n in enumerate(counts) if FEW_SHOT_MAX <= n <= MANY_SHOT_MIN)
    return ClassGroups(many, medium, few)


# ---------------------------------------------------------------------------
# synthetic task


@dataclass(frozen=True)
class SyntheticTaskConfig:
    num_classes: int = 10
    feature_dim: int = 8
    class_separation: float = 3.0
    within_class_std: float = 1.0
    n_max: int = 500
    beta: float = 100.0
    test_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2")
        if self.num_classes < 2:
            raise ValueError("a synthetic task needs at least 2 classes")
        if not self.class_separation > 0 or not self.within_class_std > 0:
            raise ValueError("class_separation and within_class_std must be > 0")

    @property
    def spec(self) -> LongTailSpec:
        return LongTailSpec.build(self.n_max, self.beta, self.num_classes)


def class_means(cfg: SyntheticTaskConfig) -> np.ndarray:
    """Class means with nearest-neighbour distance ``class_separation``.

    Scaled simplex vertices when there is room (dim >= classes), otherwise a
    regular polygon in the first two coordinates.
    """
    k, d, sep = cfg.num_classes, cfg.feature_dim, cfg.class_separation
    means = np.zeros((k, d))
    if d >= k:
        means[np.arange(k), np.arange(k)] = sep / math.sqrt(2.0)
    else:
        radius = sep / (2.0 * math.sin(math.pi / k))
        angles = 2.0 * math.pi * np.arange(k) / k
        means[:, 0] = radius * np.cos(angles)
        means[:, 1] = radius * np.sin(angles)
    return means


def sample_gaussian_split(cfg: SyntheticTaskConfig, counts: Sequence[int], stream: int) -> DatasetSplit:
    rng = np.random.default_rng([cfg.seed, stream])
    means = class_means(cfg)
    xs, ys = [], []
    for c, n in enumerate(counts):
        xs.append(means[c] + cfg.within_class_std * rng.standard_normal((n, cfg.feature_dim)))
        ys.append(np.full(n, c, dtype=np.int64))
    return DatasetSplit(np.concatenate(xs).astype(np.float32), np.concatenate(ys), cfg.num_classes)


def synth_gaussian_task(cfg: SyntheticTaskConfig) -> tuple[DatasetSplit, DatasetSplit]:
    """Long-tailed train split and balanced test split of isotropic Gaussian classes."""
    spec = cfg.spec
    train = sample_gaussian_split(cfg, spec.counts, stream=0)
    train.spec = spec
    test = sample_gaussian_split(cfg, [cfg.test_per_class] * cfg.num_classes, stream=1)
    return train, test


def synth_validation_split(cfg: SyntheticTaskConfig) -> DatasetSplit:
    return sample_gaussian_split(cfg, [cfg.test_per_class] * cfg.num_classes, stream=2)


def synth_balanced_source(cfg: SyntheticTaskConfig) -> DatasetSplit:
    """``n_max`` samples per class; input for :func:`build_longtail_split`."""
    return sample_gaussian_split(cfg, [cfg.n_max] * cfg.num_classes, stream=3)


# ---------------------------------------------------------------------------
# batching


def batch_indices(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Epoch-seeded permutation cut into batches; a trailing batch of < 2 is dropped."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if batches and len(batches[-1]) < 2:
        batches.pop()
    return batches


def batch_iterator(split: DatasetSplit, batch_size: int, seed: int, epoch: int) -> Iterator[tuple]:
    for idx in batch_indices(len(split), batch_size, seed, epoch):
        yield split.x[idx], split.y[idx]


def augment_images(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop with zero padding plus horizontal flip, for (N, C, H, W) batches."""
    n, _, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    flip = rng.random(n) < 0.5
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


# ---------------------------------------------------------------------------
# on-disk sources


def load_array_dataset(x_path: str | Path, y_path: str | Path, num_classes: int | None = None) -> DatasetSplit:
    """A single ``.npy`` input array plus a ``.npy`` (or text) label file."""
    x = np.load(x_path)
    y_path = Path(y_path)
    y = np.load(y_path) if y_path.suffix == ".npy" else np.loadtxt(y_path, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    k = int(num_classes if num_classes is not None else y.max() + 1)
    return DatasetSplit(x, y, k)


def load_folder_dataset(root: str | Path) -> DatasetSplit:
    """One sub-directory per class (sorted by name), holding ``.npy`` arrays or images."""
    root = Path(root)
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise FileNotFoundError(f"no class directories under {root}")
    xs, ys = [], []
    for label, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            if f.suffix == ".npy":
                xs.append(np.load(f))
            elif f.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp"):
                try:
                    from PIL import Image
                except ImportError as exc:
                    raise ImportError("reading image files needs Pillow") from exc
                xs.append(np.asarray(Image.open(f).convert("RGB")).transpose(2, 0, 1))
            else:
                continue
            ys.append(label)
    return DatasetSplit(np.stack(xs), np.asarray(ys), len(class_dirs))


_CIFAR_BIN = {
    "cifar10": {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"], "label_bytes": 1},
    "cifar100": {"train": ["train.bin"], "test": ["test.bin"], "label_bytes": 2},
}
_CIFAR_PY = {
    "cifar10": {"train": [f"data_batch_{i}" for i in range(1, 6)], "test": ["test_batch"], "key": b"labels"},
    "cifar100": {"train": ["train"], "test": ["test"], "key": b"fine_labels"},
}


def load_cifar(root: str | Path, name: str = "cifar10", train: bool = True) -> DatasetSplit:
    """Read the public CIFAR-10/100 batches, binary (``*.bin``) or python-pickle layout.

    Returns uint8 images shaped (N, 3, 32, 32). For CIFAR-100 the fine label is used.
    """
    root = Path(root)
    if name not in _CIFAR_BIN:
        raise ValueError(f"unknown CIFAR variant {name!r}")
    part = "train" if train else "test"
    num_classes = 10 if name == "cifar10" else 100
    bin_files = [root / f for f in _CIFAR_BIN[name][part]]
    py_files = [root / f for f in _CIFAR_PY[name][part]]
    if all(f.exists() for f in bin_files):
        lb = _CIFAR_BIN[name]["label_bytes"]
        rec = lb + 3072
        xs, ys = [], []
        for f in bin_files:
            raw = np.fromfile(f, dtype=np.uint8)
            if raw.size % rec:
                raise ValueError(f"{f}: size {raw.size} is not a multiple of {rec}")
            raw = raw.reshape(-1, rec)
            ys.append(raw[:, lb - 1].astype(np.int64))
            xs.append(raw[:, lb:].reshape(-1, 3, 32, 32))
    elif all(f.exists() for f in py_files):
        xs, ys = [], []
        for f in py_files:
            with open(f, "rb") as fh:
                d = pickle.load(fh, encoding="bytes")
            xs.append(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(d[_CIFAR_PY[name]["key"]], dtype=np.int64))
    else:
        raise FileNotFoundError(f"no {name} {part} batches found under {root}")
    return DatasetSplit(np.concatenate(xs), np.concatenate(ys), num_classes)


# ---------------------------------------------------------------------------
# manifests


@dataclass
class SplitManifest:
    spec: LongTailSpec
    seed: int
    per_class_ids: dict[int, list[int]]
    source: dict = field(default_factory=dict)
    class_order: list[int] | None = None

    def to_dict(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "spec": self.spec.to_dict(),
            "seed": self.seed,
            "class_order": self.class_order,
            "source": self.source,
            "per_class_ids": {str(c): ids for c, ids in sorted(self.per_class_ids.items())},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SplitManifest":
        d = json.loads(Path(path).read_text())
        if d.get("format_version") != MANIFEST_VERSION:
            raise ValueError(f"{path}: unsupported manifest version {d.get('format_version')}")
        return cls(
            LongTailSpec.from_dict(d["spec"]),
            int(d["seed"]),
            {int(c): [int(i) for i in ids] for c, ids in d["per_class_ids"].items()},
            d.get("source", {}),
            d.get("class_order"),
        )


def manifest_for(split: DatasetSplit, seed: int, source: dict | None = None, class_order=None) -> SplitManifest:
    ids = {c: split.ids[idx].tolist() for c, idx in split.per_class_index.items()}
    return SplitManifest(split.spec, seed, ids, source or {}, list(class_order) if class_order else None)


def apply_manifest(source: DatasetSplit, manifest: SplitManifest) -> DatasetSplit:
    """Rebuild a split from a manifest's source ids."""
    pos = {int(i): k for k, i in enumerate(source.ids)}
    idx = []
    for c, ids in manifest.per_class_ids.items():
        for i in ids:
            if i not in pos:
                raise ValueError(f"manifest id {i} (class {c}) not present in source")
            idx.append(pos[i])
    return source.subset(np.sort(np.asarray(idx, dtype=np.int64)), manifest.spec)

"""Synthetic continual-learning task streams.

The building block is :func:`make_blobs`, a desk-scale stand-in for image datasets.
From one base :class:`Dataset` the module derives per-client :class:`TaskStream`
objects:

* class-incremental streams (:func:`partition_class_incremental`), where the label
  set is split into ``T`` disjoint groups and every class is sharded across clients;
* domain-incremental streams (:func:`partition_domain_incremental`), where each
  client keeps the same shard and tasks differ by the noise applied to it.

Attack injectors (:func:`apply_label_flip`, :func:`apply_backdoor`) turn a benign
task into an adversarial one, :func:`sample_proxy` draws the small public samples
kept by the server, and :func:`load_idx` reads real datasets in IDX format.

Every generator takes a seed (or a :class:`numpy.random.Generator`) and is
deterministic under a fixed integer seed.
"""
import gzip
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractViolation, PoolLookupError, SacFLError, ValidationError
from .nn_core import Seed

__all__ = [
    "Dataset",
    "TaskKind",
    "AttackKind",
    "NoiseKind",
    "NoiseSpec",
    "TaskSpec",
    "TaskStream",
    "ProxyPool",
    "IdxFormatError",
    "make_blobs",
    "stratified_split",
    "partition_class_incremental",
    "partition_domain_incremental",
    "make_domain_incremental",
    "apply_noise",
    "apply_label_flip",
    "apply_backdoor",
    "sample_proxy",
    "load_idx",
    "load_idx_dataset",
]

_logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Labelled samples, ``features`` is ``[n x d]`` and ``labels`` is ``[n]``"""

    features: np.ndarray
    labels: np.ndarray
    class_set: FrozenSet[int] = frozenset()

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if features.ndim != 2 or features.shape[0] != labels.shape[0]:
            msg = f"features {features.shape} do not match labels {labels.shape}"
            raise ValidationError(msg)
        class_set = frozenset(int(c) for c in self.class_set) or frozenset(
            int(c) for c in np.unique(labels)
        )
        if labels.size and not set(np.unique(labels).tolist()) <= class_set:
            raise ValidationError("every label must belong to the class set")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_set", class_set)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return False
        return (
            self.class_set == other.class_set
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    @property
    def classes(self) -> List[int]:
        return sorted(self.class_set)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_set)

    def select_classes(self, classes: Iterable[int]) -> "Dataset":
        classes = frozenset(int(c) for c in classes)
        mask = np.isin(self.labels, sorted(classes))
        return Dataset(self.features[mask], self.labels[mask], classes)

    def with_class_set(self, class_set: Iterable[int]) -> "Dataset":
        return Dataset(self.features, self.labels, frozenset(class_set))

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    @classmethod
    def concatenate(cls, parts: Sequence["Dataset"]) -> "Dataset":
        if not parts:
            raise ValidationError("cannot concatenate zero datasets")
        class_set: FrozenSet[int] = frozenset().union(*(p.class_set for p in parts))
        return cls(
            np.concatenate([p.features for p in parts]),
            np.concatenate([p.labels for p in parts]),
            class_set,
        )


class TaskKind(Enum):
    CLASS_INCREMENTAL = "class_incremental"
    DOMAIN_INCREMENTAL = "domain_incremental"


class AttackKind(Enum):
    NONE = "none"
    LABEL_FLIP = "label_flip"
    BACKDOOR = "backdoor"


class NoiseKind(Enum):
    IDENTITY = "identity"
    GAUSSIAN = "gaussian"
    MULTIPLICATIVE = "multiplicative"


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.IDENTITY
    sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not self.sigma >= 0:
            raise ValidationError(f"noise sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    kind: TaskKind
    classes: FrozenSet[int] = frozenset()
    noise: Optional[NoiseSpec] = None
    attack: AttackKind = AttackKind.NONE
    iterations: int = 1

    def __post_init__(self):
        if self.task_id < 0 or self.iterations < 1:
            raise ValidationError("task ids must be >= 0 and iterations >= 1")

    @property
    def benign(self) -> bool:
        return self.attack is AttackKind.NONE


@dataclass
class TaskStream:
    """Sequence of tasks one client goes through.

    ``boundaries`` holds the global round indices at which the client's data switches
    to the next task; it is the ground truth drift detection is judged against.
    """

    client_id: int
    specs: List[TaskSpec]
    datasets: List[Dataset]
    offset: int = 0
    boundaries: List[int] = field(init=False)

    def __post_init__(self):
        if len(self.specs) != len(self.datasets) or not self.specs:
            raise ContractViolation("task specs and datasets must align one-to-one")
        rounds = np.cumsum([spec.iterations for spec in self.specs])[:-1]
        boundaries = [int(r) + self.offset for r in rounds]
        if any(b <= a for a, b in zip([0] + boundaries, boundaries)):
            raise ValidationError(f"task boundaries must increase, got {boundaries}")
        if boundaries and boundaries[-1] >= self.total_rounds:
            raise ValidationError("client offset pushes a task past the last round")
        self.boundaries = boundaries

    @property
    def total_rounds(self) -> int:
        return sum(spec.iterations for spec in self.specs)

    @property
    def num_tasks(self) -> int:
        return len(self.specs)

    def task_at(self, round_idx: int) -> int:
        """Index of the task the client holds data for at ``round_idx``"""
        return int(np.searchsorted(self.boundaries, round_idx, side="right"))

    def dataset_at(self, round_idx: int) -> Dataset:
        return self.datasets[self.task_at(round_idx)]


class ProxyPool:
    """Server-side public stand-in samples, keyed by ``(client, task)``"""

    def __init__(self):
        self._entries: Dict[Tuple[int, int], Dataset] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __getitem__(self, key: Tuple[int, int]) -> Dataset:
        try:
            return self._entries[key]
        except KeyError:
            raise PoolLookupError("proxy history data pool", key) from None

    def keys(self) -> List[Tuple[int, int]]:
        return sorted(self._entries)

    def add(self, client: int, task: int, data: Dataset):
        if (client, task) in self._entries:
            raise ContractViolation(f"proxy data for {(client, task)} already stored")
        self._entries[(client, task)] = data


def _rng(seed: Seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _centers(num_classes: int, dim: int, separation: float, rng) -> np.ndarray:
    if num_classes <= dim:
        # orthonormal rows are sqrt(2) apart
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        return q[:num_classes] * (separation / math.sqrt(2.0)) * (1.0 + 1e-9)
    centers: List[np.ndarray] = []
    radius = separation * num_classes ** (1.0 / dim)
    while len(centers) < num_classes:
        candidate = rng.uniform(-radius, radius, dim)
        if all(np.linalg.norm(candidate - c) >= separation for c in centers):
            centers.append(candidate)
        else:
            radius *= 1.001
    return np.stack(centers)


def make_blobs(
    num_classes: int,
    dim: int,
    per_class: int,
    separation: float = 6.0,
    spread: float = 1.0,
    rng_seed: Seed = 0,
) -> Dataset:
    """Gaussian clusters, one per class, ``per_class`` samples each.

    Cluster centres are pairwise at least ``separation`` apart, each cluster has
    standard deviation ``spread`` along every axis. Samples are ordered class by
    class.
    """
    if num_classes < 2 or dim < 1 or per_class < 1:
        raise ValidationError("blobs need >= 2 classes, dim >= 1 and per_class >= 1")
    if not separation > 0 or not spread >= 0:
        raise ValidationError("separation must be > 0 and spread >= 0")
    rng = _rng(rng_seed)
    centers = _centers(num_classes, dim, separation, rng)
    noise = rng.standard_normal((num_classes, per_class, dim)) * spread
    features = (centers[:, None, :] + noise).reshape(num_classes * per_class, dim)
    labels = np.repeat(np.arange(num_classes), per_class)
    return Dataset(features, labels, frozenset(range(num_classes)))


def stratified_split(
    ds: Dataset, counts: Sequence[int], rng_seed: Seed = 0
) -> List[Dataset]:
    """Split every class into consecutive parts of ``counts[i]`` samples each.

    The remainder of each class after the listed counts forms one extra, last part
    (it is empty when the counts add up to the class size).
    """
    rng = _rng(rng_seed)
    parts: List[List[np.ndarray]] = [[] for _ in range(len(counts) + 1)]
    for label in ds.classes:
        idx = rng.permutation(ds.class_indices(label))
        if sum(counts) > idx.size:
            raise ValidationError(f"class {label} has only {idx.size} samples")
        start = 0
        for i, count in enumerate(list(counts) + [idx.size - sum(counts)]):
            parts[i].append(idx[start : start + count])
            start += count
    return [ds.subset(np.concatenate(chunks)) for chunks in parts]


def _class_groups(classes: Sequence[int], num_tasks: int, rng) -> List[List[int]]:
    order = [int(c) for c in rng.permutation(classes)]
    base, extra = divmod(len(order), num_tasks)
    sizes = [base + (1 if t >= num_tasks - extra else 0) for t in range(num_tasks)]
    groups, start = [], 0
    for size in sizes:
        groups.append(sorted(order[start : start + size]))
        start += size
    return groups


def _iterations(iterations: Union[int, Sequence[int]], num_tasks: int) -> List[int]:
    if isinstance(iterations, int):
        return [iterations] * num_tasks
    its = [int(i) for i in iterations]
    if len(its) != num_tasks:
        raise ValidationError(f"expected {num_tasks} iteration counts, got {len(its)}")
    return its


def _offsets(offsets: Optional[Sequence[int]], num_clients: int) -> List[int]:
    if offsets is None:
        return [0] * num_clients
    if len(offsets) != num_clients:
        raise ValidationError("one task-boundary offset per client is required")
    return [int(o) for o in offsets]


def partition_class_incremental(
    base: Dataset,
    num_tasks: int,
    num_clients: int,
    rng_seed: Seed = 0,
    iterations: Union[int, Sequence[int]] = 1,
    client_offsets: Optional[Sequence[int]] = None,
) -> List[TaskStream]:
    """Class-incremental streams, one per client.

    Classes are shuffled and cut into ``num_tasks`` groups whose sizes differ by at
    most one (larger groups last, 10 classes in 3 tasks give 3, 3, 4). The samples of
    each class are cut into ``num_clients`` shards which are handed out to the
    clients in a seeded random order, so no sample is used twice. Task ``t`` of every
    client covers the same class group.
    """
    classes = base.classes
    if num_tasks < 1 or num_tasks > len(classes):
        msg = f"cannot split {len(classes)} classes into {num_tasks} tasks"
        raise ValidationError(msg)
    if num_clients < 1:
        raise ValidationError("at least one client is required")
    rng = _rng(rng_seed)
    groups = _class_groups(classes, num_tasks, rng)
    shards: Dict[int, List[np.ndarray]] = {}
    for label in classes:
        idx = rng.permutation(base.class_indices(label))
        pieces = np.array_split(idx, num_clients)
        owners = rng.permutation(num_clients)  # client k gets piece owners[k]
        shards[label] = [pieces[j] for j in owners]
    its = _iterations(iterations, num_tasks)
    offsets = _offsets(client_offsets, num_clients)

    streams = []
    for k in range(num_clients):
        specs, datasets = [], []
        for t, group in enumerate(groups):
            idx = np.sort(np.concatenate([shards[label][k] for label in group]))
            datasets.append(base.subset(idx).with_class_set(group))
            kind = TaskKind.CLASS_INCREMENTAL
            specs.append(TaskSpec(t, kind, frozenset(group), iterations=its[t]))
        streams.append(TaskStream(k, specs, datasets, offsets[k]))
    _logger.debug("class groups per task: %s", groups)
    return streams


def apply_noise(ds: Dataset, noise: NoiseSpec, rng_seed: Seed = 0) -> Dataset:
    """Gaussian ``x + e`` or multiplicative ``x * (1 + e)`` noise, ``e ~ N(0, s^2)``"""
    if noise.kind is NoiseKind.IDENTITY or noise.sigma == 0:
        return ds
    eps = _rng(rng_seed).standard_normal(ds.features.shape) * noise.sigma
    if noise.kind is NoiseKind.GAUSSIAN:
        features = ds.features + eps
    else:
        features = ds.features * (1.0 + eps)
    return Dataset(features, ds.labels.copy(), ds.class_set)


def make_domain_incremental(
    base: Dataset,
    noise_specs: Sequence[NoiseSpec],
    rng_seed: Seed = 0,
    iterations: Union[int, Sequence[int]] = 1,
) -> List[Tuple[TaskSpec, Dataset]]:
    """One task per noise descriptor, labels identical across tasks"""
    if not noise_specs:
        raise ValidationError("at least one noise descriptor is required")
    its = _iterations(iterations, len(noise_specs))
    seeds = np.random.SeedSequence(_seed_entropy(rng_seed)).spawn(len(noise_specs))
    tasks = []
    for t, (noise, seed) in enumerate(zip(noise_specs, seeds)):
        spec = TaskSpec(
            t, TaskKind.DOMAIN_INCREMENTAL, base.class_set, noise, iterations=its[t]
        )
        tasks.append((spec, apply_noise(base, noise, seed)))
    return tasks


def _seed_entropy(seed: Seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(1)[0])
    if isinstance(seed, np.random.Generator):
        return int(seed.integers(0, 2**32))
    return 0 if seed is None else int(seed)


def partition_domain_incremental(
    base: Dataset,
    noise_specs: Sequence[NoiseSpec],
    num_clients: int,
    rng_seed: Seed = 0,
    iterations: Union[int, Sequence[int]] = 1,
    client_offsets: Optional[Sequence[int]] = None,
) -> List[TaskStream]:
    """Each client keeps a fixed stratified shard; task ``t`` adds noise ``t`` to it"""
    if num_clients < 1:
        raise ValidationError("at least one client is required")
    rng = _rng(rng_seed)
    per_client: List[List[np.ndarray]] = [[] for _ in range(num_clients)]
    for label in base.classes:
        pieces = np.array_split(rng.permutation(base.class_indices(label)), num_clients)
        for k, piece in enumerate(pieces):
            per_client[k].append(piece)
    offsets = _offsets(client_offsets, num_clients)
    streams = []
    for k in range(num_clients):
        shard = base.subset(np.concatenate(per_client[k]))
        seed = int(rng.integers(0, 2**32))
        tasks = make_domain_incremental(shard, noise_specs, seed, iterations)
        specs = [spec for spec, _ in tasks]
        streams.append(TaskStream(k, specs, [ds for _, ds in tasks], offsets[k]))
    return streams


def apply_label_flip(
    ds: Dataset, rng_seed: Seed = 0, label_space: Optional[Iterable[int]] = None
) -> Dataset:
    """Replace every label by a uniformly drawn *different* label.

    Args:
        ds: benign data
        rng_seed: seed or generator
        label_space: labels to draw from, default ``ds.class_set``; passing the
            global label set lets a poisoned task point at historical classes
    """
    space = sorted(set(ds.class_set if label_space is None else label_space))
    if len(space) < 2:
        raise ValidationError("label flipping needs at least two classes")
    space_arr = np.asarray(space)
    position = np.searchsorted(space_arr, ds.labels)
    if not np.array_equal(space_arr[np.minimum(position, len(space) - 1)], ds.labels):
        raise ValidationError("every label must belong to the flipping label space")
    shift = _rng(rng_seed).integers(0, len(space) - 1, size=len(ds)) + 1
    flipped = space_arr[(position + shift) % len(space)]
    return Dataset(ds.features.copy(), flipped, frozenset(space) | ds.class_set)


def apply_backdoor(
    ds: Dataset,
    trigger_dims: Sequence[int],
    trigger_value: float,
    target_label: int,
    poison_fraction: float = 0.5,
    rng_seed: Seed = 0,
) -> Dataset:
    """Stamp a trigger on ``ceil(poison_fraction * n)`` random rows, relabel them"""
    if not 0 < poison_fraction <= 1:
        msg = f"poison fraction must lie in (0, 1], got {poison_fraction}"
        raise ValidationError(msg)
    if target_label not in ds.class_set:
        raise ValidationError(f"target label {target_label} is not in the class set")
    dims = np.asarray(trigger_dims, dtype=np.int64)
    if dims.size == 0 or dims.min() < 0 or dims.max() >= ds.dim:
        msg = f"trigger dims {list(trigger_dims)} out of range [0, {ds.dim})"
        raise ValidationError(msg)
    count = min(len(ds), math.ceil(poison_fraction * len(ds)))
    rows = np.sort(_rng(rng_seed).choice(len(ds), size=count, replace=False))
    features, labels = ds.features.copy(), ds.labels.copy()
    features[np.ix_(rows, dims)] = trigger_value
    labels[rows] = target_label
    return Dataset(features, labels, ds.class_set)


def sample_proxy(ds: Dataset, m: int, rng_seed: Seed = 0) -> Dataset:
    """Seeded subsample of ``m`` rows without replacement, balanced across classes.

    Classes are visited round-robin, each contributing its next shuffled sample, so
    every class is represented as soon as ``m`` allows it.
    """
    if not 1 <= m <= len(ds):
        raise ValidationError(f"proxy size must lie in [1, {len(ds)}], got {m}")
    rng = _rng(rng_seed)
    queues = [list(rng.permutation(ds.class_indices(c))) for c in ds.classes]
    chosen: List[int] = []
    depth = 0
    while len(chosen) < m:
        for queue in queues:
            if depth < len(queue) and len(chosen) < m:
                chosen.append(int(queue[depth]))
        depth += 1
    return ds.subset(chosen)


class IdxFormatError(SacFLError):
    """{msg}"""


_IDX_TYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def load_idx(path: Union[str, "os.PathLike[str]"]) -> np.ndarray:
    """Read an IDX file (``.gz`` accepted): 4-byte magic, big-endian dims, data"""
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fp:  # type: ignore[operator]
        raw = fp.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"{path}: bad magic number")
    type_code, ndim = raw[2], raw[3]
    if type_code not in _IDX_TYPES:
        raise IdxFormatError(f"{path}: unknown data type 0x{type_code:02x}")
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    dtype = _IDX_TYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(raw) - header_end != expected:
        raise IdxFormatError(f"{path}: expected {expected} data bytes")
    return np.frombuffer(raw, dtype=dtype, offset=header_end).reshape(dims)


def load_idx_dataset(images_path, labels_path, scale: float = 255.0) -> Dataset:
    """Flatten IDX images into ``[n x d]`` features divided by ``scale``"""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images_path} and {labels_path} differ in length")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / scale
    return Dataset(features, labels.astype(np.int64))

"""Episodic task construction: indexed datasets, task transforms and task datasets.

A task starts as a :class:`TaskDescription` (which samples, with which
labels) and is refined by description transforms (``NWays``, ``KShots``,
``RemapLabels``). ``LoadData`` materializes it into ``(x, y)`` pairs, after
which plain callables may edit the pairs (augmentations). The task dataset
finally stacks the pairs into ``(X, y)`` arrays.

Task ``i`` of a dataset seeded with ``s`` is always built from the generator
``numpy.random.default_rng(hash64(s, i))``.
"""
from __future__ import annotations

import hashlib
import json
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np

MANIFEST = "manifest.json"
DATA_FILE = "data.f64"


def hash64(*values: int) -> int:
    """Stable 64-bit hash of integers: BLAKE2b-64 over their little-endian two's-complement int64 bytes."""
    payload = b"".join(struct.pack("<Q", int(v) & 0xFFFFFFFFFFFFFFFF) for v in values)
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


class LabeledDataset(Protocol):
    def __len__(self) -> int: ...

    def __getitem__(self, i: int) -> tuple[np.ndarray, int]: ...


class ArrayDataset:
    """In-memory labeled dataset over a feature array and integer labels."""

    def __init__(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValueError(f"{len(X)} samples but {len(y)} labels")
        if y.size and not np.all(np.mod(y, 1) == 0):
            raise ValueError("labels must be integers")
        self.X = X
        self.y = y.astype(np.int64)

    def __len__(self):
        return len(self.X)

    def __getitem__(self, i):
        return self.X[i], int(self.y[i])


def save_dataset(path, X, y) -> None:
    """Write ``X``/``y`` as a manifest plus a flat row-major float64 file."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y).astype(np.int64)
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"num_samples": int(len(X)), "feature_shape": list(X.shape[1:]),
                "labels": [int(v) for v in y], "dtype": "float64", "byte_order": "little"}
    (root / MANIFEST).write_text(json.dumps(manifest) + "\n")
    X.astype("<f8").tofile(root / DATA_FILE)


def load_dataset(path) -> ArrayDataset:
    root = Path(path)
    manifest = json.loads((root / MANIFEST).read_text())
    n = int(manifest["num_samples"])
    shape = tuple(int(d) for d in manifest["feature_shape"])
    labels = manifest["labels"]
    if len(labels) != n:
        raise ValueError(f"manifest lists {len(labels)} labels for {n} samples")
    flat = np.fromfile(root / DATA_FILE, dtype="<f8")
    expected = n * int(np.prod(shape, dtype=np.int64))
    if flat.size != expected:
        raise ValueError(f"{DATA_FILE} holds {flat.size} values, expected {expected}")
    return ArrayDataset(flat.reshape((n,) + shape), labels)


class MetaDataset:
    """Wraps a labeled dataset with label -> indices and index -> label maps."""

    def __init__(self, source: LabeledDataset):
        self.source = source
        self.indices_to_labels: dict[int, int] = {}
        self.labels_to_indices: dict[int, list[int]] = OrderedDict()
        labels = getattr(source, "y", None)
        for i in range(len(source)):
            label = int(labels[i]) if labels is not None else int(source[i][1])
            self.indices_to_labels[i] = label
            self.labels_to_indices.setdefault(label, []).append(i)
        self.labels = sorted(self.labels_to_indices)

    def __len__(self):
        return len(self.source)

    def __getitem__(self, i):
        return self.source[i]


@dataclass
class TaskDescription:
    entries: list  # (sample_index, label)
    rng_seed: int
    rng: np.random.Generator = field(repr=False, compare=False, default=None)
    sampled_labels: tuple | None = None
    remapped: bool = False

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.rng_seed)

    def copy(self) -> "TaskDescription":
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return TaskDescription(list(self.entries), self.rng_seed, rng, self.sampled_labels, self.remapped)


class TaskTransform:
    """Refines a task description; stochastic choices use ``description.rng``."""

    terminal = False

    def __call__(self, description: TaskDescription) -> TaskDescription:
        raise NotImplementedError


class NWays(TaskTransform):
    def __init__(self, meta: MetaDataset, n: int):
        if n < 1 or n > len(meta.labels):
            raise ValueError(f"n={n} ways but the dataset has {len(meta.labels)} labels")
        self.meta = meta
        self.n = n

    def __call__(self, description):
        chosen = description.rng.choice(len(self.meta.labels), size=self.n, replace=False)
        labels = tuple(self.meta.labels[int(c)] for c in chosen)
        if description.entries:
            keep = set(labels)
            entries = [e for e in description.entries if e[1] in keep]
        else:
            entries = [(i, lab) for lab in labels for i in self.meta.labels_to_indices[lab]]
        return TaskDescription(entries, description.rng_seed, description.rng, labels)


class KShots(TaskTransform):
    def __init__(self, meta: MetaDataset, k: int, replacement: bool = False):
        if k < 1:
            raise ValueError(f"k must be positive, got {k}")
        self.meta = meta
        self.k = k
        self.replacement = replacement

    def __call__(self, description):
        by_label: dict[int, list] = OrderedDict()
        if description.entries:
            for entry in description.entries:
                by_label.setdefault(entry[1], []).append(entry)
        else:
            for lab in self.meta.labels:
                by_label[lab] = [(i, lab) for i in self.meta.labels_to_indices[lab]]
        entries = []
        for lab, pool in by_label.items():
            if not self.replacement and len(pool) < self.k:
                raise ValueError(f"class {lab} has {len(pool)} samples, fewer than k={self.k}")
            picks = description.rng.choice(len(pool), size=self.k, replace=self.replacement)
            entries.extend(pool[int(j)] for j in picks)
        return TaskDescription(entries, description.rng_seed, description.rng,
                               description.sampled_labels, description.remapped)


class RemapLabels(TaskTransform):
    """Relabel to 0..n-1 in the order the ways were sampled."""

    def __call__(self, description):
        if description.sampled_labels is None:
            raise ValueError("RemapLabels must run after NWays")
        mapping = {lab: j for j, lab in enumerate(description.sampled_labels)}
        entries = [(i, mapping[lab]) for i, lab in description.entries]
        return TaskDescription(entries, description.rng_seed, description.rng,
                               description.sampled_labels, True)


class LoadData(TaskTransform):
    """Terminal stage: materialize entries as ``(x, label)`` pairs in entry order."""

    terminal = True

    def __init__(self, meta: MetaDataset):
        self.meta = meta

    def __call__(self, description):
        if not description.entries:
            raise ValueError("cannot load an empty task description (did NWays/KShots run?)")
        return [(np.asarray(self.meta[i][0], dtype=np.float64), lab) for i, lab in description.entries]


class ClosureTransform:
    """Wraps ``f`` as a pipeline stage.

    ``stage="data"`` runs after ``LoadData`` on the list of pairs;
    ``stage="description"`` runs before it on the description. With
    ``stochastic=True``, ``f`` also receives the task's generator.
    """

    def __init__(self, f: Callable, stage: str = "data", stochastic: bool = False):
        if stage not in ("data", "description"):
            raise ValueError("stage must be 'data' or 'description'")
        self.f = f
        self.stage = stage
        self.stochastic = stochastic

    def __call__(self, task, rng=None):
        return self.f(task, rng) if self.stochastic else self.f(task)


def n_ways(meta, n):
    return NWays(meta, n)


def k_shots(meta, k, replacement=False):
    return KShots(meta, k, replacement)


def remap_labels():
    return RemapLabels()


def load_data(meta):
    return LoadData(meta)


def closure_transform(f, stage="data", stochastic=False):
    return ClosureTransform(f, stage, stochastic)


def rotation(angle: float) -> Callable:
    """Data-stage closure rotating 2-vectors by ``angle`` radians."""
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])

    def apply(pairs):
        return [(rot @ x, y) for x, y in pairs]

    return apply


def random_rotation(pairs, rng):
    """Rotate every 2-vector of a task by one angle drawn from the task's generator."""
    return rotation(rng.uniform(0.0, 2.0 * np.pi))(pairs)


def _split_stages(transforms):
    transforms = list(transforms)
    terminal = [i for i, t in enumerate(transforms) if getattr(t, "terminal", False)]
    if len(terminal) != 1:
        raise ValueError("the transform list must contain exactly one terminal LoadData stage")
    cut = terminal[0]
    for t in transforms[:cut]:
        if isinstance(t, ClosureTransform) and t.stage == "data":
            raise ValueError("data-stage closures must come after LoadData")
    for t in transforms[cut + 1:]:
        if isinstance(t, TaskTransform) or (isinstance(t, ClosureTransform) and t.stage == "description"):
            raise ValueError("only data-stage callables may follow LoadData")
    return transforms[:cut], transforms[cut], transforms[cut + 1:]


class TaskDataset:
    """Reproducible source of episodic tasks.

    ``get(i)`` always rebuilds the same task; descriptions are cached on first
    access. ``num_tasks=None`` makes the dataset unbounded (``sample()`` only).
    """

    def __init__(self, meta: MetaDataset, transforms: Sequence, num_tasks: int | None = None, seed: int = 0):
        self.meta = meta
        self.pre, self.loader, self.post = _split_stages(transforms)
        if num_tasks is not None and num_tasks < 1:
            raise ValueError(f"num_tasks must be positive or None, got {num_tasks}")
        self.num_tasks = num_tasks
        self.seed = int(seed)
        self._cache: dict[int, TaskDescription] = {}
        self._lock = threading.Lock()
        self._sampler = np.random.default_rng(hash64(self.seed, -1))

    def __len__(self):
        if self.num_tasks is None:
            raise TypeError("an unbounded task dataset has no length")
        return self.num_tasks

    def _describe(self, i: int) -> TaskDescription:
        desc = TaskDescription([], hash64(self.seed, i))
        for t in self.pre:
            if isinstance(t, ClosureTransform):
                desc = t(desc, desc.rng)
            else:
                desc = t(desc)
        return desc

    def describe(self, i: int) -> TaskDescription:
        """The (cached) description of task ``i`` after all description stages."""
        self._check_index(i)
        desc = self._cache.get(i)
        if desc is None:
            fresh = self._describe(i)
            with self._lock:
                desc = self._cache.setdefault(i, fresh)
        return desc

    def _check_index(self, i):
        if self.num_tasks is None:
            raise IndexError("an unbounded task dataset supports only sample()")
        if not 0 <= i < self.num_tasks:
            raise IndexError(f"task index {i} outside [0, {self.num_tasks})")

    def _materialize(self, desc: TaskDescription) -> tuple[np.ndarray, np.ndarray]:
        work = desc.copy()
        pairs = self.loader(work)
        for f in self.post:
            pairs = f(pairs, work.rng) if isinstance(f, ClosureTransform) else f(pairs)
        X = np.stack([np.asarray(x, dtype=np.float64) for x, _ in pairs])
        y = np.asarray([lab for _, lab in pairs], dtype=np.int64)
        return X, y

    def get(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self._materialize(self.describe(i))

    __getitem__ = get

    def sample(self) -> tuple[np.ndarray, np.ndarray]:
        with self._lock:
            if self.num_tasks is None:
                i = int(self._sampler.integers(0, 2**62))
            else:
                i = int(self._sampler.integers(0, self.num_tasks))
        if self.num_tasks is None:
            return self._materialize(self._describe(i))
        return self.get(i)

    def __iter__(self) -> Iterator:
        if self.num_tasks is None:
            raise TypeError("an unbounded task dataset cannot be enumerated")
        return (self.get(i) for i in range(self.num_tasks))


def split_support_query(X, y, shots: int):
    """First ``shots`` entries of each class form the support set, the rest the query set."""
    X, y = np.asarray(X), np.asarray(y)
    seen: dict[int, int] = {}
    support = np.zeros(len(y), dtype=bool)
    for j, lab in enumerate(y):
        c = seen.get(int(lab), 0)
        support[j] = c < shots
        seen[int(lab)] = c + 1
    if any(c < shots for c in seen.values()):
        raise ValueError(f"some class has fewer than {shots} entries")
    return (X[support], y[support]), (X[~support], y[~support])

"""Synthetic few-shot benchmarks with train/validation/test splits.

Classification tasksets draw classes from disjoint pools (40/12/12 of 64
classes); the sine taskset splits the amplitude range 70/15/15; the
particles taskset splits the goal x-range 70/15/15.
"""
from __future__ import annotations

from collections import namedtuple

import numpy as np

from .data import ArrayDataset, KShots, LoadData, MetaDataset, NWays, RemapLabels, TaskDataset, hash64
from .envs import Particles2D

TasksetBundle = namedtuple("TasksetBundle", ["train", "validation", "test"])

N_CLASSES = 64
SAMPLES_PER_CLASS = 40
CLASS_SPLITS = (40, 12, 12)
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
SINE_AMPLITUDE = (0.1, 5.0)
SINE_PHASE = (0.0, np.pi)
SINE_INPUT = (-5.0, 5.0)
DEFAULT_NUM_TASKS = 20000

_SPLITS = ("train", "validation", "test")


def _split_ranges(low: float, high: float) -> list[tuple[float, float]]:
    edges = np.cumsum((0.0,) + SPLIT_FRACTIONS)
    return [(low + (high - low) * a, low + (high - low) * b) for a, b in zip(edges[:-1], edges[1:])]


class SineTasks:
    """Regression tasks ``y = A sin(x + phase)`` with task-level (A, phase) draws.

    Mirrors the task dataset interface: ``get(i)``, ``sample()``, iteration.
    Each task holds ``samples`` points with inputs of shape (samples, 1).
    """

    def __init__(self, samples: int, amplitude=SINE_AMPLITUDE, phase=SINE_PHASE, seed: int = 0,
                 num_tasks: int | None = DEFAULT_NUM_TASKS):
        if samples < 1:
            raise ValueError(f"samples must be positive, got {samples}")
        self.samples = samples
        self.amplitude = tuple(amplitude)
        self.phase = tuple(phase)
        self.seed = seed
        self.num_tasks = num_tasks
        self._sampler = np.random.default_rng(hash64(seed, -1))

    def __len__(self):
        if self.num_tasks is None:
            raise TypeError("an unbounded task dataset has no length")
        return self.num_tasks

    def parameters(self, i: int) -> tuple[float, float]:
        rng = np.random.default_rng(hash64(self.seed, i))
        return float(rng.uniform(*self.amplitude)), float(rng.uniform(*self.phase))

    def _build(self, i: int):
        rng = np.random.default_rng(hash64(self.seed, i))
        amp = rng.uniform(*self.amplitude)
        phase = rng.uniform(*self.phase)
        x = rng.uniform(*SINE_INPUT, size=(self.samples, 1))
        return x, amp * np.sin(x + phase)

    def get(self, i: int):
        if self.num_tasks is not None and not 0 <= i < self.num_tasks:
            raise IndexError(f"task index {i} outside [0, {self.num_tasks})")
        return self._build(i)

    __getitem__ = get

    def sample(self):
        high = self.num_tasks if self.num_tasks is not None else 2**62
        return self._build(int(self._sampler.integers(0, high)))

    def __iter__(self):
        return (self.get(i) for i in range(len(self)))


def sine_value(x, amplitude: float, phase: float):
    return amplitude * np.sin(np.asarray(x, dtype=np.float64) + phase)


def sine_taskset(seed: int = 0, samples: int = 10, num_tasks: int | None = DEFAULT_NUM_TASKS) -> TasksetBundle:
    ranges = _split_ranges(*SINE_AMPLITUDE)
    return TasksetBundle(*(SineTasks(samples, r, SINE_PHASE, hash64(seed, k), num_tasks)
                           for k, r in enumerate(ranges)))


def blobs_pool(seed: int = 0, sigma: float = 0.15, dim: int = 16):
    """64 isotropic Gaussian classes in R^dim, 40 samples each; returns (X, y, means)."""
    rng = np.random.default_rng(hash64(seed, 1))
    means = rng.uniform(-1.0, 1.0, size=(N_CLASSES, dim))
    noise = rng.standard_normal((N_CLASSES, SAMPLES_PER_CLASS, dim))
    X = (means[:, None, :] + sigma * noise).reshape(-1, dim)
    y = np.repeat(np.arange(N_CLASSES), SAMPLES_PER_CLASS)
    return X, y, means


def glyphs_pool(seed: int = 0, flip_rate: float = 0.05, side: int = 8):
    """64 random binary side x side templates, 40 noisy copies each; returns (X, y, templates)."""
    rng = np.random.default_rng(hash64(seed, 2))
    templates = rng.integers(0, 2, size=(N_CLASSES, side * side)).astype(np.float64)
    flips = rng.random((N_CLASSES, SAMPLES_PER_CLASS, side * side)) < flip_rate
    X = np.abs(templates[:, None, :] - flips).reshape(-1, side * side)
    y = np.repeat(np.arange(N_CLASSES), SAMPLES_PER_CLASS)
    return X, y, templates


def split_classes(X, y) -> list[ArrayDataset]:
    """Partition by class id into the train/validation/test pools (ids kept)."""
    bounds = np.cumsum((0,) + CLASS_SPLITS)
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        mask = (y >= lo) & (y < hi)
        out.append(ArrayDataset(X[mask], y[mask]))
    return out


def _classification_bundle(pool, seed, train_ways, train_samples, test_ways, test_samples, num_tasks):
    X, y, _ = pool
    bundle = []
    for k, (source, split) in enumerate(zip(split_classes(X, y), _SPLITS)):
        ways, samples = (train_ways, train_samples) if split == "train" else (test_ways, test_samples)
        meta = MetaDataset(source)
        if ways > len(meta.labels):
            raise ValueError(f"{split} split has {len(meta.labels)} classes, cannot draw {ways} ways")
        if samples > SAMPLES_PER_CLASS:
            raise ValueError(f"{samples} samples per class requested, classes hold {SAMPLES_PER_CLASS}")
        transforms = [NWays(meta, ways), KShots(meta, samples), RemapLabels(), LoadData(meta)]
        bundle.append(TaskDataset(meta, transforms, num_tasks=num_tasks, seed=hash64(seed, 100 + k)))
    return TasksetBundle(*bundle)


def blobs_taskset(seed=0, train_ways=5, train_samples=2, test_ways=None, test_samples=None,
                  num_tasks=DEFAULT_NUM_TASKS, sigma=0.15) -> TasksetBundle:
    return _classification_bundle(blobs_pool(seed, sigma), seed, train_ways, train_samples,
                                  test_ways or train_ways, test_samples or train_samples, num_tasks)


def glyphs_taskset(seed=0, train_ways=5, train_samples=2, test_ways=None, test_samples=None,
                   num_tasks=DEFAULT_NUM_TASKS, flip_rate=0.05) -> TasksetBundle:
    return _classification_bundle(glyphs_pool(seed, flip_rate), seed, train_ways, train_samples,
                                  test_ways or train_ways, test_samples or train_samples, num_tasks)


def particles2d_taskset(seed: int = 0) -> TasksetBundle:
    """Three environments whose goal x-coordinates come from disjoint ranges."""
    envs = []
    for k, (lo, hi) in enumerate(_split_ranges(-1.0, 1.0)):
        envs.append(Particles2D(hash64(seed, 200 + k), goal_low=(lo, -1.0), goal_high=(hi, 1.0)))
    return TasksetBundle(*envs)


_REGISTRY = {
    "blobs": "classification",
    "glyphs": "classification",
    "particles2d": "rl",
    "sine": "regression",
}


def list_tasksets() -> list[str]:
    return sorted(_REGISTRY)


def taskset_kind(name: str) -> str:
    _check_name(name)
    return _REGISTRY[name]


def _check_name(name):
    if name not in _REGISTRY:
        raise ValueError(f"unknown taskset {name!r}; valid tasksets: {', '.join(list_tasksets())}")


def get_tasksets(name: str, train_ways: int = 5, train_samples: int = 10, test_ways: int | None = None,
                 test_samples: int | None = None, seed: int = 0,
                 num_tasks: int | None = DEFAULT_NUM_TASKS) -> TasksetBundle:
    """Standardized train/validation/test task sources for a registered benchmark.

    ``train_samples`` counts samples per class (support plus query) for
    classification and points per task for sine; ways are ignored outside
    classification.
    """
    _check_name(name)
    if train_ways < 1 or train_samples < 1:
        raise ValueError("ways and samples must be positive")
    if name == "sine":
        return sine_taskset(seed, train_samples, num_tasks)
    if name == "particles2d":
        return particles2d_taskset(seed)
    builder = blobs_taskset if name == "blobs" else glyphs_taskset
    return builder(seed, train_ways, train_samples, test_ways, test_samples, num_tasks)

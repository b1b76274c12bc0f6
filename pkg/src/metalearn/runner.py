"""Deterministic experiment runner over the registered benchmarks."""
from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .algorithms import GbmlLearner, HypergradState, MamlLearner, hypergrad_step, meta_gradients
from .autodiff import Tensor, cross_entropy, mse_loss, mul, no_grad, sum as tsum
from .benchmarks import SAMPLES_PER_CLASS, CLASS_SPLITS, get_tasksets, list_tasksets, taskset_kind
from .data import hash64, split_support_query
from .envs import Particles2D, Trajectory
from .nn import MLP

ALGORITHMS = ("anil", "fomaml", "hypergrad", "maml", "metacurvature", "metakfo", "metasgd")
EVAL_TASKS = 100
HYPERGRAD_BETA = 1e-4
POLICY_STD = 0.05
DISCOUNT = 0.99
RESULT_FORMAT = "metalearn.run/1"


class ConfigError(ValueError):
    """An experiment configuration field is invalid."""


@dataclass
class ExperimentConfig:
    benchmark: str = "sine"
    algorithm: str = "maml"
    ways: int = 5
    shots: int = 5
    query_shots: int = 10
    adapt_steps: int = 1
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    meta_iterations: int = 100
    task_batch_size: int = 4
    seed: int = 42
    output: str | None = None

    def validate(self) -> "ExperimentConfig":
        if self.benchmark not in list_tasksets():
            raise ConfigError(f"benchmark {self.benchmark!r} unknown; valid: {', '.join(list_tasksets())}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm {self.algorithm!r} unknown; valid: {', '.join(ALGORITHMS)}")
        for name in ("ways", "shots", "query_shots", "adapt_steps", "task_batch_size"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {getattr(self, name)}")
        if self.meta_iterations < 0:
            raise ConfigError(f"meta_iterations must be >= 0, got {self.meta_iterations}")
        for name in ("inner_lr", "outer_lr"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a finite number > 0, got {value}")
        if taskset_kind(self.benchmark) == "classification":
            if self.ways > min(CLASS_SPLITS):
                raise ConfigError(f"ways must be in [1, {min(CLASS_SPLITS)}] for {self.benchmark}, got {self.ways}")
            if self.shots + self.query_shots > SAMPLES_PER_CLASS:
                raise ConfigError(f"shots + query_shots must be <= {SAMPLES_PER_CLASS}, "
                                  f"got {self.shots + self.query_shots}")
        return self


@dataclass
class RunResult:
    config: dict
    records: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    version: str = __version__

    def to_document(self) -> dict:
        """The persisted form; wall-clock time and output path are left out so reruns are byte-identical."""
        return {"format": RESULT_FORMAT, "version": self.version, "config": self.config,
                "records": self.records, "summary": self.summary}


def _format(obj, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return "null"
        text = format(obj, ".17g")
        return text if any(c in text for c in ".eEn") else text + ".0"
    if isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_format(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if all(not isinstance(v, (dict, list, tuple)) for v in obj):
            return "[" + ", ".join(_format(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + _format(v, indent + 1) for v in obj) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_result(result: RunResult) -> str:
    """JSON text with every float written to 17 significant digits."""
    return _format(result.to_document()) + "\n"


def write_result(result: RunResult, path) -> None:
    Path(path).write_text(dumps_result(result))


# -- models and learners --------------------------------------------------------

def build_model(config: ExperimentConfig):
    rng = np.random.default_rng(hash64(config.seed, 7))
    if config.benchmark == "sine":
        return MLP([1, 40, 40, 1], "relu", rng)
    if config.benchmark == "blobs":
        return MLP([16, 64, 64, config.ways], "relu", rng)
    if config.benchmark == "glyphs":
        return MLP([64, 64, 64, config.ways], "relu", rng)
    return MLP([2, 32, 32, 2], "tanh", rng)


def build_learner(config: ExperimentConfig, model):
    a = config.algorithm
    steps = config.adapt_steps
    if a in ("maml", "hypergrad"):
        return MamlLearner(model, config.inner_lr, adapt_steps=steps)
    if a == "fomaml":
        return MamlLearner(model, config.inner_lr, first_order=True, adapt_steps=steps)
    if a == "anil":
        return MamlLearner(model, config.inner_lr, adapt_steps=steps, head_names=model.head_names)
    if a == "metasgd":
        return GbmlLearner(model, "scale", lr=1.0, adapt_steps=steps, transform_init=config.inner_lr)
    if a == "metacurvature":
        return GbmlLearner(model, "metacurvature", lr=config.inner_lr, adapt_steps=steps)
    return GbmlLearner(model, "kronecker", lr=config.inner_lr, adapt_transform=True, adapt_steps=steps)


# -- supervised tasks ----------------------------------------------------------

def _supervised_task(data, config: ExperimentConfig, classification: bool):
    X, y = data
    if classification:
        return split_support_query(X, y, config.shots)
    k = config.shots
    return (X[:k], y[:k]), (X[k:], y[k:])


def _loss_fn(classification: bool):
    return cross_entropy if classification else mse_loss


def _metric(pred: Tensor, target, classification: bool) -> float:
    if classification:
        return float(np.mean(np.argmax(pred.data, axis=1) == np.asarray(target)))
    return float(np.mean((pred.data - np.asarray(target)) ** 2))


def _supervised_task_loss(task, config, classification, sink: list, slot: int):
    (xs, ys), (xq, yq) = task
    xs, xq = Tensor(xs), Tensor(xq)
    loss_fn = _loss_fn(classification)

    def query_loss(learner):
        clone = learner.clone()
        for _ in range(config.adapt_steps):
            clone.adapt(loss_fn(clone(xs), ys))
        out = clone(xq)
        sink[slot] = _metric(out, yq, classification)
        return loss_fn(out, yq)

    return query_loss


def _evaluate_supervised(learner, task, config, classification) -> tuple[float, float]:
    """Pre- and post-adaptation query metric on one task."""
    (xs, ys), (xq, yq) = task
    loss_fn = _loss_fn(classification)
    clone = learner.clone()
    with no_grad():
        pre = _metric(clone(Tensor(xq)), yq, classification)
    for _ in range(config.adapt_steps):
        clone.adapt(loss_fn(clone(Tensor(xs)), ys), first_order=True)
    with no_grad():
        post = _metric(clone(Tensor(xq)), yq, classification)
    return pre, post


# -- reinforcement learning tasks ---------------------------------------------

def _rollout(policy, env: Particles2D, task, episodes: int, rng) -> list[Trajectory]:
    env.set_task(task)
    trajectories = []
    for _ in range(episodes):
        obs = env.reset()
        rows = ([], [], [], [])
        for _ in range(Particles2D.horizon):
            with no_grad():
                mean = policy(Tensor(obs[None, :])).data[0]
            action = mean + POLICY_STD * rng.standard_normal(2)
            nxt, reward, done, _ = env.step(action)
            for col, v in zip(rows, (obs, action, reward, done)):
                col.append(v)
            obs = nxt
            if done:
                break
        trajectories.append(Trajectory(np.asarray(rows[0]), np.asarray(rows[1]),
                                       np.asarray(rows[2], dtype=np.float64), np.asarray(rows[3], dtype=bool)))
    return trajectories


def _policy_loss(policy, trajectories: list[Trajectory]) -> Tensor:
    """REINFORCE surrogate with normalized discounted reward-to-go advantages."""
    obs = np.concatenate([t.observations for t in trajectories])
    actions = np.concatenate([t.actions for t in trajectories])
    returns = []
    for t in trajectories:
        acc, rtg = 0.0, np.empty(len(t))
        for j in range(len(t) - 1, -1, -1):
            acc = t.rewards[j] + DISCOUNT * acc
            rtg[j] = acc
        returns.append(rtg)
    adv = np.concatenate(returns)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    diff = policy(Tensor(obs)) - Tensor(actions)
    log_prob = mul(tsum(diff * diff, axis=1), -0.5 / POLICY_STD ** 2)
    return -(log_prob * Tensor(adv)).mean()


def _rl_task_loss(env_args, task, config, seed: int, sink: list, slot: int):
    def query_loss(learner):
        env = Particles2D(*env_args)
        rng = np.random.default_rng(seed)
        clone = learner.clone()
        for _ in range(config.adapt_steps):
            clone.adapt(_policy_loss(clone, _rollout(clone, env, task, config.shots, rng)))
        query = _rollout(clone, env, task, config.query_shots, rng)
        sink[slot] = float(np.mean([t.total_reward for t in query]))
        return _policy_loss(clone, query)

    return query_loss


def _evaluate_rl(learner, env, task, config, rng) -> tuple[float, float]:
    clone = learner.clone()
    support = _rollout(clone, env, task, config.shots, rng)
    pre = float(np.mean([t.total_reward for t in support]))
    for j in range(config.adapt_steps):
        episodes = support if j == 0 else _rollout(clone, env, task, config.shots, rng)
        clone.adapt(_policy_loss(clone, episodes), first_order=True)
    query = _rollout(clone, env, task, config.query_shots, rng)
    post = float(np.mean([t.total_reward for t in query]))
    return pre, post


# -- driver -----------------------------------------------------------------------

def _summary(pre: list, post: list, kind: str) -> dict:
    metric = {"classification": "accuracy", "regression": "mse", "rl": "return"}[kind]
    return {"metric": metric, "eval_tasks": len(post),
            "post_adaptation_mean": float(np.mean(post)), "post_adaptation_std": float(np.std(post)),
            "pre_adaptation_mean": float(np.mean(pre)), "pre_adaptation_std": float(np.std(pre))}


def run_experiment(config: ExperimentConfig, eval_tasks: int = EVAL_TASKS) -> RunResult:
    """Meta-train the configured learner, evaluate on held-out test tasks, optionally persist."""
    config.validate()
    if eval_tasks < 100:
        raise ConfigError("evaluation needs at least 100 held-out tasks")
    if config.output and not Path(config.output).resolve().parent.is_dir():
        raise OSError(f"output directory {Path(config.output).parent} does not exist")
    start = time.perf_counter()
    kind = taskset_kind(config.benchmark)
    classification = kind == "classification"
    samples = config.shots + config.query_shots
    bundle = get_tasksets(config.benchmark, config.ways, samples, seed=config.seed)
    model = build_model(config)
    learner = build_learner(config, model)
    meta_params = learner.parameters()
    hyper = HypergradState(config.outer_lr, HYPERGRAD_BETA) if config.algorithm == "hypergrad" else None
    echo = {k: v for k, v in dataclasses.asdict(config).items() if k != "output"}
    result = RunResult(config=echo)

    for it in range(config.meta_iterations):
        metrics = [0.0] * config.task_batch_size
        if kind == "rl":
            env = bundle.train
            env_args = (env.seed, tuple(env.goal_low), tuple(env.goal_high))
            batch = [_rl_task_loss(env_args, t, config, hash64(config.seed, 11, it, j), metrics, j)
                     for j, t in enumerate(env.sample_tasks(config.task_batch_size))]
        else:
            batch = [_supervised_task_loss(_supervised_task(bundle.train.sample(), config, classification),
                                           config, classification, metrics, j)
                     for j in range(config.task_batch_size)]
        meta_loss, grads = meta_gradients(learner, batch)
        if hyper is not None:
            hypergrad_step(hyper, meta_params, grads)
        else:
            for p, g in zip(meta_params, grads):
                p.data = p.data - config.outer_lr * g
        result.records.append({"iteration": it, "meta_loss": meta_loss,
                               "post_adaptation_metric": float(np.mean(metrics))})

    pre, post = [], []
    if kind == "rl":
        env = bundle.test
        for j, task in enumerate(env.sample_tasks(eval_tasks)):
            a, b = _evaluate_rl(learner, env, task, config, np.random.default_rng(hash64(config.seed, 13, j)))
            pre.append(a)
            post.append(b)
    else:
        for i in range(eval_tasks):
            task = _supervised_task(bundle.test.get(i), config, classification)
            a, b = _evaluate_supervised(learner, task, config, classification)
            pre.append(a)
            post.append(b)
    result.summary = _summary(pre, post, kind)
    result.wall_clock_seconds = time.perf_counter() - start
    if config.output:
        write_result(result, config.output)
    return result

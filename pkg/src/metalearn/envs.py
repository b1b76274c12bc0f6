"""Task-parameterized environments and a vectorized wrapper that steps copies in parallel."""
from __future__ import annotations

import multiprocessing as mp
import queue
import threading
import traceback
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import hash64


class EnvError(RuntimeError):
    """Protocol misuse, e.g. stepping a finished episode."""


class WorkerError(RuntimeError):
    """An environment inside a vectorized worker raised."""

    def __init__(self, worker: int, message: str):
        super().__init__(f"worker {worker}: {message}")
        self.worker = worker


class MetaEnv:
    """Gym-style environment with a task distribution.

    Subclasses implement ``sample_tasks``, ``set_task``, ``reset`` and ``step``.
    """

    def sample_tasks(self, n: int) -> list:
        raise NotImplementedError

    def set_task(self, task) -> None:
        raise NotImplementedError

    def get_task(self):
        raise NotImplementedError

    def reset(self) -> np.ndarray:
        raise NotImplementedError

    def step(self, action):
        raise NotImplementedError


@dataclass(frozen=True)
class Particles2DTask:
    goal: tuple[float, float]


class Particles2D(MetaEnv):
    """Point mass in the plane that must reach a goal.

    Position starts at the origin, actions are clipped to [-0.1, 0.1] per
    coordinate, the reward is minus the distance to the goal, and the episode
    ends within 0.01 of the goal or after 100 steps.
    """

    max_action = 0.1
    goal_radius = 0.01
    horizon = 100

    def __init__(self, seed: int = 0, goal_low=(-1.0, -1.0), goal_high=(1.0, 1.0)):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.goal_low = np.asarray(goal_low, dtype=np.float64)
        self.goal_high = np.asarray(goal_high, dtype=np.float64)
        self._task = None
        self._pos = None
        self._t = 0
        self._done = False

    def sample_tasks(self, n: int) -> list[Particles2DTask]:
        if n < 1:
            raise ValueError(f"need n >= 1 tasks, got {n}")
        goals = self.rng.uniform(self.goal_low, self.goal_high, size=(n, 2))
        return [Particles2DTask((float(g[0]), float(g[1]))) for g in goals]

    def set_task(self, task: Particles2DTask) -> None:
        self._task = task

    def get_task(self):
        return self._task

    def reset(self) -> np.ndarray:
        if self._task is None:
            raise EnvError("set_task must be called before reset")
        self._pos = np.zeros(2)
        self._t = 0
        self._done = False
        return self._pos.copy()

    def step(self, action):
        if self._pos is None:
            raise EnvError("reset must be called before step")
        if self._done:
            raise EnvError("episode finished; call reset")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -self.max_action, self.max_action)
        self._pos = self._pos + a
        self._t += 1
        dist = float(np.linalg.norm(self._pos - np.asarray(self._task.goal)))
        self._done = dist < self.goal_radius or self._t >= self.horizon
        return self._pos.copy(), -dist, self._done, {"distance": dist, "t": self._t}


def particles2d(seed: int = 0, **kwargs) -> Particles2D:
    return Particles2D(seed, **kwargs)


# -- vectorized environments --------------------------------------------------

class _AutoReset:
    """Per-worker wrapper: an env that finished auto-resets on its next step."""

    def __init__(self, env):
        self.env = env
        self.needs_reset = False

    def handle(self, cmd, data):
        if cmd == "step":
            reset = self.needs_reset
            if reset:
                self.env.reset()
            obs, reward, done, info = self.env.step(data)
            info = dict(info)
            info["auto_reset"] = reset
            self.needs_reset = bool(done)
            return obs, reward, done, info
        if cmd == "reset":
            self.needs_reset = False
            return self.env.reset()
        if cmd == "set_task":
            return self.env.set_task(data)
        if cmd == "get_task":
            return self.env.get_task()
        if cmd == "sample_tasks":
            return self.env.sample_tasks(data)
        if cmd == "call":
            name, args = data
            return getattr(self.env, name)(*args)
        raise ValueError(f"unknown command {cmd!r}")


def _serve(recv, send, make_env, seed):
    try:
        worker = _AutoReset(make_env(seed))
    except Exception:
        send(("error", traceback.format_exc()))
        return
    send(("ok", None))
    while True:
        cmd, data = recv()
        if cmd == "close":
            break
        try:
            send(("ok", worker.handle(cmd, data)))
        except Exception as exc:
            send(("error", f"{type(exc).__name__}: {exc}"))


def _process_main(conn, make_env, seed):
    try:
        _serve(conn.recv, conn.send, make_env, seed)
    except (EOFError, KeyboardInterrupt):
        pass
    finally:
        conn.close()


class _ThreadWorker:
    def __init__(self, make_env, seed):
        self.inbox, self.outbox = queue.Queue(), queue.Queue()
        self.thread = threading.Thread(target=_serve, args=(self.inbox.get, self.outbox.put, make_env, seed),
                                       daemon=True)
        self.thread.start()

    def send(self, msg):
        self.inbox.put(msg)

    def recv(self, timeout):
        try:
            return self.outbox.get(timeout=timeout)
        except queue.Empty:
            return ("error", "timed out waiting for the worker")

    def close(self):
        self.inbox.put(("close", None))
        self.thread.join(timeout=1.0)


class _ProcessWorker:
    def __init__(self, ctx, make_env, seed):
        self.conn, child = ctx.Pipe()
        self.proc = ctx.Process(target=_process_main, args=(child, make_env, seed), daemon=True)
        self.proc.start()
        child.close()

    def send(self, msg):
        try:
            self.conn.send(msg)
        except (BrokenPipeError, OSError):
            pass

    def recv(self, timeout):
        try:
            if self.conn.poll(timeout):
                return self.conn.recv()
        except (EOFError, OSError):
            pass
        if not self.proc.is_alive():
            return ("error", f"worker process exited with code {self.proc.exitcode}")
        return ("error", "timed out waiting for the worker")

    def close(self):
        self.send(("close", None))
        self.proc.join(timeout=1.0)
        if self.proc.is_alive():
            self.proc.terminate()
        self.conn.close()


class _SerialWorker:
    def __init__(self, make_env, seed):
        self.pending = []
        try:
            self.worker = _AutoReset(make_env(seed))
            self.pending.append(("ok", None))
        except Exception:
            self.worker = None
            self.pending.append(("error", traceback.format_exc()))

    def send(self, msg):
        cmd, data = msg
        if cmd == "close":
            return
        try:
            self.pending.append(("ok", self.worker.handle(cmd, data)))
        except Exception as exc:
            self.pending.append(("error", f"{type(exc).__name__}: {exc}"))

    def recv(self, timeout):
        return self.pending.pop(0)

    def close(self):
        pass


class VectorEnv:
    """``n`` copies of an environment, each owned by its own worker.

    ``make_env(seed)`` builds worker ``w``'s environment with seed
    ``hash64(seed, w)``. Commands go to every worker at once and results come
    back in worker order. ``backend`` is ``"thread"``, ``"process"`` or
    ``"serial"`` (in-process, no concurrency).
    """

    def __init__(self, make_env: Callable, n: int, seed: int = 0, backend: str = "thread",
                 timeout: float = 60.0):
        if n < 1:
            raise ValueError(f"need at least one worker, got {n}")
        if backend not in ("thread", "process", "serial"):
            raise ValueError(f"unknown backend {backend!r}")
        self.n = n
        self.backend = backend
        self.timeout = timeout
        self.seeds = [hash64(seed, w) for w in range(n)]
        if backend == "process":
            ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
            self._workers = [_ProcessWorker(ctx, make_env, s) for s in self.seeds]
        elif backend == "thread":
            self._workers = [_ThreadWorker(make_env, s) for s in self.seeds]
        else:
            self._workers = [_SerialWorker(make_env, s) for s in self.seeds]
        self._closed = False
        try:
            self._gather()
        except WorkerError:
            self.close()
            raise

    def __len__(self):
        return self.n

    def _gather(self) -> list:
        replies = [w.recv(self.timeout) for w in self._workers]
        for i, (status, payload) in enumerate(replies):
            if status != "ok":
                raise WorkerError(i, payload)
        return [payload for _, payload in replies]

    def _broadcast(self, cmd, payloads) -> list:
        if self._closed:
            raise EnvError("vector env is closed")
        for w, data in zip(self._workers, payloads):
            w.send((cmd, data))
        return self._gather()

    def sample_tasks(self, n: int) -> list:
        """Tasks drawn from worker 0's task distribution."""
        self._workers[0].send(("sample_tasks", n))
        status, payload = self._workers[0].recv(self.timeout)
        if status != "ok":
            raise WorkerError(0, payload)
        return payload

    def set_task(self, task) -> None:
        """Give every worker the same task."""
        self._broadcast("set_task", [task] * self.n)

    def set_tasks(self, tasks: Sequence) -> None:
        if len(tasks) != self.n:
            raise ValueError(f"expected {self.n} tasks, got {len(tasks)}")
        self._broadcast("set_task", list(tasks))

    def get_tasks(self) -> list:
        return self._broadcast("get_task", [None] * self.n)

    def reset_all(self) -> np.ndarray:
        return np.stack(self._broadcast("reset", [None] * self.n))

    reset = reset_all

    def step_all(self, actions: Sequence):
        actions = list(actions)
        if len(actions) != self.n:
            raise ValueError(f"step_all needs {self.n} actions, got {len(actions)}")
        results = self._broadcast("step", actions)
        obs, rewards, dones, infos = zip(*results)
        return np.stack(obs), np.asarray(rewards, dtype=np.float64), np.asarray(dones, dtype=bool), list(infos)

    step = step_all

    def call(self, name: str, *args) -> list:
        return self._broadcast("call", [(name, args)] * self.n)

    def close(self):
        if not self._closed:
            self._closed = True
            for w in self._workers:
                w.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def vector_env(make_env: Callable, n: int, seed: int = 0, backend: str = "thread") -> VectorEnv:
    return VectorEnv(make_env, n, seed, backend)


@dataclass
class Trajectory:
    observations: np.ndarray  # observation each action was taken from
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


def collect_episodes(venv: VectorEnv, policy: Callable, horizon: int) -> list[Trajectory]:
    """Roll out one episode per worker, truncated at ``done`` or ``horizon`` steps."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    obs = venv.reset_all()
    n = len(venv)
    records = [([], [], [], []) for _ in range(n)]
    active = np.ones(n, dtype=bool)
    for _ in range(horizon):
        actions = [np.asarray(policy(o), dtype=np.float64) for o in obs]
        next_obs, rewards, dones, _ = venv.step_all(actions)
        for w in np.flatnonzero(active):
            rec = records[w]
            rec[0].append(obs[w])
            rec[1].append(actions[w])
            rec[2].append(rewards[w])
            rec[3].append(dones[w])
        active &= ~dones
        obs = next_obs
        if not active.any():
            break
    return [Trajectory(np.asarray(o), np.asarray(a), np.asarray(r, dtype=np.float64), np.asarray(d, dtype=bool))
            for o, a, r, d in records]

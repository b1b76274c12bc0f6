"""Fast-adaptation wrappers (MAML, ANIL, GBML variants) and meta-descent optimizers."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, ShapeError, grad, mse_loss, mul
from .nn import Module, clone_module, update_module
from .transforms import GradientTransform, ParameterUpdate


def _check_scalar(loss):
    if not isinstance(loss, Tensor) or loss.shape != ():
        raise ShapeError(f"adaptation loss must be a scalar tensor, got {getattr(loss, 'shape', type(loss))}")


class MamlLearner(Module):
    """Wraps a module with MAML-style fast adaptation.

    ``clone()`` returns a learner around a differentiable copy of the module;
    ``adapt(loss)`` on that copy takes one step ``p <- p - lr * grad``. The
    wrapped module itself is never modified by adaptation.
    """

    def __init__(self, module: Module, lr: float, first_order: bool = False, adapt_steps: int = 1,
                 head_names=None):
        super().__init__()
        if lr <= 0:
            raise ValueError(f"inner learning rate must be positive, got {lr}")
        if adapt_steps < 0:
            raise ValueError(f"adapt_steps must be >= 0, got {adapt_steps}")
        self.module = module
        self.lr = float(lr)
        self.first_order = first_order
        self.adapt_steps = adapt_steps
        self.head_names = None if head_names is None else _check_heads(module, head_names)

    def forward(self, *inputs):
        return self.module(*inputs)

    def clone(self) -> "MamlLearner":
        new = MamlLearner.__new__(MamlLearner)
        Module.__init__(new)
        new.module = clone_module(self.module)
        for k in ("lr", "first_order", "adapt_steps", "head_names"):
            object.__setattr__(new, k, getattr(self, k))
        return new

    def adapt(self, loss: Tensor, first_order: bool | None = None, head_names=None) -> None:
        _check_scalar(loss)
        first_order = self.first_order if first_order is None else first_order
        heads = head_names if head_names is not None else self.head_names
        named = list(self.module.named_parameters())
        if heads is not None:
            heads = _check_heads(self.module, heads)
            named = [(n, p) for n, p in named if n in heads]
        grads = grad(loss, [p for _, p in named], create_graph=not first_order)
        if heads is None:
            update_module(self.module, [mul(g, -self.lr) for g in grads])
        else:
            self.module.set_parameters({n: p + mul(g, -self.lr) for (n, p), g in zip(named, grads)})


def _check_heads(module: Module, head_names) -> frozenset:
    heads = frozenset(head_names)
    if not heads:
        raise ValueError("head_names must be non-empty")
    known = {n for n, _ in module.named_parameters()}
    unknown = sorted(heads - known)
    if unknown:
        raise KeyError(f"unknown head parameters {unknown}; module has {sorted(known)}")
    return heads


def anil_adapt(learner: MamlLearner, loss: Tensor, head_names) -> None:
    """Adapt only the ``head_names`` parameters of a cloned learner."""
    learner.adapt(loss, head_names=head_names)


class GbmlLearner(Module):
    """Gradient-based meta-learner whose inner-loop gradients pass through transforms.

    The update is ``p <- p - lr * T(grad)``. Meta-SGD uses ``Scale`` transforms
    with ``lr=1``; Meta-Curvature uses ``MetaCurvature``; Meta-KFO uses
    ``KroneckerLinear`` with ``adapt_transform=True``. With that flag, every
    adaptation step after the first begins with a plain gradient step on the
    clone's transform parameters, which the loss reaches through the previous
    model update.
    """

    def __init__(self, module: Module, transform="identity", lr: float = 1.0, adapt_transform: bool = False,
                 first_order: bool = False, adapt_steps: int = 1, transform_init: float = 1.0):
        super().__init__()
        if lr <= 0:
            raise ValueError(f"inner learning rate must be positive, got {lr}")
        if adapt_steps < 0:
            raise ValueError(f"adapt_steps must be >= 0, got {adapt_steps}")
        self.module = module
        if isinstance(transform, ParameterUpdate):
            self.transforms = transform
        else:
            self.transforms = ParameterUpdate(module, transform, transform_init)
        if len(self.transforms) != len(module.parameters()):
            raise ValueError("transforms must pair 1:1 with module parameters")
        self.lr = float(lr)
        self.adapt_transform = adapt_transform
        self.first_order = first_order
        self.adapt_steps = adapt_steps
        self._transform_used = False

    def forward(self, *inputs):
        return self.module(*inputs)

    def clone(self) -> "GbmlLearner":
        new = GbmlLearner.__new__(GbmlLearner)
        Module.__init__(new)
        new.module = clone_module(self.module)
        new.transforms = clone_module(self.transforms) if self.adapt_transform else self.transforms
        for k in ("lr", "adapt_transform", "first_order", "adapt_steps"):
            object.__setattr__(new, k, getattr(self, k))
        object.__setattr__(new, "_transform_used", False)
        return new

    def adapt(self, loss: Tensor, first_order: bool | None = None) -> None:
        _check_scalar(loss)
        first_order = self.first_order if first_order is None else first_order
        params = self.module.parameters()
        if len(self.transforms.transforms) != len(params):
            raise ValueError(f"{len(self.transforms.transforms)} transforms for {len(params)} parameters")
        if self.adapt_transform and self._transform_used:
            # the loss reaches the transforms only through the previous model step
            t_grads = grad(loss, self.transforms.parameters(), create_graph=not first_order)
            update_module(self.transforms, [mul(g, -self.lr) for g in t_grads])
        g_model = grad(loss, params, create_graph=not first_order)
        directions = [t.apply(g) for t, g in zip(self.transforms.transforms, g_model)]
        update_module(self.module, [mul(d, -self.lr) for d in directions])
        object.__setattr__(self, "_transform_used", True)


def _task_loss(learner, task, loss_fn) -> Tensor:
    if callable(task):
        return task(learner)
    (xs, ys), (xq, yq) = task
    clone = learner.clone()
    for _ in range(learner.adapt_steps):
        clone.adapt(loss_fn(clone(xs), ys))
    return loss_fn(clone(xq), yq)


def _workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get("METALEARN_WORKERS", "1"))
    return max(1, workers)


def meta_gradients(learner: Module, task_batch: Sequence, loss_fn: Callable = mse_loss,
                   workers: int | None = None) -> tuple[float, list[np.ndarray]]:
    """Mean post-adaptation query loss over ``task_batch`` and its gradient.

    Each task is a ``((x_support, y_support), (x_query, y_query))`` pair, or a
    callable mapping the learner to its query loss. Per-task work may run on
    several threads; the reduction always follows task order.
    """
    tasks = list(task_batch)
    if not tasks:
        raise ValueError("task_batch must be non-empty")
    meta_params = learner.parameters()

    def one(task):
        loss = _task_loss(learner, task, loss_fn)
        if loss.node is None:
            return loss.item(), [np.zeros(p.shape) for p in meta_params]
        return loss.item(), [g.data for g in grad(loss, meta_params)]

    n = _workers(workers)
    if n > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=min(n, len(tasks))) as pool:
            results = list(pool.map(one, tasks))
    else:
        results = [one(t) for t in tasks]
    total = [np.zeros(p.shape) for p in meta_params]
    for _, gs in results:
        for acc, g in zip(total, gs):
            acc += g
    count = len(tasks)
    return float(np.mean([r[0] for r in results])), [g / count for g in total]


def meta_train_step(learner: Module, task_batch: Sequence, outer_lr: float, loss_fn: Callable = mse_loss,
                    workers: int | None = None) -> float:
    """One outer gradient-descent step on all meta-parameters; returns the pre-step mean query loss."""
    loss, grads = meta_gradients(learner, task_batch, loss_fn, workers)
    for p, g in zip(learner.parameters(), grads):
        p.data = p.data - outer_lr * g
    return loss


# -- meta-descent ---------------------------------------------------------------

@dataclass
class HypergradState:
    lr: float
    beta: float
    lr_min: float = 1e-8
    prev_grads: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr <= 0 or self.beta < 0:
            raise ValueError("hypergradient descent needs lr > 0 and beta >= 0")


def hypergrad_step(state: HypergradState, params: Sequence[Tensor], grads: Sequence) -> None:
    """Adapt the global learning rate from consecutive gradients, then descend.

    ``lr <- max(lr + beta * <g_t, g_{t-1}>, lr_min)`` followed by ``p <- p - lr * g_t``.
    """
    params = list(params)
    arrays = [np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64) for g in grads]
    if len(arrays) != len(params):
        raise ValueError(f"{len(arrays)} gradients for {len(params)} parameters")
    for p, g in zip(params, arrays):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if state.prev_grads is not None:
        dot = sum(float(np.vdot(g, h)) for g, h in zip(arrays, state.prev_grads))
        state.lr = max(state.lr + state.beta * dot, state.lr_min)
    for p, g in zip(params, arrays):
        p.data = p.data - state.lr * g
    state.prev_grads = [g.copy() for g in arrays]


class HypergradientDescent:
    """Gradient descent whose step size is tuned online by hypergradient descent."""

    def __init__(self, params, lr: float = 0.01, beta: float = 1e-4, lr_min: float = 1e-8):
        self.params = list(params)
        self.state = HypergradState(lr, beta, lr_min)

    @property
    def lr(self) -> float:
        return self.state.lr

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros(p.shape) for p in self.params]
        hypergrad_step(self.state, self.params, grads)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def learnable_optimizer_step(transforms: Sequence[GradientTransform], params: Sequence[Tensor],
                             grads: Sequence[Tensor], lr: float) -> list[Tensor]:
    """``p - lr * T(g)`` per parameter, keeping ``T``'s parameters on the graph."""
    params, grads = list(params), list(grads)
    if not (len(transforms) == len(params) == len(grads)):
        raise ValueError("transforms, params and grads must have equal length")
    out = []
    for t, p, g in zip(transforms, params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        out.append(p + mul(t.apply(g), -lr))
    return out


class LearnableOptimizer(Module):
    """An optimizer whose update rule is a bank of meta-learnable transforms.

    ``step`` updates a module (usually a clone) differentiably, so a later
    meta-loss can be backpropagated into the transform parameters.
    """

    def __init__(self, params, transform="scale", lr: float = 0.1, init: float = 1.0):
        super().__init__()
        self.update = ParameterUpdate(params, transform, init)
        self.lr = float(lr)

    def step(self, module: Module, loss: Tensor, create_graph: bool = True) -> None:
        names, params = zip(*module.named_parameters())
        grads = grad(loss, params, create_graph=create_graph)
        new = learnable_optimizer_step(self.update.transforms, params, grads, self.lr)
        module.set_parameters(dict(zip(names, new)))

"""Learnable gradient transforms and the parameterized update built from them."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .autodiff import Tensor, ShapeError, add, grad, matmul, mul, reshape
from .nn import Module

TRANSFORM_KINDS = ("identity", "scale", "kronecker", "metacurvature")


def _as_matrix_shape(shape: tuple) -> tuple[int, int]:
    # vectors are m x 1, scalars 1 x 1
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return shape[0], 1
    if len(shape) == 2:
        return shape
    raise ShapeError(f"matrix-structured transforms support rank <= 2, got shape {shape}")


class GradientTransform(Module):
    """Shape-preserving learnable map from a gradient to an update direction."""

    def apply(self, g: Tensor) -> Tensor:
        raise NotImplementedError

    def forward(self, g):
        return self.apply(g)


class Identity(GradientTransform):
    def apply(self, g):
        return g


class Scale(GradientTransform):
    """Elementwise scaling ``s * g`` with one learnable factor per gradient entry."""

    def __init__(self, shape, init: float = 1.0):
        super().__init__()
        self.scale = Tensor(np.full(tuple(shape), float(init)), requires_grad=True)

    def apply(self, g):
        return mul(self.scale, g)


def kronecker_apply(G: Tensor, L: Tensor, R: Tensor, B: Tensor) -> Tensor:
    """``L @ G @ R + B`` for an m x n gradient ``G``."""
    m, n = G.shape
    if L.shape != (m, m) or R.shape != (n, n) or B.shape != (m, n):
        raise ShapeError(f"kronecker_apply: G {G.shape} needs L {(m, m)}, R {(n, n)}, B {(m, n)}; "
                         f"got L {L.shape}, R {R.shape}, B {B.shape}")
    return add(matmul(matmul(L, G), R), B)


class KroneckerLinear(GradientTransform):
    """Kronecker-factored linear map; starts as the identity."""

    def __init__(self, shape):
        super().__init__()
        self.target_shape = tuple(shape)
        m, n = _as_matrix_shape(self.target_shape)
        self.left = Tensor(np.eye(m), requires_grad=True)
        self.right = Tensor(np.eye(n), requires_grad=True)
        self.bias = Tensor(np.zeros((m, n)), requires_grad=True)

    def apply(self, g):
        if g.shape != self.target_shape:
            raise ShapeError(f"KroneckerLinear built for {self.target_shape}, got {g.shape}")
        G = reshape(g, self.bias.shape) if g.ndim != 2 else g
        out = kronecker_apply(G, self.left, self.right, self.bias)
        return reshape(out, self.target_shape) if g.ndim != 2 else out


class MetaCurvature(GradientTransform):
    """``M_out @ G @ M_in`` for matrices, elementwise ``m * g`` for vectors."""

    def __init__(self, shape):
        super().__init__()
        self.target_shape = tuple(shape)
        if len(self.target_shape) == 1:
            self.elementwise = Tensor(np.ones(self.target_shape), requires_grad=True)
        else:
            m, n = _as_matrix_shape(self.target_shape)
            self.out_factor = Tensor(np.eye(m), requires_grad=True)
            self.in_factor = Tensor(np.eye(n), requires_grad=True)

    def apply(self, g):
        if g.shape != self.target_shape:
            raise ShapeError(f"MetaCurvature built for {self.target_shape}, got {g.shape}")
        if len(self.target_shape) == 1:
            return mul(self.elementwise, g)
        G = reshape(g, (1, 1)) if g.ndim == 0 else g
        out = matmul(matmul(self.out_factor, G), self.in_factor)
        return reshape(out, ()) if g.ndim == 0 else out


def make_transforms(params, kind="identity", init: float = 1.0) -> list[GradientTransform]:
    """One freshly initialized transform per parameter, never shared.

    ``params`` is a module or a list of tensors. ``kind`` is one of
    ``TRANSFORM_KINDS`` or a callable taking a parameter shape.
    """
    if isinstance(params, Module):
        params = params.parameters()
    shapes = [tuple(p.shape) for p in params]
    if callable(kind):
        return [kind(s) for s in shapes]
    if kind == "identity":
        return [Identity() for _ in shapes]
    if kind == "scale":
        return [Scale(s, init) for s in shapes]
    if kind == "kronecker":
        return [KroneckerLinear(s) for s in shapes]
    if kind == "metacurvature":
        return [MetaCurvature(s) for s in shapes]
    raise ValueError(f"unknown transform kind {kind!r}; expected one of {TRANSFORM_KINDS}")


def parameter_update(loss: Tensor, params: Sequence[Tensor], transforms: Sequence[GradientTransform],
                     create_graph: bool = False) -> list[Tensor]:
    """Transformed gradients ``T_i(d loss / d p_i)``; does not touch ``params``."""
    params = list(params)
    if len(transforms) != len(params):
        raise ValueError(f"{len(transforms)} transforms for {len(params)} parameters")
    grads = grad(loss, params, create_graph=create_graph)
    out = []
    for t, g in zip(transforms, grads):
        u = t.apply(g)
        assert u.shape == g.shape, f"{type(t).__name__} changed shape {g.shape} -> {u.shape}"
        out.append(u)
    return out


class ParameterUpdate(Module):
    """A bank of per-parameter transforms whose parameters are meta-learnable.

    Called like ``grad``: ``updates = update(loss, clone.parameters(), create_graph=True)``.
    """

    def __init__(self, params, transform="identity", init: float = 1.0):
        super().__init__()
        transforms = transform if isinstance(transform, (list, tuple)) else make_transforms(params, transform, init)
        for i, t in enumerate(transforms):
            self.add_module(str(i), t)

    @property
    def transforms(self) -> list[GradientTransform]:
        return list(self._children.values())

    def __len__(self):
        return len(self._children)

    def forward(self, loss, params, create_graph: bool = False):
        return parameter_update(loss, params, self.transforms, create_graph)

"""Parameter containers, differentiable cloning and in-place differentiable updates."""
from __future__ import annotations

import copy
import json
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .autodiff import Tensor, ShapeError, add, matmul, relu, tanh, transpose

PARAMS_FORMAT = "metalearn.params/1"


class Module:
    """A named tree of parameters with a forward function.

    Tensors assigned as attributes with ``requires_grad`` become parameters;
    assigned modules become children. Enumeration is depth-first in insertion
    order, which is what pairs gradient transforms with parameters.
    """

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_children", OrderedDict())

    def __setattr__(self, name, value):
        params = self.__dict__.get("_params")
        if params is None:
            raise AttributeError("Module.__init__() must run before attributes are assigned")
        if isinstance(value, Tensor) and value.requires_grad:
            self._children.pop(name, None)
            params[name] = value
        elif isinstance(value, Module):
            params.pop(name, None)
            self._children[name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name):
        d = self.__dict__
        if "_params" in d and name in d["_params"]:
            return d["_params"][name]
        if "_children" in d and name in d["_children"]:
            return d["_children"][name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def register_parameter(self, name: str, value: Tensor):
        if not value.requires_grad:
            value.requires_grad = True
        self._params[name] = value

    def add_module(self, name: str, module: "Module"):
        self._children[name] = module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_children(self):
        return self._children.items()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def forward(self, *inputs, **kwargs):
        raise NotImplementedError

    def __call__(self, *inputs, **kwargs):
        return self.forward(*inputs, **kwargs)

    def _slots(self, prefix: str = "") -> Iterator[tuple[str, "Module", str]]:
        for name in self._params:
            yield prefix + name, self, name
        for cname, child in self._children.items():
            yield from child._slots(prefix + cname + ".")

    def set_parameters(self, named: dict):
        """Replace parameters by dotted name without any graph bookkeeping."""
        slots = {full: (owner, key) for full, owner, key in self._slots()}
        for name, value in named.items():
            if name not in slots:
                raise KeyError(f"unknown parameter {name!r}")
            owner, key = slots[name]
            if value.shape != owner._params[key].shape:
                raise ShapeError(f"parameter {name!r}: shape {value.shape} != {owner._params[key].shape}")
            owner._params[key] = value

    def __repr__(self):
        shapes = ", ".join(f"{n}:{tuple(p.shape)}" for n, p in self.named_parameters())
        return f"{type(self).__name__}({shapes})"


def _rng(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


class Linear(Module):
    """``x @ W.T + b`` with ``W`` of shape (out, in)."""

    def __init__(self, in_features: int, out_features: int, random_state=None):
        super().__init__()
        rng = _rng(random_state)
        bound = 1.0 / np.sqrt(in_features)
        self.weight = Tensor(rng.uniform(-bound, bound, (out_features, in_features)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, out_features), requires_grad=True)

    def forward(self, x):
        return add(matmul(x, transpose(self.weight)), self.bias)


class Lambda(Module):
    def __init__(self, fn: Callable):
        super().__init__()
        self.fn = fn

    def forward(self, x):
        return self.fn(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        for i, layer in enumerate(layers):
            self.add_module(str(i), layer)

    def forward(self, x):
        for layer in self._children.values():
            x = layer(x)
        return x

    def __len__(self):
        return len(self._children)

    def __getitem__(self, i):
        return list(self._children.values())[i]


_ACTIVATIONS = {"relu": relu, "tanh": tanh}


class MLP(Sequential):
    """Fully connected network; ``sizes`` lists layer widths from input to output."""

    def __init__(self, sizes: Sequence[int], activation: str = "relu", random_state=None):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        if activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        rng = _rng(random_state)
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layers.append(Linear(a, b, rng))
            if i < len(sizes) - 2:
                layers.append(Lambda(_ACTIVATIONS[activation]))
        super().__init__(*layers)
        object.__setattr__(self, "sizes", tuple(sizes))

    @property
    def head_names(self) -> set[str]:
        last = str(len(self) - 1)
        return {n for n, _ in self.named_parameters() if n.split(".")[0] == last}


def clone_module(module: Module) -> Module:
    """Structural copy whose parameters are graph-recorded copies of the originals.

    Gradients taken through the clone's parameters flow back to the original
    parameters; replacing or updating clone parameters never touches the original.
    """
    new = copy.copy(module)
    object.__setattr__(new, "_params", OrderedDict((n, p.clone()) for n, p in module._params.items()))
    object.__setattr__(new, "_children",
                       OrderedDict((n, clone_module(c)) for n, c in module._children.items()))
    return new


def update_module(module: Module, updates: Sequence[Tensor]) -> None:
    """Replace every parameter ``p`` by the graph-recorded sum ``p + update``.

    Updates carry their own sign: a descent step passes ``-lr * direction``.
    """
    slots = list(module._slots())
    updates = list(updates)
    if len(updates) != len(slots):
        raise ValueError(f"update_module: got {len(updates)} updates for {len(slots)} parameters")
    for (name, owner, key), u in zip(slots, updates):
        p = owner._params[key]
        if u.shape != p.shape:
            raise ShapeError(f"update_module: update for {name!r} has shape {u.shape}, expected {p.shape}")
        owner._params[key] = add(p, u)


# -- parameter export/import ------------------------------------------------

def export_parameters(module: Module) -> list[dict]:
    return [{"name": n, "shape": list(p.shape), "values": p.data.reshape(-1).tolist()}
            for n, p in module.named_parameters()]


def import_parameters(module: Module, records: Sequence[dict]) -> None:
    """Load exported records in place; names, order and shapes must match exactly."""
    current = list(module.named_parameters())
    if [r["name"] for r in records] != [n for n, _ in current]:
        raise ValueError("parameter names or order do not match the module")
    for (name, p), rec in zip(current, records):
        shape = tuple(rec["shape"])
        if shape != p.shape:
            raise ShapeError(f"parameter {name!r}: stored shape {shape} != {p.shape}")
        values = np.asarray(rec["values"], dtype=np.float64)
        if values.size != p.size:
            raise ValueError(f"parameter {name!r}: expected {p.size} values, got {values.size}")
        p.data = values.reshape(shape)


def save_parameters(module: Module, path) -> None:
    doc = {"format": PARAMS_FORMAT, "params": export_parameters(module)}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_parameters(module: Module, path) -> None:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != PARAMS_FORMAT:
        raise ValueError(f"unsupported parameter file format {doc.get('format')!r}")
    import_parameters(module, doc["params"])

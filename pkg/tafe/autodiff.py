"""
Tape-based reverse-mode differentiation over the tensor kernels.

A Graph records every operation in execution order (append-only, so it is
acyclic by construction). Parameters are named leaves; backward() walks the
tape in reverse and accumulates one gradient per parameter. The graph is
rebuilt for every forward pass.
"""
from dataclasses import dataclass
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config.settings import FD_STEP, GRADCHECK_BUDGET, GRADCHECK_TOL
from models.grad_report import GradReport
from tafe import tensor as T
from tafe.errors import ConfigError, ShapeError, UsageError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    op: str
    inputs: Tuple[int, ...]
    value: np.ndarray
    backward: Optional[BackwardFn] = None


class Var:
    """Handle to one node of a Graph."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.index].value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)

    def __repr__(self):
        return f"Var({self.graph.nodes[self.index].op}, shape={self.shape})"


class Graph:

    def __init__(self):
        self.nodes: List[Node] = []
        self.parameters: Dict[str, int] = {}
        self.grads: Dict[str, np.ndarray] = {}

    def _append(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def parameter(self, name: str, value: np.ndarray) -> Var:
        if name in self.parameters:
            raise UsageError(f"parameter {name!r} registered twice")
        var = self._append(Node("param", (), np.asarray(value, dtype=np.float64)))
        self.parameters[name] = var.index
        return var

    def constant(self, value: np.ndarray) -> Var:
        return self._append(Node("const", (), np.asarray(value, dtype=np.float64)))

    def record(self, op: str, inputs: Sequence[Var], value: np.ndarray, backward: BackwardFn) -> Var:
        for var in inputs:
            if var.graph is not self:
                raise UsageError(f"{op}: input belongs to another graph")
        return self._append(Node(op, tuple(v.index for v in inputs), value, backward))

    def bind(self, params: Mapping[str, np.ndarray]) -> Dict[str, Var]:
        return {name: self.parameter(name, value) for name, value in params.items()}

    def zero_grad(self):
        self.grads = {}

    def backward(self, loss: Var) -> Dict[str, np.ndarray]:
        """Accumulate d(loss)/d(parameter) into self.grads and return a copy."""
        if loss.graph is not self:
            raise UsageError("loss belongs to another graph")
        if loss.value.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")

        owners = {index: name for name, index in self.parameters.items()}
        adjoints: Dict[int, np.ndarray] = {loss.index: np.ones_like(loss.value)}
        reached: Dict[str, np.ndarray] = {}

        for index in range(loss.index, -1, -1):
            grad = adjoints.pop(index, None)
            if grad is None:
                continue
            node = self.nodes[index]
            if index in owners:
                reached[owners[index]] = grad
                continue
            if node.backward is None:
                continue
            for source, g in zip(node.inputs, node.backward(grad)):
                if g is None:
                    continue
                if source in adjoints:
                    adjoints[source] = adjoints[source] + g
                else:
                    adjoints[source] = g

        for name, index in self.parameters.items():
            grad = reached.get(name, np.zeros_like(self.nodes[index].value))
            if name in self.grads:
                self.grads[name] = self.grads[name] + grad
            else:
                self.grads[name] = grad
        return dict(self.grads)


class ParamScope:
    """Dotted-name view over bound parameters, e.g. scope.child("afe")["aggregate.weight"]."""

    def __init__(self, params: Mapping[str, Var], prefix: str = ""):
        self.params = params
        self.prefix = prefix

    def _key(self, name: str) -> str:
        return f"{self.prefix}.{name}" if self.prefix else name

    def __getitem__(self, name: str) -> Var:
        key = self._key(name)
        if key not in self.params:
            raise ConfigError(f"missing parameter {key!r}")
        return self.params[key]

    def get(self, name: str) -> Optional[Var]:
        return self.params.get(self._key(name))

    def __contains__(self, name: str) -> bool:
        return self._key(name) in self.params

    def child(self, name: str) -> "ParamScope":
        return ParamScope(self.params, self._key(name))


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Differentiable operations

def add(a: Var, b: Var) -> Var:
    value = T.add(a.value, b.value)
    return a.graph.record("add", (a, b), value, lambda g: (g, g))


def add_broadcast(x: Var, y: Var) -> Var:
    """x + y where y broadcasts against x (biases, positional embeddings)."""
    try:
        value = x.value + y.value
    except ValueError as e:
        raise ShapeError(f"add_broadcast: {x.shape} vs {y.shape}") from e
    if value.shape != x.shape:
        raise ShapeError(f"add_broadcast: {y.shape} must broadcast into {x.shape}")
    y_shape = y.shape
    return x.graph.record("add_broadcast", (x, y), value, lambda g: (g, _unbroadcast(g, y_shape)))


def mul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    value = T.mul(av, bv)
    return a.graph.record("mul", (a, b), value, lambda g: (g * bv, g * av))


def scale(x: Var, factor: float) -> Var:
    return x.graph.record("scale", (x,), x.value * factor, lambda g: (g * factor,))


def total(x: Var) -> Var:
    shape = x.shape
    return x.graph.record("sum", (x,), np.array(x.value.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(x: Var) -> Var:
    mask = x.value > 0
    return x.graph.record("relu", (x,), T.relu(x.value), lambda g: (g * mask,))


def gelu(x: Var) -> Var:
    xv = x.value
    return x.graph.record("gelu", (x,), T.gelu(xv), lambda g: (g * T.gelu_grad(xv),))


def conv2d(x: Var, weight: Var, bias: Optional[Var] = None, padding: str = "same", stride: int = 1) -> Var:
    xv, wv = x.value, weight.value
    value = T.conv2d_raw(xv, wv, None if bias is None else bias.value, padding=padding, stride=stride)

    def backward(g):
        gx, gw, gb = T.conv2d_backward(xv, wv, g, padding=padding, stride=stride)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return x.graph.record("conv2d", inputs, value, backward)


def einsum(spec: str, a: Var, b: Var) -> Var:
    """Two-operand einsum; every index of each operand must survive in the other or the output."""
    lhs, out = spec.split("->")
    sa, sb = lhs.split(",")
    for operand, other in ((sa, sb), (sb, sa)):
        missing = set(operand) - set(other) - set(out)
        if missing:
            raise UsageError(f"einsum {spec!r}: index {sorted(missing)} is reduced inside one operand")
    av, bv = a.value, b.value
    value = np.einsum(spec, av, bv)

    def backward(g):
        return (
            np.einsum(f"{out},{sb}->{sa}", g, bv),
            np.einsum(f"{out},{sa}->{sb}", g, av),
        )

    return a.graph.record("einsum", (a, b), value, backward)


def reshape(x: Var, shape: Tuple[int, ...]) -> Var:
    original = x.shape
    return x.graph.record("reshape", (x,), x.value.reshape(shape), lambda g: (g.reshape(original),))


def transpose(x: Var, axes: Tuple[int, ...]) -> Var:
    inverse = tuple(np.argsort(axes))
    return x.graph.record(
        "transpose", (x,), np.ascontiguousarray(x.value.transpose(axes)),
        lambda g: (np.ascontiguousarray(g.transpose(inverse)),)
    )


def softmax_rows(x: Var) -> Var:
    y = T.softmax_rows(x.value)
    return x.graph.record("softmax", (x,), y, lambda g: (T.softmax_rows_backward(y, g),))


def layernorm(x: Var, gamma: Var, beta: Var, eps: float) -> Var:
    out, x_hat, inv_std = T.layernorm_stats(x.value, gamma.value, beta.value, eps)
    gv = gamma.value
    return x.graph.record(
        "layernorm", (x, gamma, beta), out,
        lambda g: T.layernorm_backward(x_hat, inv_std, gv, g)
    )


def upsample_bilinear(x: Var, out_h: int, out_w: int) -> Var:
    in_h, in_w = x.shape[2], x.shape[3]
    value = T.upsample_bilinear(x.value, out_h, out_w)
    return x.graph.record(
        "upsample", (x,), value,
        lambda g: (T.upsample_bilinear_adjoint(g, in_h, in_w),)
    )


# Finite-difference oracle

def _perturbed(params: Mapping[str, np.ndarray], name: str, flat_index: int, delta: float):
    moved = dict(params)
    value = np.array(params[name], dtype=np.float64, copy=True)
    value.reshape(-1)[flat_index] += delta
    moved[name] = value
    return moved


def finite_diff_at(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    name: str,
    flat_index: int,
    h: float = FD_STEP
) -> float:
    plus = f(_perturbed(params, name, flat_index, h))
    minus = f(_perturbed(params, name, flat_index, -h))
    return (plus - minus) / (2 * h)


def finite_diff_grad(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    h: float = FD_STEP
) -> Dict[str, np.ndarray]:
    """Central differences for every coordinate of every parameter."""
    grads = {}
    for name, value in params.items():
        value = np.asarray(value, dtype=np.float64)
        grad = np.zeros(value.size)
        for i in range(value.size):
            grad[i] = finite_diff_at(f, params, name, i, h)
        grads[name] = grad.reshape(value.shape)
    return grads


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    if g_ad.size == 0:
        return 0.0
    denom = np.maximum(1.0, np.maximum(np.abs(g_ad), np.abs(g_fd)))
    return float(np.max(np.abs(g_ad - g_fd) / denom))


ForwardFn = Callable[[Graph, Dict[str, Var]], Var]


def evaluate_loss(forward: ForwardFn, params: Mapping[str, np.ndarray]) -> float:
    graph = Graph()
    return float(forward(graph, graph.bind(params)).value)


def sample_coordinates(
    params: Mapping[str, np.ndarray],
    coords_per_param: Optional[int],
    seed: int = 0
) -> Dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    chosen = {}
    for name, value in params.items():
        size = int(np.asarray(value).size)
        if coords_per_param is None or size <= coords_per_param:
            chosen[name] = np.arange(size)
        else:
            chosen[name] = np.sort(rng.choice(size, coords_per_param, replace=False))
    return chosen


def grad_check(
    forward: ForwardFn,
    params: Mapping[str, np.ndarray],
    tol: float = GRADCHECK_TOL,
    h: float = FD_STEP,
    name: str = "check",
    coords_per_param: Optional[int] = None,
    budget: int = GRADCHECK_BUDGET,
    seed: int = 0
) -> GradReport:
    """Compare backward() against central differences on (sampled) coordinates."""
    coords = sample_coordinates(params, coords_per_param, seed)
    scalars = sum(len(idx) for idx in coords.values())
    if scalars > budget:
        raise ConfigError(
            f"grad_check {name!r} needs {scalars} finite-difference scalars, budget is {budget}"
        )

    graph = Graph()
    loss = forward(graph, graph.bind(params))
    analytic = graph.backward(loss)

    def f(p):
        return evaluate_loss(forward, p)

    errors = {}
    for pname, indices in coords.items():
        g_ad = analytic[pname].reshape(-1)[indices]
        g_fd = np.array([finite_diff_at(f, params, pname, int(i), h) for i in indices])
        errors[pname] = relative_error(g_ad, g_fd)

    return GradReport(
        name=name,
        h=h,
        tol=tol,
        errors=errors,
        passed=all(err < tol for err in errors.values())
    )

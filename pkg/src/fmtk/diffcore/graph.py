"""Static computation graphs with cached forward values and reverse-mode backward.

A :class:`Graph` is an ordered list of named nodes. Nodes can only consume
the graph input or nodes added before them, so insertion order is a
topological order and ``backward`` simply walks the list in reverse.

Activations use NHWC layout. Conv weights are stored HWIO
``(kh, kw, c_in, c_out)``; dense weights are ``(out, in)`` so that
``y = x @ W.T + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from fmtk.diffcore.tensor import Tensor
from fmtk.errors import ShapeError

INPUT = "input"


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Op:
    """Base class for a node operation.

    ``forward`` caches whatever ``backward`` needs. ``backward`` receives the
    upstream gradient plus a per-input flag saying whether that input's
    gradient is wanted, accumulates parameter gradients, and returns one
    entry per input (``None`` where not wanted).
    """

    kind = "op"
    n_inputs = 1

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def out_shape(self, *shapes):
        return shapes[0]

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, g, needs):
        raise NotImplementedError

    def pattern(self):
        """Bytes identifying the active piece of a piecewise-smooth op, else None."""
        return None


class Conv2d(Op):
    kind = "conv2d"

    def __init__(self, c_in, c_out, rng, kernel=3, dtype=np.float64, init_scale=1.0):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("only odd kernels with 'same' padding are supported")
        self.c_in, self.c_out, self.k = c_in, c_out, kernel
        fan_in = kernel * kernel * c_in
        self.params["w"] = Tensor(init_scale * he_uniform(rng, (kernel, kernel, c_in, c_out), fan_in, dtype))
        self.params["b"] = Tensor(np.zeros(c_out, dtype=dtype))
        self._cols = None
        self._in_shape = None

    def out_shape(self, shape):
        if len(shape) != 3 or shape[2] != self.c_in:
            raise ShapeError(f"expected (H, W, {self.c_in}), got {tuple(shape)}")
        return (shape[0], shape[1], self.c_out)

    def forward(self, x):
        n, h, w, c = x.shape
        k, p = self.k, self.k // 2
        xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
        xp[:, p:p + h, p:p + w] = x
        cols = np.empty((n, h, w, k * k, c), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i * k + j, :] = xp[:, i:i + h, j:j + w, :]
        cols = cols.reshape(n * h * w, k * k * c)
        self._cols, self._in_shape = cols, x.shape
        y = cols @ self.params["w"].data.reshape(k * k * c, self.c_out)
        y += self.params["b"].data
        return y.reshape(n, h, w, self.c_out)

    def backward(self, g, needs):
        n, h, w, c = self._in_shape
        k, p = self.k, self.k // 2
        g2 = g.reshape(n * h * w, self.c_out)
        wmat = self.params["w"].data.reshape(k * k * c, self.c_out)
        self.params["w"].accumulate((self._cols.T @ g2).reshape(self.params["w"].shape))
        self.params["b"].accumulate(g2.sum(axis=0))
        if not needs[0]:
            return (None,)
        dcols = (g2 @ wmat.T).reshape(n, h, w, k * k, c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + h, j:j + w, :] += dcols[:, :, :, i * k + j, :]
        return (dxp[:, p:p + h, p:p + w, :],)


class ReLU(Op):
    kind = "relu"

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, g, needs):
        return (g * self._mask,)

    def pattern(self):
        return np.packbits(self._mask).tobytes()


class MaxPool2x2(Op):
    kind = "maxpool2x2"

    def out_shape(self, shape):
        if len(shape) != 3 or shape[0] % 2 or shape[1] % 2:
            raise ShapeError(f"expected (H, W, C) with even H and W, got {tuple(shape)}")
        return (shape[0] // 2, shape[1] // 2, shape[2])

    def forward(self, x):
        n, h, w, c = x.shape
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
        self._idx = np.argmax(win, axis=-1)
        self._in_shape = x.shape
        return np.take_along_axis(win, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, g, needs):
        n, h, w, c = self._in_shape
        gw = np.zeros((n, h // 2, w // 2, c, 4), dtype=g.dtype)
        np.put_along_axis(gw, self._idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)

    def pattern(self):
        return self._idx.astype(np.uint8).tobytes()


class GlobalAvgPool(Op):
    kind = "global-avg-pool"

    def out_shape(self, shape):
        if len(shape) != 3:
            raise ShapeError(f"expected (H, W, C), got {tuple(shape)}")
        return (shape[2],)

    def forward(self, x):
        self._in_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, g, needs):
        n, h, w, c = self._in_shape
        return (np.broadcast_to(g[:, None, None, :] / (h * w), self._in_shape).copy(),)


class Flatten(Op):
    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g, needs):
        return (g.reshape(self._in_shape),)


class Dense(Op):
    kind = "dense"

    def __init__(self, n_in, n_out, rng, dtype=np.float64, init_scale=1.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.params["w"] = Tensor(init_scale * he_uniform(rng, (n_out, n_in), n_in, dtype))
        self.params["b"] = Tensor(np.zeros(n_out, dtype=dtype))

    def out_shape(self, shape):
        if tuple(shape) != (self.n_in,):
            raise ShapeError(f"expected ({self.n_in},), got {tuple(shape)}")
        return (self.n_out,)

    def forward(self, x):
        self._x = x
        return x @ self.params["w"].data.T + self.params["b"].data

    def backward(self, g, needs):
        self.params["w"].accumulate(g.T @ self._x)
        self.params["b"].accumulate(g.sum(axis=0))
        return (g @ self.params["w"].data if needs[0] else None,)


class Sigmoid(Op):
    kind = "sigmoid"

    def forward(self, x):
        self._y = expit(x)
        return self._y

    def backward(self, g, needs):
        return (g * self._y * (1.0 - self._y),)


class Softmax(Op):
    kind = "softmax"

    def forward(self, x):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        self._y = e / e.sum(axis=-1, keepdims=True)
        return self._y

    def backward(self, g, needs):
        y = self._y
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


class ResidualAdd(Op):
    kind = "residual-add"
    n_inputs = 2

    def out_shape(self, a, b):
        if tuple(a) != tuple(b):
            raise ShapeError(f"branch shapes differ: {tuple(a)} vs {tuple(b)}")
        return a

    def forward(self, a, b):
        return a + b

    def backward(self, g, needs):
        return (g if needs[0] else None, g if needs[1] else None)


@dataclass
class Node:
    name: str
    op: Op
    inputs: tuple[str, ...]
    shape: tuple[int, ...]


class Graph:
    """An acyclic graph of ops evaluated in insertion order.

    ``input_shape`` excludes the batch axis. Every node's static output shape
    is inferred when it is added, and re-checked against the runtime value
    on each forward pass.
    """

    def __init__(self, input_shape, dtype=np.float64, check_finite=False):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self.nodes: list[Node] = []
        self._index: dict[str, int] = {}
        self.output = None
        self.final_conv = None  # set by builders that expose a feature map for saliency
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._ran_forward = False

    def _shape_of(self, name):
        return self.input_shape if name == INPUT else self.nodes[self._index[name]].shape

    def add(self, name: str, op: Op, inputs=None) -> str:
        if name in self._index or name == INPUT:
            raise ValueError(f"duplicate node name {name!r}")
        if inputs is None:
            inputs = (self.nodes[-1].name if self.nodes else INPUT,)
        elif isinstance(inputs, str):
            inputs = (inputs,)
        inputs = tuple(inputs)
        if len(inputs) != op.n_inputs:
            raise ValueError(f"node {name!r}: {op.kind} takes {op.n_inputs} input(s), got {len(inputs)}")
        for src in inputs:
            if src != INPUT and src not in self._index:
                raise ValueError(f"node {name!r}: unknown input {src!r}")
        try:
            shape = tuple(op.out_shape(*(self._shape_of(s) for s in inputs)))
        except ShapeError as exc:
            raise ShapeError(f"node {name!r} ({op.kind}): {exc}") from None
        self._index[name] = len(self.nodes)
        self.nodes.append(Node(name, op, inputs, shape))
        self.output = name
        return name

    def node(self, name: str) -> Node:
        return self.nodes[self._index[name]]

    @property
    def output_shape(self):
        return self._shape_of(self.output)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for node in self.nodes:
            for pname, t in node.op.params.items():
                out[f"{node.name}.{pname}"] = t
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=self.dtype)
        if x.ndim != len(self.input_shape) + 1 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"node 'input': expected (N, {', '.join(map(str, self.input_shape))}), got {tuple(x.shape)}"
            )
        values = {INPUT: x}
        for node in self.nodes:
            args = [values[s] for s in node.inputs]
            y = node.op.forward(*args)
            if tuple(y.shape[1:]) != node.shape:
                raise ShapeError(f"node {node.name!r} ({node.op.kind}): expected {node.shape}, got {tuple(y.shape[1:])}")
            if self.check_finite and not np.all(np.isfinite(y)):
                raise FloatingPointError(f"non-finite value produced at node {node.name!r}")
            values[node.name] = y
        self.values = values
        self.grads = {}
        self._ran_forward = True
        return values[self.output]

    def backward(self, output_grad, start=None, need_input_grad=True):
        """Backpropagate ``output_grad`` from node ``start`` (default: the output).

        Parameter gradients accumulate into their tensors; per-node output
        gradients are kept in ``self.grads``. Returns the gradient with
        respect to the graph input, or None when ``need_input_grad`` is False.
        """
        if not self._ran_forward:
            raise RuntimeError("backward called before forward")
        start = self.output if start is None else start
        sidx = self._index[start]
        g0 = np.asarray(output_grad, dtype=self.dtype)
        if g0.shape != self.values[start].shape:
            raise ShapeError(f"node {start!r}: output_grad shape {g0.shape} != output shape {self.values[start].shape}")
        needed = self._needed_sources(sidx, need_input_grad)
        grads = {start: g0}
        for node in reversed(self.nodes[: sidx + 1]):
            g = grads.get(node.name)
            if g is None:
                continue
            needs = [s in needed for s in node.inputs]
            in_grads = node.op.backward(g, needs)
            for src, gi, need in zip(node.inputs, in_grads, needs):
                if not need or gi is None:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
            if self.check_finite and not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at node {node.name!r}")
        self.grads = grads
        return grads.get(INPUT) if need_input_grad else None

    def _needed_sources(self, sidx, need_input_grad):
        # A value's gradient is needed iff some path leads from it to a node
        # with parameters or to the graph input (when requested).
        needed = set()
        if need_input_grad:
            needed.add(INPUT)
        for node in self.nodes[: sidx + 1]:
            if node.op.params or any(s in needed for s in node.inputs):
                needed.add(node.name)
        return needed

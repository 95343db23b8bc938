"""A small reverse-mode autodiff core.

Only the layer types needed by the separator, the domain discriminator and
the two training losses are provided. Every op returns a new :class:`Tensor`
that remembers its parents and a closure mapping the output gradient to the
parent gradients; :func:`backward` replays those closures in reverse
topological order.

Storage follows the dtype of the inputs (float32 for training, float64 for
gradient checks). Scalar reductions are always accumulated in float64.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

DTYPE = np.float32
SIGMOID_CLAMP = 30.0
LOG_FLOOR = 1e-7


class Tensor:
    """An n-d array plus the bookkeeping needed for reverse-mode gradients."""

    __slots__ = ("_data", "grad", "requires_grad", "name", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DTYPE)
        self._data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value):
        value = np.asarray(value, dtype=self._data.dtype)
        if value.shape != self._data.shape:
            raise ValueError(f"cannot change shape of tensor {self.name!r}: {self._data.shape} -> {value.shape}")
        self._data = value

    @property
    def shape(self):
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self._data

    def detach(self) -> "Tensor":
        return Tensor(self._data, requires_grad=False, name=self.name)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, factor):
        return scale(self, factor)

    __rmul__ = __mul__


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad or not t.is_leaf for t in tensors)


def _node(data, parents, backward_fn, op):
    # ops on constants are folded into constants so detached branches carry no graph
    if not _needs_grad(*parents):
        return Tensor(data, op=op)
    return Tensor(data, _parents=tuple(parents), _backward=backward_fn, op=op)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """2-D cross-correlation, stride 1.

    ``x`` is (N, C, H, W), ``kernel`` is (O, C, kh, kw) with odd kh/kw and
    ``bias`` is (O,). ``padding="same"`` zero-pads so the output keeps H x W;
    ``"valid"`` returns (H - kh + 1, W - kw + 1).
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got input {x.shape} and kernel {kernel.shape}")
    n_out, n_in, kh, kw = kernel.shape
    if x.shape[1] != n_in:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel spatial dims must be odd, got kernel {kernel.shape}")
    if bias.shape != (n_out,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match kernel {kernel.shape}")
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
        if x.shape[2] < kh or x.shape[3] < kw:
            raise ValueError(f"conv2d valid padding: input {x.shape} smaller than kernel {kernel.shape}")
    else:
        raise ValueError(f"unknown padding {padding!r}")

    dtype = x.dtype
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else np.ascontiguousarray(xd)
    w = np.ascontiguousarray(kernel.data, dtype=dtype)
    b = np.ascontiguousarray(bias.data, dtype=dtype)
    out = _kernels.conv_forward(xp, w, b)
    h, wd = xd.shape[2], xd.shape[3]

    def _backward(g):
        g = np.ascontiguousarray(g, dtype=dtype)
        gx = gw = gb = None
        if _needs_grad(x):
            gxp = _kernels.conv_grad_input(g, w, xp.shape)
            gx = gxp[:, :, ph:ph + h, pw:pw + wd]
        if _needs_grad(kernel):
            gw = _kernels.conv_grad_weight(g, xp, (kh, kw))
        if _needs_grad(bias):
            gb = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
        return gx, gw, gb

    return _node(out, (x, kernel, bias), _backward, "conv2d")


def maxpool2d(x: Tensor) -> Tensor:
    """Disjoint 2x2 max pooling; ties route the gradient to the first element."""
    if x.data.ndim != 4:
        raise ValueError(f"maxpool2d expects a 4-D input, got {x.shape}")
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {x.shape}")
    out, idx = _kernels.maxpool_forward(np.ascontiguousarray(x.data))

    def _backward(g):
        return (_kernels.maxpool_backward(np.ascontiguousarray(g, dtype=x.dtype), idx),)

    return _node(out, (x,), _backward, "maxpool2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling along both spatial axes."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def _backward(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return _node(out, (x,), _backward, "upsample2x")


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight + bias`` for x (N, in), weight (in, out)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ValueError(f"dense bias shape {bias.shape} does not match weight {weight.shape}")
    dtype = x.dtype
    x64 = x.data.astype(np.float64)
    w64 = weight.data.astype(np.float64)
    out = (x64 @ w64 + bias.data).astype(dtype)

    def _backward(g):
        g64 = g.astype(np.float64)
        gx = (g64 @ w64.T).astype(dtype)
        gw = (x64.T @ g64).astype(weight.dtype)
        gb = g64.sum(axis=0).astype(bias.dtype)
        return gx, gw, gb

    return _node(out, (x, weight, bias), _backward, "dense")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.maximum(x.data, 0)
    return _node(out, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = np.clip(x.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    s = (1.0 / (1.0 + np.exp(-z))).astype(x.dtype)
    # float32 rounds sigmoid(30) to 1; keep the output strictly below 1
    s = np.minimum(s, np.nextafter(x.dtype.type(1), x.dtype.type(0)))
    return _node(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    sizes = [t.shape[1] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return _node(out, tuple(tensors), _backward, "concat")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def _backward(g):
        return (_unbroadcast(g * b.data, a.shape).astype(a.dtype, copy=False),
                _unbroadcast(g * a.data, b.shape).astype(b.dtype, copy=False))

    return _node(out, (a, b), _backward, "mul")


def scale(x, factor: float) -> Tensor:
    x = _as_tensor(x)
    factor = float(factor)
    return _node(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def sum_all(x: Tensor) -> Tensor:
    out = np.array(x.data.sum(dtype=np.float64))
    return _node(out, (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def weighted_sse(estimate: Tensor, target, weights: Sequence[float]) -> Tensor:
    """Batch mean of channel-weighted squared errors summed over each item.

    ``estimate`` and ``target`` are (N, S, ...). Channel s contributes
    ``weights[s] * ||estimate[:, s] - target[:, s]||^2``.
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if estimate.shape != target.shape:
        raise ValueError(f"loss shape mismatch: estimate {estimate.shape} vs target {target.shape}")
    n, s = estimate.shape[:2]
    if len(weights) != s:
        raise ValueError(f"{len(weights)} weights for {s} channels")
    wvec = np.asarray(weights, dtype=np.float64).reshape((1, s) + (1,) * (estimate.data.ndim - 2))
    diff = estimate.data.astype(np.float64) - target
    out = np.array((wvec * diff * diff).sum() / n)

    def _backward(g):
        return ((g * 2.0 / n * wvec * diff).astype(estimate.dtype),)

    return _node(out, (estimate,), _backward, "weighted_sse")


def binary_cross_entropy(probs_a: Tensor, probs_b: Tensor) -> Tensor:
    """``-mean(log p_b) - mean(log(1 - p_a))`` with log arguments floored at 1e-7."""
    if probs_a.data.size == 0 or probs_b.data.size == 0:
        raise ValueError("binary_cross_entropy needs non-empty probabilities for both domains")
    pa = probs_a.data.astype(np.float64)
    pb = probs_b.data.astype(np.float64)
    arg_b = np.maximum(pb, LOG_FLOOR)
    arg_a = np.maximum(1.0 - pa, LOG_FLOOR)
    out = np.array(-np.log(arg_b).mean() - np.log(arg_a).mean())

    def _backward(g):
        gb = np.where(pb > LOG_FLOOR, -1.0 / arg_b, 0.0) / pb.size
        ga = np.where(1.0 - pa > LOG_FLOOR, 1.0 / arg_a, 0.0) / pa.size
        return (g * ga).astype(probs_a.dtype), (g * gb).astype(probs_b.dtype)

    return _node(out, (probs_a, probs_b), _backward, "bce")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

class Graph:
    """Recorded computation reachable from a scalar output.

    ``nodes`` is a topological order (inputs before outputs); ``leaves`` are
    the reachable tensors with ``requires_grad``.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = _topological_order(output)
        self.leaves = [t for t in self.nodes if t.is_leaf and t.requires_grad]

    def backward(self) -> dict:
        """Propagate d(output)/d(node) and return gradients keyed by leaf id."""
        grads = {id(self.output): np.ones_like(self.output.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None) if not node.is_leaf else grads.get(id(node))
            if g is None or node.is_leaf:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return {id(t): grads[id(t)] for t in self.leaves if id(t) in grads}


def _topological_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None):
    """Fill ``.grad`` for the leaves of ``loss``'s graph.

    Without ``params`` every reachable leaf with ``requires_grad`` is updated
    and nothing else is touched. With ``params`` exactly those tensors get a
    fresh gradient (zeros when ``loss`` does not depend on them) and the list
    of gradients is returned in the same order.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        raise RuntimeError("backward called on a tensor with no recorded forward pass")
    graph = Graph(loss)
    grads = graph.backward()
    if params is None:
        for leaf in graph.leaves:
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.dtype).reshape(leaf.shape)
        return [leaf.grad for leaf in graph.leaves]
    out = []
    for p in params:
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
        out.append(p.grad)
    return out


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    epsilon: float = 1e-4,
    max_samples_per_param: int = 20,
    seed: int = 0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss_fn`` must rebuild the forward pass from the current parameter
    values each time it is called. Parameters should be float64 for a
    meaningful comparison. Up to ``max_samples_per_param`` entries of each
    parameter are probed.
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-3], got {epsilon}")
    analytic = [g.copy() for g in backward(loss_fn(), params)]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        count = min(flat.size, max_samples_per_param)
        picks = rng.choice(flat.size, size=count, replace=False)
        for k in picks:
            orig = flat[k]
            flat[k] = orig + epsilon
            up = loss_fn().item()
            flat[k] = orig - epsilon
            down = loss_fn().item()
            flat[k] = orig
            numeric = (up - down) / (2 * epsilon)
            a = float(ga.reshape(-1)[k])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst

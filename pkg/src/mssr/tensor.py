"""Dense NCHW tensors with reverse-mode differentiation.

Every differentiable op returns a new :class:`Tensor`; when gradients are
enabled and an input requires them, the output carries an :class:`OpNode`
recording the op kind, its inputs and a closure mapping the upstream gradient
to per-input gradients. :func:`backward` walks those nodes in reverse
topological order.

Conventions: zero "same" padding (``k // 2``) for every convolution, ReLU
gradient 0 at 0, ``sign(0) = 0`` in the L1 gradient. Parameters and
activations default to float32; the finite-difference checker runs in float64.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

OP_KINDS = ("conv2d", "relu", "add", "concat", "depth_to_space", "space_to_depth", "loss")


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


_grad_enabled = True
_kink_trace: list | None = None


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def record_kinks():
    """Collect activation patterns of every piecewise-linear op evaluated inside."""
    global _kink_trace
    prev = _kink_trace
    _kink_trace = []
    try:
        yield _kink_trace
    finally:
        _kink_trace = prev


@dataclass(eq=False)
class OpNode:
    kind: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    attrs: dict = field(default_factory=dict)


class Tensor:
    """Rank-4 array (batch, channels, height, width) with an optional gradient."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32, name: str | None = None):
        if isinstance(data, np.ndarray) and data.dtype == dtype:
            arr = data
        else:
            arr = np.array(data, dtype=dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank 4 (n, c, h, w), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: OpNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _wrap(out: np.ndarray, kind: str, inputs: Sequence[Tensor], backward_fn, **attrs) -> Tensor:
    t = Tensor(out, dtype=out.dtype)
    if _grad_enabled and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t.node = OpNode(kind, tuple(inputs), backward_fn, attrs)
    return t


# ---------------------------------------------------------------------------
# convolution


@dataclass
class ConvParams:
    weight: Tensor  # (out_c, in_c, k, k)
    bias: Tensor  # (1, out_c, 1, 1)
    stride: int = 1

    def __post_init__(self):
        o, _, kh, kw = self.weight.shape
        if kh != kw or kh % 2 == 0:
            raise ShapeError(f"kernel must be square with odd size, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if o < 1:
            raise ShapeError("need at least one output channel")
        if self.bias.shape != (1, o, 1, 1):
            raise ShapeError(f"bias shape {self.bias.shape} does not match {o} output channels")

    @property
    def out_c(self) -> int:
        return self.weight.shape[0]

    @property
    def in_c(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def count(self) -> int:
        return self.weight.data.size + self.bias.data.size

    @classmethod
    def create(cls, in_c: int, out_c: int, k: int = 3, stride: int = 1, dtype=np.float32) -> "ConvParams":
        return cls(
            Tensor(np.zeros((out_c, in_c, k, k)), requires_grad=True, dtype=dtype),
            Tensor(np.zeros((1, out_c, 1, 1)), requires_grad=True, dtype=dtype),
            stride,
        )


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    p = k // 2
    # channels-last padded copy so every gathered run is contiguous
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w, :] = x.transpose(0, 2, 3, 1)
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    oh, ow = win.shape[1], win.shape[2]
    # column layout: (kernel row, kernel col, input channel) fastest-last
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * oh * ow, k * k * c)
    return cols, oh, ow


def conv2d(x: Tensor, params: ConvParams) -> Tensor:
    n, c, h, w = x.shape
    if c != params.in_c:
        raise ShapeError(f"conv2d expects {params.in_c} input channels, got {c}")
    s, k = params.stride, params.k
    if s == 2 and (h % 2 or w % 2):
        raise ShapeError(f"stride-2 conv2d needs even spatial size, got {h}x{w}")
    W = params.weight.data
    o = W.shape[0]
    wmat = W.transpose(0, 2, 3, 1).reshape(o, k * k * c)
    cols, oh, ow = _im2col(x.data, k, s)
    out = (cols @ wmat.T).reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out) + params.bias.data

    def backward_fn(g: np.ndarray):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (gm.T @ cols).reshape(o, k, k, c).transpose(0, 3, 1, 2) if params.weight.requires_grad else None
        db = g.sum(axis=(0, 2, 3)).reshape(1, o, 1, 1) if params.bias.requires_grad else None
        dx = None
        if x.requires_grad and s == 1:
            # stride 1: input gradient is a "same" correlation of g with the flipped, transposed kernel
            gcols, _, _ = _im2col(g, k, 1)
            wflip = W[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * o, c)
            dx = (gcols @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        elif x.requires_grad:
            p = k // 2
            dcols = (gm @ wmat).reshape(n, oh, ow, k, k, c)
            dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, i, j, :].transpose(0, 3, 1, 2)
            dx = dxp[:, :, p:p + h, p:p + w]
        return dx, dw, db

    return _wrap(out, "conv2d", (x, params.weight, params.bias), backward_fn, stride=s, k=k)


# ---------------------------------------------------------------------------
# pointwise and structural ops


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    if _kink_trace is not None:
        _kink_trace.append(mask)
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _wrap(out, "relu", (x,), lambda g: (g * mask,))


def add(inputs: Sequence[Tensor]) -> Tensor:
    if len(inputs) < 1:
        raise ShapeError("add needs at least one input")
    shape = inputs[0].shape
    for t in inputs[1:]:
        if t.shape != shape:
            raise ShapeError(f"add shape mismatch: {shape} vs {t.shape}")
    out = inputs[0].data.copy()
    for t in inputs[1:]:
        out += t.data
    return _wrap(out, "add", inputs, lambda g: tuple(g for _ in inputs))


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    if len(inputs) < 1:
        raise ShapeError("concat needs at least one input")
    n, _, h, w = inputs[0].shape
    for t in inputs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat spatial/batch mismatch: {inputs[0].shape} vs {t.shape}")
    sizes = [t.shape[1] for t in inputs]
    out = np.concatenate([t.data for t in inputs], axis=1)
    bounds = np.cumsum([0] + sizes)

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _wrap(out, "concat", inputs, backward_fn, sizes=sizes)


def _d2s(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c // (r * r), h * r, w * r)


def _s2d(a: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = a.shape
    return a.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def depth_to_space(x: Tensor, factor: int = 2) -> Tensor:
    """Channel block ``(r*r*q + r*di + dj)`` lands at offset ``(di, dj)`` of output channel ``q``."""
    if x.shape[1] % (factor * factor):
        raise ShapeError(f"depth_to_space needs channels divisible by {factor * factor}, got {x.shape[1]}")
    out = np.ascontiguousarray(_d2s(x.data, factor))
    return _wrap(out, "depth_to_space", (x,), lambda g: (_s2d(g, factor),), factor=factor)


def space_to_depth(x: Tensor, factor: int = 2) -> Tensor:
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError(f"space_to_depth needs spatial size divisible by {factor}, got {x.shape[2:]}")
    out = np.ascontiguousarray(_s2d(x.data, factor))
    return _wrap(out, "space_to_depth", (x,), lambda g: (_d2s(g, factor),), factor=factor)


# ---------------------------------------------------------------------------
# losses


def compute_loss(mode: str, pred: np.ndarray | Tensor, target: np.ndarray | Tensor) -> tuple[float, np.ndarray]:
    """Mean L1 or L2 error and its gradient with respect to ``pred``."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if p.shape != t.shape:
        raise ShapeError(f"loss shape mismatch: {p.shape} vs {t.shape}")
    diff = p - t
    count = diff.size
    mode = mode.upper()
    if mode == "L1":
        value = float(np.abs(diff).sum(dtype=np.float64) / count)
        grad = np.sign(diff) / p.dtype.type(count)
    elif mode == "L2":
        value = float(np.square(diff, dtype=np.float64).sum() / count)
        grad = diff * p.dtype.type(2.0 / count)
    else:
        raise ValueError(f"unknown loss mode {mode!r} (expected L1 or L2)")
    return value, grad.astype(p.dtype, copy=False)


def loss(mode: str, pred: Tensor, target: Tensor) -> Tensor:
    value, grad = compute_loss(mode, pred, target)
    if _kink_trace is not None and mode.upper() == "L1":
        _kink_trace.append(np.sign(pred.data - target.data))
    out = np.full((1, 1, 1, 1), value, dtype=pred.dtype)

    def backward_fn(g):
        scale = g.reshape(())
        return grad * scale, -grad * scale

    return _wrap(out, "loss", (pred, target), backward_fn, mode=mode.upper())


# ---------------------------------------------------------------------------
# reverse pass


def topological_order(root: Tensor) -> list[Tensor]:
    """Tensors reachable from ``root``, inputs before consumers."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        t, i = stack.pop()
        key = id(t)
        if i == 0:
            if state.get(key) == 2:
                continue
            state[key] = 1
        parents = t.node.inputs if t.node is not None else ()
        if i < len(parents):
            stack.append((t, i + 1))
            p = parents[i]
            s = state.get(id(p))
            if s == 1:
                raise GraphError("cycle detected in computation graph")
            if s is None:
                stack.append((p, 0))
        else:
            state[key] = 2
            order.append(t)
    return order


def backward(root: Tensor, params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray] | None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad.

    ``root`` must hold a single element. When ``params`` is given, returns a
    mapping from each of them to its gradient (zeros when ``root`` does not
    depend on it).
    """
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    order = topological_order(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for parent, pg in zip(t.node.inputs, t.node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    if params is None:
        return None
    return {p: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}


# ---------------------------------------------------------------------------
# finite-difference checking


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``inputs`` are float64 tensors; ``fn(*inputs)`` must return a single-element
    tensor. Coordinates whose +/-``eps`` perturbation changes the activation
    pattern of any ReLU or L1 loss are skipped, since the function is not
    differentiable across those kinks. ``max_coords`` subsamples coordinates
    per input.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradcheck works on float64 tensors")
        if not np.all(np.isfinite(t.data)):
            raise ValueError("gradcheck inputs must be finite")
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    backward(out)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    def evaluate():
        with no_grad(), record_kinks() as trace:
            value = float(fn(*inputs).data.reshape(()))
        return value, trace

    _, base = evaluate()

    def same(a, b):
        return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))

    from .data import SeededRng  # local: data imports nothing from here

    picker = SeededRng(seed, "gradcheck")
    worst = 0.0
    for t, ga in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(picker.permutation(flat.size)[:max_coords])
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp, tp = evaluate()
            flat[i] = orig - eps
            fm, tm = evaluate()
            flat[i] = orig
            if not (same(tp, base) and same(tm, base)):
                continue
            num = (fp - fm) / (2 * eps)
            ana = float(ga.reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst

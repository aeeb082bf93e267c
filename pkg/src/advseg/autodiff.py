"""Minimal reverse-mode automatic differentiation over dense numpy tensors.

Operations are recorded on an explicit :class:`Tape` while it is active and
replayed in reverse by :func:`backward`.  Image-like operations accept either a
single ``[C, H, W]`` tensor or a batch ``[N, C, H, W]``; the channel axis is
always ``-3``.  There is no general broadcasting.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Sequence

import numpy as np

DTYPE = np.float32
LOG_FLOOR = 1e-12


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class UnknownOpError(AutodiffError, KeyError):
    pass


class NonScalarLossError(AutodiffError, ValueError):
    pass


class LeafNotOnTapeError(AutodiffError, KeyError):
    pass


class NonFiniteGradientError(AutodiffError, FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in {name!r}")
        self.name = name


_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", DTYPE)


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    prev = _dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """Dense array with an optional gradient requirement.

    ``data`` is always a C-contiguous numpy array of the active precision.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64) or arr.dtype != _dtype():
            arr = arr.astype(_dtype())
        if arr.ndim > 4:
            raise ShapeError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return elementwise_mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.data.dtype))


@dataclass(eq=False)
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    attrs: dict
    saved: Any


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations whose inputs require gradients are
    appended while the tape is active.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: Node) -> None:
        self.nodes.append(node)
        self._produced.add(id(node.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def replay(self) -> bool:
        """Recompute every node from its recorded inputs; True if bit-identical."""
        for node in self.nodes:
            out, _ = OPS[node.kind].forward([t.data for t in node.inputs], node.attrs)
            if out.shape != node.output.shape or not np.array_equal(out, node.output.data):
                return False
        return True


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_tape() -> Iterator[None]:
    """Suspend recording (used for inference and finite differences)."""
    saved = list(_tape_stack())
    _tape_stack().clear()
    try:
        yield
    finally:
        _tape_stack().extend(saved)


# ---------------------------------------------------------------------------
# op registry


@dataclass(frozen=True)
class OpDef:
    forward: Callable[[list[np.ndarray], dict], tuple[np.ndarray, Any]]
    # backward(grad_out, input arrays, output array, saved, attrs, needs) -> list of grads|None
    backward: Callable[..., list]
    check: Callable[[list[tuple[int, ...]], dict], None] | None = None
    arity: int | tuple[int, ...] = 1


OPS: dict[str, OpDef] = {}


def register(kind: str, arity, check=None):
    def deco(cls):
        OPS[kind] = OpDef(cls.forward, cls.backward, check, arity)
        return cls

    return deco


def forward_op(kind: str, inputs: Sequence[Tensor], attrs: dict | None = None) -> Tensor:
    """Apply a registered op, recording it on the active tape if needed."""
    try:
        op = OPS[kind]
    except KeyError:
        raise UnknownOpError(f"unknown op kind {kind!r}") from None
    attrs = attrs or {}
    inputs = tuple(inputs)
    arity = op.arity if isinstance(op.arity, tuple) else (op.arity,)
    if len(inputs) not in arity:
        raise ShapeError(f"{kind}: expected {arity} inputs, got {len(inputs)}")
    if op.check is not None:
        op.check([t.shape for t in inputs], attrs)
    out_data, saved = op.forward([t.data for t in inputs], attrs)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(Node(kind, inputs, out, attrs, saved))
    return out


def _fail(kind: str, msg: str):
    raise ShapeError(f"{kind}: {msg}")


def _same_shape(kind):
    def check(shapes, attrs):
        if shapes[0] != shapes[1]:
            _fail(kind, f"operand shapes differ: {shapes[0]} vs {shapes[1]}")

    return check


def _image_check(kind, min_rank=3):
    def check(shapes, attrs):
        for s in shapes:
            if len(s) not in (3, 4) or len(s) < min_rank:
                _fail(kind, f"expected [C,H,W] or [N,C,H,W], got {s}")

    return check


def _as4(a: np.ndarray) -> np.ndarray:
    return a[None] if a.ndim == 3 else a


# ---------------------------------------------------------------------------
# elementwise


@register("add", 2, _same_shape("add"))
class _Add:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] + xs[1], None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        return [g, g]


@register("sub", 2, _same_shape("sub"))
class _Sub:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] - xs[1], None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        return [g, -g]


@register("scale", 1)
class _Scale:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] * xs[0].dtype.type(attrs["factor"]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        return [g * g.dtype.type(attrs["factor"])]


@register("elementwise_mul", 2, _same_shape("elementwise_mul"))
class _Mul:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] * xs[1], None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        return [g * xs[1] if needs[0] else None, g * xs[0] if needs[1] else None]


@register("div", 2, _same_shape("div"))
class _Div:
    @staticmethod
    def forward(xs, attrs):
        return xs[0] / xs[1], None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        ga = g / xs[1] if needs[0] else None
        gb = -g * out / xs[1] if needs[1] else None
        return [ga, gb]


@register("relu", 1)
class _Relu:
    @staticmethod
    def forward(xs, attrs):
        return np.maximum(xs[0], 0), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        # subgradient at 0 is 0
        return [g * (xs[0] > 0)]


@register("sigmoid", 1)
class _Sigmoid:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        return [g * out * (1 - out)]


@register("softplus", 1)
class _Softplus:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        return (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        s, _ = _Sigmoid.forward(xs, attrs)
        return [g * s]


@register("natural_log", 1)
class _Log:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        return np.log(np.maximum(x, x.dtype.type(LOG_FLOOR))), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        x = xs[0]
        floor = x.dtype.type(LOG_FLOOR)
        return [np.where(x > floor, g / np.maximum(x, floor), 0).astype(g.dtype)]


# ---------------------------------------------------------------------------
# reductions and linear algebra


def _sum_check(shapes, attrs):
    axes = attrs.get("axes")
    if axes is not None:
        nd = len(shapes[0])
        for a in axes:
            if not -nd <= a < nd:
                _fail("sum", f"axis {a} out of range for shape {shapes[0]}")


@register("sum", 1, _sum_check)
class _Sum:
    @staticmethod
    def forward(xs, attrs):
        axes = attrs.get("axes")
        out = xs[0].sum(axis=None if axes is None else tuple(axes), keepdims=axes is not None)
        if axes is None:
            out = out.reshape(1)
        else:
            out = out.squeeze(axis=tuple(axes))
        return np.asarray(out, dtype=xs[0].dtype), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        x = xs[0]
        axes = attrs.get("axes")
        if axes is None:
            return [np.broadcast_to(g.reshape(()), x.shape).astype(x.dtype)]
        g = np.expand_dims(g, tuple(a % x.ndim for a in axes))
        return [np.ascontiguousarray(np.broadcast_to(g, x.shape))]


def _matmul_check(shapes, attrs):
    a, w = shapes[0], shapes[1]
    if len(a) not in (1, 2) or len(w) != 2:
        _fail("matmul", f"expected [F] or [N,F] times [F,K], got {a} and {w}")
    if a[-1] != w[0]:
        _fail("matmul", f"inner dimensions differ: {a[-1]} vs {w[0]}")
    if len(shapes) == 3 and shapes[2] != (w[1],):
        _fail("matmul", f"bias shape {shapes[2]} does not match output width {w[1]}")


@register("matmul", (2, 3), _matmul_check)
class _Matmul:
    """``a @ w (+ bias)``; the optional bias is added to every row."""

    @staticmethod
    def forward(xs, attrs):
        out = xs[0] @ xs[1]
        if len(xs) == 3:
            out = out + xs[2]
        return out, None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        a, w = xs[0], xs[1]
        a2 = a.reshape(-1, a.shape[-1])
        g2 = g.reshape(-1, w.shape[1])
        grads = [
            (g2 @ w.T).reshape(a.shape) if needs[0] else None,
            a2.T @ g2 if needs[1] else None,
        ]
        if len(xs) == 3:
            grads.append(g2.sum(axis=0) if needs[2] else None)
        return grads


# ---------------------------------------------------------------------------
# image ops


def _conv_check(shapes, attrs):
    x, w = shapes[0], shapes[1]
    if len(x) not in (3, 4):
        _fail("conv2d", f"input must be [C,H,W] or [N,C,H,W], got {x}")
    if len(w) != 4 or w[2] != w[3] or w[2] % 2 == 0:
        _fail("conv2d", f"kernel must be [O,C,k,k] with odd k, got {w}")
    if x[-3] != w[1]:
        _fail("conv2d", f"input channels {x[-3]} != kernel channels {w[1]}")
    if len(shapes) == 3 and shapes[2] != (w[0],):
        _fail("conv2d", f"bias shape {shapes[2]} != ({w[0]},)")


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """[C, N, H+k-1, W+k-1] padded input -> [C*k*k, N*H*W] columns."""
    c, n = xp.shape[:2]
    cols = np.empty((c, k, k, n, h, w), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(c * k * k, n * h * w)


@register("conv2d", (2, 3), _conv_check)
class _Conv2d:
    """Stride-1 convolution with zero "same" padding (cross-correlation)."""

    @staticmethod
    def forward(xs, attrs):
        x, wt = xs[0], xs[1]
        x4 = _as4(x)
        n, c, h, w = x4.shape
        o, _, k, _ = wt.shape
        p = k // 2
        if k == 1:
            cols = x4.transpose(1, 0, 2, 3).reshape(c, n * h * w)
        else:
            xp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
            xp[:, :, p:p + h, p:p + w] = x4.transpose(1, 0, 2, 3)
            cols = _im2col(xp, k, h, w)
        out = wt.reshape(o, -1) @ cols
        if len(xs) == 3:
            out += xs[2][:, None]
        out = out.reshape(o, n, h, w).transpose(1, 0, 2, 3)
        out = np.ascontiguousarray(out if x.ndim == 4 else out[0])
        return out, cols

    @staticmethod
    def backward(g, xs, out, cols, attrs, needs):
        x, wt = xs[0], xs[1]
        x4 = _as4(x)
        n, c, h, w = x4.shape
        o, _, k, _ = wt.shape
        p = k // 2
        g2 = np.ascontiguousarray(_as4(g).transpose(1, 0, 2, 3)).reshape(o, n * h * w)
        grads = [None, None]
        if needs[1]:
            grads[1] = (g2 @ cols.T).reshape(wt.shape)
        if needs[0]:
            if k == 1:
                dx = (wt.reshape(o, c).T @ g2).reshape(c, n, h, w)
            elif o < c:
                # transposed convolution: im2col over the (narrower) output grad
                gp = np.zeros((o, n, h + 2 * p, w + 2 * p), dtype=g.dtype)
                gp[:, :, p:p + h, p:p + w] = g2.reshape(o, n, h, w)
                flipped = wt[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
                dx = (flipped @ _im2col(gp, k, h, w)).reshape(c, n, h, w)
            else:
                dcols = (wt.reshape(o, -1).T @ g2).reshape(c, k, k, n, h, w)
                dxp = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=g.dtype)
                for i in range(k):
                    for j in range(k):
                        dxp[:, :, i:i + h, j:j + w] += dcols[:, i, j]
                dx = dxp[:, :, p:p + h, p:p + w]
            dx = dx.transpose(1, 0, 2, 3)
            grads[0] = np.ascontiguousarray(dx if x.ndim == 4 else dx[0])
        if len(xs) == 3:
            grads.append(g2.sum(axis=1) if needs[2] else None)
        return grads


def _pool_check(kind):
    base = _image_check(kind)

    def check(shapes, attrs):
        base(shapes, attrs)
        h, w = shapes[0][-2:]
        if h % 2 or w % 2:
            _fail(kind, f"spatial dims must be even, got {h}x{w}")

    return check


@register("maxpool", 1, _pool_check("maxpool"))
class _MaxPool:
    """2x2 max pooling, stride 2.  Ties route the gradient to the first maximum."""

    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        *lead, h, w = x.shape
        win = x.reshape(*lead, h // 2, 2, w // 2, 2)
        win = np.moveaxis(win, -3, -2).reshape(*lead, h // 2, w // 2, 4)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return out, idx

    @staticmethod
    def backward(g, xs, out, idx, attrs, needs):
        x = xs[0]
        *lead, h, w = x.shape
        win = np.zeros((*lead, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(win, idx[..., None], g[..., None], axis=-1)
        win = win.reshape(*lead, h // 2, w // 2, 2, 2)
        return [np.moveaxis(win, -2, -3).reshape(x.shape)]


@register("nearest_upsample", 1, _image_check("nearest_upsample"))
class _Upsample:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        return x.repeat(2, axis=-2).repeat(2, axis=-1), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        *lead, h, w = g.shape
        return [g.reshape(*lead, h // 2, 2, w // 2, 2).sum(axis=(-3, -1))]


@register("channel_softmax", 1, _image_check("channel_softmax"))
class _Softmax:
    @staticmethod
    def forward(xs, attrs):
        x = xs[0]
        e = np.exp(x - x.max(axis=-3, keepdims=True))
        return e / e.sum(axis=-3, keepdims=True), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        dot = (g * out).sum(axis=-3, keepdims=True)
        return [out * (g - dot)]


@register("global_avg_pool", 1, _image_check("global_avg_pool"))
class _GlobalAvgPool:
    """[C,H,W] -> [C] and [N,C,H,W] -> [N,C]."""

    @staticmethod
    def forward(xs, attrs):
        return xs[0].mean(axis=(-2, -1)), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        x = xs[0]
        h, w = x.shape[-2:]
        scaled = (g / x.dtype.type(h * w))[..., None, None]
        return [np.ascontiguousarray(np.broadcast_to(scaled, x.shape))]


def _concat_check(shapes, attrs):
    a, b = shapes
    if len(a) not in (3, 4) or len(a) != len(b):
        _fail("channel_concat", f"incompatible ranks {a} and {b}")
    if a[:-3] != b[:-3] or a[-2:] != b[-2:]:
        _fail("channel_concat", f"non-channel dimensions differ: {a} vs {b}")


@register("channel_concat", 2, _concat_check)
class _Concat:
    @staticmethod
    def forward(xs, attrs):
        return np.concatenate(xs, axis=-3), xs[0].shape[-3]

    @staticmethod
    def backward(g, xs, out, split, attrs, needs):
        return [
            np.ascontiguousarray(g[..., :split, :, :]) if needs[0] else None,
            np.ascontiguousarray(g[..., split:, :, :]) if needs[1] else None,
        ]


def _crop_check(shapes, attrs):
    s = shapes[0]
    if len(s) < 2:
        _fail("spatial_crop", f"need at least 2 spatial dims, got {s}")
    y0, x0, y1, x1 = attrs["box"]
    h, w = s[-2:]
    if not (0 <= y0 < y1 <= h and 0 <= x0 < x1 <= w):
        _fail("spatial_crop", f"box {attrs['box']} outside spatial extent {h}x{w}")


@register("spatial_crop", 1, _crop_check)
class _Crop:
    @staticmethod
    def forward(xs, attrs):
        y0, x0, y1, x1 = attrs["box"]
        return np.ascontiguousarray(xs[0][..., y0:y1, x0:x1]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        y0, x0, y1, x1 = attrs["box"]
        full = np.zeros_like(xs[0])
        full[..., y0:y1, x0:x1] = g
        return [full]


def _reshape_check(shapes, attrs):
    if int(np.prod(shapes[0])) != int(np.prod(attrs["shape"])):
        _fail("reshape", f"cannot view {shapes[0]} as {attrs['shape']}")


@register("reshape", 1, _reshape_check)
class _Reshape:
    @staticmethod
    def forward(xs, attrs):
        return xs[0].reshape(attrs["shape"]), None

    @staticmethod
    def backward(g, xs, out, saved, attrs, needs):
        return [g.reshape(xs[0].shape)]


# ---------------------------------------------------------------------------
# functional front-end


def add(a, b):
    return forward_op("add", [a, b])


def sub(a, b):
    return forward_op("sub", [a, b])


def scale(a, factor: float):
    return forward_op("scale", [a], {"factor": factor})


def elementwise_mul(a, b):
    return forward_op("elementwise_mul", [a, b])


def div(a, b):
    return forward_op("div", [a, b])


def matmul(a, w, bias=None):
    return forward_op("matmul", [a, w] if bias is None else [a, w, bias])


def conv2d(x, w, bias=None):
    return forward_op("conv2d", [x, w] if bias is None else [x, w, bias])


def maxpool2(x):
    return forward_op("maxpool", [x])


def upsample2(x):
    return forward_op("nearest_upsample", [x])


def relu(x):
    return forward_op("relu", [x])


def sigmoid(x):
    return forward_op("sigmoid", [x])


def softplus(x):
    return forward_op("softplus", [x])


def channel_softmax(x):
    return forward_op("channel_softmax", [x])


def log(x):
    return forward_op("natural_log", [x])


def global_avg_pool(x):
    return forward_op("global_avg_pool", [x])


def channel_concat(a, b):
    return forward_op("channel_concat", [a, b])


def spatial_crop(x, box):
    return forward_op("spatial_crop", [x], {"box": tuple(int(v) for v in box)})


def reshape(x, shape):
    return forward_op("reshape", [x], {"shape": tuple(int(d) for d in shape)})


def sum(x, axes=None):  # noqa: A001 - mirrors numpy naming
    return forward_op("sum", [x], {"axes": None if axes is None else tuple(axes)})


# ---------------------------------------------------------------------------
# backward


class GradMap:
    """Leaf tensor -> gradient array of identical shape."""

    def __init__(self):
        self._grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Tensor] = {}

    def _set(self, leaf: Tensor, grad: np.ndarray) -> None:
        self._grads[id(leaf)] = grad
        self._leaves[id(leaf)] = leaf

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        try:
            return self._grads[id(leaf)]
        except KeyError:
            raise LeafNotOnTapeError(f"no gradient recorded for {leaf!r}") from None

    def get(self, leaf: Tensor, default=None):
        return self._grads.get(id(leaf), default)

    def __contains__(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] | None = None) -> GradMap:
    """Gradients of a scalar ``loss`` with respect to every requires_grad leaf.

    If ``wrt`` is given, each listed leaf must feed some node on the tape.
    """
    if loss.data.size != 1:
        raise NonScalarLossError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if not tape.produced(loss) and not loss.requires_grad:
        raise LeafNotOnTapeError("loss was not produced on this tape")
    seen_inputs: set[int] = set()
    result = GradMap()
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        for t in node.inputs:
            seen_inputs.add(id(t))
        if g is None:
            continue
        needs = [t.requires_grad for t in node.inputs]
        in_grads = OPS[node.kind].backward(
            g, [t.data for t in node.inputs], node.output.data, node.saved, node.attrs, needs
        )
        for t, gi, need in zip(node.inputs, in_grads, needs):
            if not need or gi is None:
                continue
            gi = np.asarray(gi, dtype=t.data.dtype).reshape(t.shape)
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not tape.produced(t):
                leaves[key] = t
    if loss.requires_grad and not tape.produced(loss):
        leaves[id(loss)] = loss
    for key, leaf in leaves.items():
        result._set(leaf, grads[key])
    if wrt is not None:
        for leaf in wrt:
            if id(leaf) not in seen_inputs and leaf is not loss:
                raise LeafNotOnTapeError(f"{leaf!r} does not feed any op on the tape")
    return result


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class CheckReport:
    max_rel_error: list[float]
    tol: float
    names: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error)

    @property
    def failed_leaves(self) -> list[int]:
        return [i for i, e in enumerate(self.max_rel_error) if e > self.tol]

    def __str__(self) -> str:
        rows = [
            f"{self.names[i] if i < len(self.names) else i}: {e:.3e}"
            for i, e in enumerate(self.max_rel_error)
        ]
        return f"{'PASS' if self.passed else 'FAIL'} (tol {self.tol:g}) " + ", ".join(rows)


def relative_error(a: np.ndarray, n: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def numerical_gradient(build_loss, leaves: Sequence[Tensor], index: int, h: float) -> np.ndarray:
    """Central differences of ``build_loss`` w.r.t. one leaf, evaluated in float64."""
    with precision(np.float64), no_tape():
        base = [Tensor(t.data.astype(np.float64)) for t in leaves]
        target = base[index]
        flat = target.data.reshape(-1)
        grad = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = build_loss(*base).item()
            flat[i] = orig - h
            fm = build_loss(*base).item()
            flat[i] = orig
            grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(target.shape)


def grad_check(
    build_loss: Callable[..., Tensor],
    leaves: Sequence[Tensor],
    h: float = 1e-3,
    tol: float = 1e-2,
    replay64: bool = False,
) -> CheckReport:
    """Compare tape gradients with central finite differences.

    ``build_loss(*leaves)`` must be deterministic and construct its graph
    from the tensors it is handed.  Analytic gradients use the leaves' own
    precision, or float64 when ``replay64`` is set; the finite-difference
    oracle is always evaluated in float64.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    dtype = np.float64 if replay64 else leaves[0].data.dtype.type
    with precision(dtype):
        work = [Tensor(t.data.astype(dtype), requires_grad=True) for t in leaves]
        with Tape() as tape:
            loss = build_loss(*work)
        grads = backward(loss, tape)
    errors = []
    for i, leaf in enumerate(work):
        analytic = grads.get(leaf, np.zeros(leaf.shape, dtype=dtype))
        numeric = numerical_gradient(build_loss, leaves, i, h)
        errors.append(float(relative_error(analytic, numeric).max()) if numeric.size else 0.0)
    names = [t.name or f"leaf{i}" for i, t in enumerate(leaves)]
    return CheckReport(errors, tol, names)


# ---------------------------------------------------------------------------
# optimisation


def grad_norm(params, grads: GradMap, frozen=()) -> float:
    """Global L2 norm of the gradients of the non-frozen parameters."""
    total = 0.0
    for name, p in params.items():
        g = grads.get(p)
        if name not in frozen and g is not None:
            total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))


def sgd_step(params, grads: GradMap, lr: float, momentum: float = 0.0, velocity=None, frozen=(),
             clip_norm: float | None = None):
    """One momentum-SGD update, in place.

    ``params`` maps names to leaf tensors; ``velocity`` maps names to arrays
    and is created on first use.  If ``clip_norm`` is set, gradients whose
    global norm exceeds it are rescaled to that norm first.  Returns the
    velocity mapping.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0 <= momentum < 1:
        raise ValueError("momentum must lie in [0, 1)")
    if clip_norm is not None and clip_norm <= 0:
        raise ValueError("clip_norm must be positive")
    velocity = {} if velocity is None else velocity
    checked = {}
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads.get(p)
        if g is None:
            raise LeafNotOnTapeError(f"parameter {name!r} has no gradient and is not frozen")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        checked[name] = g
    factor = 1.0
    if clip_norm is not None:
        norm = grad_norm(params, grads, frozen)
        if norm > clip_norm:
            factor = clip_norm / norm
    updates = {}
    for name, g in checked.items():
        g = g * g.dtype.type(factor) if factor != 1.0 else g
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        updates[name] = v
    for name, v in updates.items():
        p = params[name]
        p.data = (p.data - p.data.dtype.type(lr) * v).astype(p.data.dtype)
        velocity[name] = v.astype(p.data.dtype)
    return velocity

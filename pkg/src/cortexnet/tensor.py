"""Dense tensors and taped reverse-mode differentiation.

Everything above this module moves data as :class:`Tensor` values: video
frames, activations, parameters. Operations record themselves on an explicit
:class:`Tape`; :func:`backward` replays the tape in reverse and accumulates
gradients into leaf tensors. Kernel geometry is fixed at 3x3 / stride 2 /
padding 1 throughout, which is all the block ladder ever needs: the strided
convolution halves spatial extents exactly and its transpose doubles them.

There is deliberately no broadcasting and no dynamic kernel configuration;
shape mismatches raise :class:`ShapeError` instead of being coerced.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class TapeError(RuntimeError):
    """Misuse of the recording tape (consumed twice, loss not on tape, ...)."""


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """A dense n-dimensional array with an optional gradient buffer.

    ``data`` is row-major float32 or float64. Tensors produced by operations
    are value-immutable by convention; parameters are leaves that the
    optimizer updates in place between tapes.
    """

    __slots__ = ("data", "grad", "requires_grad", "_is_leaf")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on a tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Value-identical tensor with no recorded ancestry."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations, replayed in reverse by backward.

    Use as a context manager around the forward computation::

        with Tape() as tape:
            loss = ...
        backward(loss, tape)

    A tape can be consumed by :func:`backward` exactly once.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._out_ids: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self._records.append(_Record(out, inputs, backward_fn))
        self._out_ids.add(id(out))

    def __len__(self) -> int:
        return len(self._records)


class no_grad:
    """Context that suppresses recording (monitoring-only computation)."""

    def __enter__(self) -> "no_grad":
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()


_TAPE_STACK: list[Tape | None] = []


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _make_output(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap op output, recording it when a tape is active and grads flow."""
    tape = _active_tape()
    recording = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=recording)
    if recording:
        out._is_leaf = False
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into .grad of every reachable leaf.

    Traverses the tape once, in reverse execution order. Traversal never
    crosses a detach barrier because detached tensors carry no record.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by a previous backward")
    if id(loss) not in tape._out_ids:
        raise TapeError("loss was not produced on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape._records):
        g_out = grads.pop(id(rec.out), None)
        if g_out is None:
            continue
        in_grads = rec.backward_fn(g_out)
        for inp, g in zip(rec.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if inp._is_leaf:
                inp.accumulate_grad(g)
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g


# ---------------------------------------------------------------------------
# im2col plumbing (kernel 3, stride 2, padding 1 fixed by callers)
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """(B,C,H,W) -> (B*oh*ow, C*k*k) patch matrix."""
    b, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    col = np.empty((b, c, k, k, oh, ow), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            col[:, :, i, j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(b * oh * ow, c * k * k)


def _col2im(col: np.ndarray, shape: tuple[int, int, int, int], k: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back to (B,C,H,W)."""
    b, c, h, w = shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    col6 = col.reshape(b, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += col6[:, :, i, j]
    return xp[:, :, pad : h + pad, pad : w + pad]


def _lift_batch(t: Tensor, ndim: int) -> tuple[np.ndarray, bool]:
    """Return (4d-or-2d view, had_batch_dim)."""
    if t.ndim == ndim:
        return t.data, True
    if t.ndim == ndim - 1:
        return t.data[None], False
    raise ShapeError(f"expected {ndim - 1}d or {ndim}d input, got shape {t.shape}")


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Strided convolution: 3x3 kernel, stride 2, four-sided padding 1.

    Input (B,C_in,H,W) or (C_in,H,W) with H, W even; output spatial extents
    are exactly halved. Weight is (C_out,C_in,3,3), bias (C_out,).
    """
    xb, batched = _lift_batch(x, 4)
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d weight must be (C_out,C_in,3,3), got {weight.shape}")
    c_out, c_in = weight.shape[:2]
    b, c, h, w = xb.shape
    if c != c_in:
        raise ShapeError(f"conv2d input has {c} channels, weight expects {c_in}")
    if h < 2 or w < 2 or h % 2 or w % 2:
        raise ShapeError(f"conv2d needs even spatial extents >= 2, got {h}x{w}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must be ({c_out},), got {bias.shape}")

    oh, ow = h // 2, w // 2
    col = _im2col(xb, 3, 2, 1)
    w_col = weight.data.reshape(c_out, c_in * 9)
    out = col @ w_col.T + bias.data
    out = np.ascontiguousarray(out.reshape(b, oh, ow, c_out).transpose(0, 3, 1, 2))
    if not batched:
        out = out[0]

    def bw(g: np.ndarray):
        g4 = g if batched else g[None]
        g_r = g4.transpose(0, 2, 3, 1).reshape(-1, c_out)
        col_b = _im2col(xb, 3, 2, 1)
        d_w = (g_r.T @ col_b).reshape(weight.shape)
        d_b = g_r.sum(axis=0)
        d_x = _col2im(g_r @ w_col, (b, c, h, w), 3, 2, 1)
        if not batched:
            d_x = d_x[0]
        return d_x, d_w, d_b

    return _make_output(out, (x, weight, bias), bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Transposed strided convolution: exact adjoint of :func:`conv2d`.

    Input (B,C_in,H,W) or (C_in,H,W); output spatial extents are exactly
    doubled. Weight is (C_in,C_out,3,3), bias (C_out,). By construction
    <conv2d(u; W), v> == <u, conv_transpose2d(v; W)> for matching shapes.
    """
    xb, batched = _lift_batch(x, 4)
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ShapeError(f"conv_transpose2d weight must be (C_in,C_out,3,3), got {weight.shape}")
    c_in, c_out = weight.shape[:2]
    b, c, h, w = xb.shape
    if c != c_in:
        raise ShapeError(f"conv_transpose2d input has {c} channels, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv_transpose2d bias must be ({c_out},), got {bias.shape}")

    oh, ow = 2 * h, 2 * w
    v_r = xb.transpose(0, 2, 3, 1).reshape(b * h * w, c_in)
    w_col = weight.data.reshape(c_in, c_out * 9)
    out = _col2im(v_r @ w_col, (b, c_out, oh, ow), 3, 2, 1)
    out += bias.data[None, :, None, None]
    if not batched:
        out = out[0]

    def bw(g: np.ndarray):
        g4 = g if batched else g[None]
        g_col = _im2col(g4, 3, 2, 1)  # (b*h*w, c_out*9)
        d_x = (g_col @ w_col.T).reshape(b, h, w, c_in).transpose(0, 3, 1, 2)
        d_w = (v_r.T @ g_col).reshape(weight.shape)
        d_b = g4.sum(axis=(0, 2, 3))
        if not batched:
            d_x = d_x[0]
        return np.ascontiguousarray(d_x), d_w, d_b

    return _make_output(out, (x, weight, bias), bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); subgradient at 0 is 0."""
    out = np.maximum(x.data, 0)

    def bw(g: np.ndarray):
        return ((x.data > 0) * g,)

    return _make_output(out, (x,), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of identically shaped tensors."""
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def bw(g: np.ndarray):
        return g, g

    return _make_output(out, (a, b), bw)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis of (..,C,H,W) tensors."""
    if a.ndim != b.ndim or a.ndim not in (3, 4):
        raise ShapeError(f"concat_channels needs matching 3d/4d tensors, got {a.shape} and {b.shape}")
    axis = a.ndim - 3
    if a.shape[:axis] != b.shape[:axis] or a.shape[axis + 1 :] != b.shape[axis + 1 :]:
        raise ShapeError(f"concat_channels extent mismatch: {a.shape} vs {b.shape}")
    c1 = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def bw(g: np.ndarray):
        ga, gb = np.split(g, [c1], axis=axis)
        return ga, gb

    return _make_output(out, (a, b), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over each HxW plane of a (..,C,H,W) tensor -> (..,C)."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool needs a 3d/4d tensor, got {x.shape}")
    h, w = x.shape[-2:]
    out = x.data.mean(axis=(-2, -1))

    def bw(g: np.ndarray):
        gx = np.broadcast_to(g[..., None, None], x.shape) / (h * w)
        return (gx.astype(x.dtype, copy=False),)

    return _make_output(out, (x,), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map weight @ x + bias for (F,) or (B,F) inputs; weight (K,F)."""
    if weight.ndim != 2:
        raise ShapeError(f"linear weight must be 2d, got {weight.shape}")
    k, f = weight.shape
    if x.ndim not in (1, 2) or x.shape[-1] != f:
        raise ShapeError(f"linear input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (k,):
        raise ShapeError(f"linear bias must be ({k},), got {bias.shape}")
    out = x.data @ weight.data.T + bias.data

    def bw(g: np.ndarray):
        if x.ndim == 1:
            return g @ weight.data, np.outer(g, x.data), g
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make_output(out, (x, weight, bias), bw)


def softmax(x: Tensor) -> Tensor:
    """Stable softmax over the last axis: positive, sums to 1, shift-invariant."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g: np.ndarray):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _make_output(out, (x,), bw)


def feature_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample normalization over (C,H,W) with per-channel affine.

    Each batch row is standardized by its own statistics, so rows never
    couple: perturbing one sample cannot change any other sample's output.
    gamma/beta have shape (C,).
    """
    if x.ndim != 4:
        raise ShapeError(f"feature_norm expects (B,C,H,W), got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"feature_norm affine must be ({c},)")
    red = (1, 2, 3)
    mu = x.data.mean(axis=red, keepdims=True)
    var = x.data.var(axis=red, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g: np.ndarray):
        dxhat = g * gamma.data[None, :, None, None]
        m1 = dxhat.mean(axis=red, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=red, keepdims=True)
        d_x = (dxhat - m1 - xhat * m2) * inv
        d_gamma = (g * xhat).sum(axis=(0, 2, 3))
        d_beta = g.sum(axis=(0, 2, 3))
        return d_x.astype(x.dtype, copy=False), d_gamma, d_beta

    return _make_output(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# Reductions, losses, structural ops
# ---------------------------------------------------------------------------


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar coefficient."""
    c = float(c)
    out = x.data * np.asarray(c, dtype=x.dtype)

    def bw(g: np.ndarray):
        return (g * c,)

    return _make_output(out, (x,), bw)


def sum_all(x: Tensor) -> Tensor:
    """Sum of every element -> scalar tensor."""
    out = x.data.sum()

    def bw(g: np.ndarray):
        return (np.full_like(x.data, g),)

    return _make_output(np.asarray(out, dtype=x.dtype), (x,), bw)


def select_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Keep the first-axis rows where a boolean mask is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ShapeError(f"row mask of length {mask.shape} for first extent {x.shape[0]}")
    idx = np.flatnonzero(mask)
    out = x.data[idx]

    def bw(g: np.ndarray):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _make_output(out, (x,), bw)


def zero_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Zero the first-axis rows where the mask is true; other rows pass through.

    Gradient for a zeroed row is exactly zero, so history behind a reset row
    receives nothing.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (x.shape[0],):
        raise ShapeError(f"row mask of length {mask.shape} for first extent {x.shape[0]}")
    out = x.data.copy()
    out[mask] = 0

    def bw(g: np.ndarray):
        gx = g.copy()
        gx[mask] = 0
        return (gx,)

    return _make_output(out, (x,), bw)


def detach(x: Tensor) -> Tensor:
    """Hard gradient barrier; see :meth:`Tensor.detach`."""
    return x.detach()


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over every element (batch included in the count)."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = max(diff.size, 1)
    out = np.asarray((diff * diff).sum() / n, dtype=a.dtype)

    def bw(g: np.ndarray):
        gd = (2.0 / n) * diff * g
        return gd, -gd

    return _make_output(out, (a, b), bw)


def cross_entropy(logits: Tensor, classes, weights: np.ndarray | None = None) -> Tensor:
    """Weighted cross entropy with a plain mean over the batch.

    ``classes`` is an int array of target indices; ``weights`` an optional
    per-class weight vector (None = all ones). Computed through a
    numerically stable log-softmax. Accepts (K,) or (B,K) logits.
    """
    lb, batched = _lift_batch(logits, 2)
    b, k = lb.shape
    idx = np.atleast_1d(np.asarray(classes, dtype=np.int64))
    if idx.shape != (b,):
        raise ShapeError(f"expected {b} class indices, got shape {idx.shape}")
    if idx.min() < 0 or idx.max() >= k:
        raise ValueError(f"class index out of range [0, {k})")
    if weights is None:
        w_c = np.ones(b, dtype=lb.dtype)
    else:
        weights = np.asarray(weights, dtype=lb.dtype)
        if weights.shape != (k,):
            raise ShapeError(f"weights must have shape ({k},), got {weights.shape}")
        w_c = weights[idx]

    z = lb - lb.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(b)
    out = np.asarray(-(w_c * logp[rows, idx]).mean(), dtype=lb.dtype)

    def bw(g: np.ndarray):
        p = np.exp(logp)
        d = p * w_c[:, None]
        d[rows, idx] -= w_c
        d *= g / b
        return (d if batched else d[0],)

    return _make_output(out, (logits,), bw)


def combine(terms: Sequence[tuple[Tensor, float]]) -> Tensor | None:
    """Weighted sum of scalar tensors; terms with zero weight are skipped
    entirely so they contribute no recorded operations."""
    acc: Tensor | None = None
    for t, w in terms:
        if t is None or w == 0.0:
            continue
        piece = scale(t, w) if w != 1.0 else t
        acc = piece if acc is None else add(acc, piece)
    return acc


def as_tensor(data, dtype=None) -> Tensor:
    """Constant (non-differentiable) tensor from array-like data."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(data, requires_grad=True, dtype=dtype)


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """Weight initialization: uniform in +-1/sqrt(fan_in), as a parameter."""
    bound = 1.0 / np.sqrt(fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape).astype(dtype))

"""Dense tensors with reverse-mode automatic differentiation.

Everything is backed by numpy arrays. Training runs in float32; gradient
checking builds the same graphs in float64 because central differences are
unreliable at single precision. Arrays keep whatever float dtype they were
created with and operations never silently change it.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A node in the compute graph: a value plus how to push gradients back.

    Leaf tensors with ``requires_grad=True`` are the trainable parameters;
    everything produced by an operation records its parents and a backward
    closure. A graph is confined to one thread for the duration of a
    forward/backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; scalars are accepted on either side
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# graph traversal


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every tensor that ``loss`` depends on.

    ``loss`` must be a scalar. Gradients accumulate additively across
    fan-out, and every node is visited exactly once in reverse topological
    order (iterative, so deep recurrent graphs do not hit the recursion
    limit).
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    def back(g):
        if a.requires_grad:
            _accumulate(a, -g)

    return _make(-a.data, (a,), back)


def tsum(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""

    def back(g):
        if a.requires_grad:
            _accumulate(a, np.full_like(a.data, g))

    return _make(a.data.sum(), (a,), back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``a`` (m, k) and 2-D ``b`` (k, n)."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _make(data, (a, b), back)


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def back(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), back)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    extents = [p.shape[axis] for p in parts]

    def back(g):
        offset = 0
        for p, extent in zip(parts, extents):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis if axis >= 0 else g.ndim + axis] = slice(offset, offset + extent)
                _accumulate(p, g[tuple(idx)])
            offset += extent

    return _make(data, parts, back)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.stack([p.data for p in parts], axis=axis)

    def back(g):
        slabs = np.split(g, len(parts), axis=axis)
        for p, slab in zip(parts, slabs):
            if p.requires_grad:
                _accumulate(p, slab.reshape(p.shape))

    return _make(data, parts, back)


def select(a: Tensor, axis: int, index: int) -> Tensor:
    """Pick one slice along ``axis`` (the axis is removed)."""
    data = np.take(a.data, index, axis=axis)

    def back(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            idx = [slice(None)] * a.data.ndim
            idx[axis] = index
            full[tuple(idx)] = g
            _accumulate(a, full)

    return _make(data, (a,), back)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Row lookup ``table[indices]`` with scatter-add backward.

    ``indices`` is an integer array of any shape; the result has shape
    ``indices.shape + (row_dim,)``. Repeated indices accumulate gradient.
    """
    indices = np.asarray(indices)
    data = table.data[indices]

    def back(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, indices.reshape(-1), g.reshape(-1, table.shape[1]))
            _accumulate(table, full)

    return _make(data, (table,), back)


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * mask)

    return _make(np.maximum(a.data, 0), (a,), back)


def sigmoid(a: Tensor) -> Tensor:
    # split by sign to avoid exp overflow on large negative inputs
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * out * (1.0 - out))

    return _make(out, (a,), back)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def back(g):
        if a.requires_grad:
            _accumulate(a, g * (1.0 - out * out))

    return _make(out, (a,), back)


def activation(a: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity by name: relu, sigmoid or tanh."""
    try:
        return {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


# ---------------------------------------------------------------------------
# convolution and pooling (channels-last layout)


def _same_pad(extent: int, k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def conv2d(inp: Tensor, kernels: Tensor, padding: str = "same") -> Tensor:
    """2-D cross-correlation.

    ``inp`` is (h, w, c_in) or batched (b, h, w, c_in); ``kernels`` is
    (kh, kw, c_in, c_out). ``same`` zero-pads to preserve h and w; ``valid``
    yields (h - kh + 1, w - kw + 1).
    """
    if padding not in ("same", "valid"):
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if kernels.ndim != 4:
        raise ShapeError(f"kernels must be 4-D (kh, kw, c_in, c_out), got {kernels.shape}")
    squeeze = inp.ndim == 3
    x = inp.data[None] if squeeze else inp.data
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 3-D or 4-D, got {inp.shape}")
    kh, kw, c_in, c_out = kernels.shape
    if x.shape[3] != c_in:
        raise ShapeError(f"input channels {x.shape[3]} != kernel channels {c_in}")

    if padding == "same":
        pt, pb = _same_pad(x.shape[1], kh)
        pl, pr = _same_pad(x.shape[2], kw)
    else:
        pt = pb = pl = pr = 0
    padded = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    ho = padded.shape[1] - kh + 1
    wo = padded.shape[2] - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"kernel {kh}x{kw} larger than padded input {padded.shape[1]}x{padded.shape[2]}"
        )

    out = np.zeros((x.shape[0], ho, wo, c_out), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += padded[:, i : i + ho, j : j + wo, :] @ kernels.data[i, j]

    def back(g):
        g4 = g[None] if squeeze else g
        if kernels.requires_grad:
            dk = np.zeros_like(kernels.data)
            for i in range(kh):
                for j in range(kw):
                    patch = padded[:, i : i + ho, j : j + wo, :]
                    dk[i, j] = np.tensordot(patch, g4, axes=([0, 1, 2], [0, 1, 2]))
            _accumulate(kernels, dk)
        if inp.requires_grad:
            dpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    dpad[:, i : i + ho, j : j + wo, :] += g4 @ kernels.data[i, j].T
            dx = dpad[:, pt : dpad.shape[1] - pb, pl : dpad.shape[2] - pr, :]
            _accumulate(inp, dx[0] if squeeze else dx)

    return _make(out[0] if squeeze else out, (inp, kernels), back)


def maxpool2d(inp: Tensor) -> Tensor:
    """2x2 max pooling with ceil semantics: odd extents are padded with -inf.

    Backward routes each window's gradient to the first (row-major) argmax.
    """
    squeeze = inp.ndim == 3
    x = inp.data[None] if squeeze else inp.data
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d input must be 3-D or 4-D, got {inp.shape}")
    b, h, w, c = x.shape
    if h < 1 or w < 1:
        raise ShapeError("maxpool2d input has an empty spatial extent")
    ho, wo = -(-h // 2), -(-w // 2)
    padded = np.full((b, ho * 2, wo * 2, c), -np.inf, dtype=x.dtype)
    padded[:, :h, :w, :] = x
    # windows laid out row-major: (0,0), (0,1), (1,0), (1,1)
    win = (
        padded.reshape(b, ho, 2, wo, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, ho, wo, 4, c)
    )
    arg = np.argmax(win, axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]

    def back(g):
        g4 = g[None] if squeeze else g
        scat = np.zeros_like(win)
        np.put_along_axis(scat, arg[:, :, :, None, :], g4[:, :, :, None, :], axis=3)
        dpad = (
            scat.reshape(b, ho, wo, 2, 2, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, ho * 2, wo * 2, c)
        )
        dx = dpad[:, :h, :w, :]
        _accumulate(inp, dx[0] if squeeze else dx)

    return _make(out[0] if squeeze else out, (inp,), back)


# ---------------------------------------------------------------------------
# normalisation, dropout, loss


def stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax on a plain array; sums to 1 along ``axis``."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_xent(
    logits: Tensor,
    gold: Union[int, np.ndarray],
    weights: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean categorical cross-entropy with a numerically stable softmax.

    ``logits`` is (n_classes,) with an integer ``gold``, or (n, n_classes)
    with ``gold`` of shape (n,). ``weights`` (same shape as gold) scales each
    row's contribution; the loss is the weighted mean, and the gradient is
    softmax(logits) - onehot(gold) row-scaled accordingly.
    """
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_xent expects 1-D or 2-D logits, got {logits.shape}")
    n, c = z.shape
    if c < 2:
        raise ValueError(f"softmax_xent needs at least 2 classes, got {c}")
    idx = np.atleast_1d(np.asarray(gold, dtype=np.int64))
    if idx.shape != (n,):
        raise ShapeError(f"gold shape {idx.shape} does not match {n} logit rows")
    if np.any(idx < 0) or np.any(idx >= c):
        bad = idx[(idx < 0) | (idx >= c)][0]
        raise IndexError(f"gold class {bad} out of range for {c} classes")

    if weights is None:
        w = np.ones(n, dtype=z.dtype)
    else:
        w = np.asarray(weights, dtype=z.dtype).reshape(n)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("softmax_xent weights sum to zero")

    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    nll = logsumexp - shifted[np.arange(n), idx]
    loss = (nll * w).sum() / denom

    def back(g):
        if logits.requires_grad:
            probs = stable_softmax(z, axis=1)
            probs[np.arange(n), idx] -= 1.0
            dz = probs * (w / denom)[:, None] * g
            _accumulate(logits, dz[0] if single else dz)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), back)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.9,
) -> Tensor:
    """Normalise over all axes but the last (the feature/channel axis).

    Train mode normalises by batch statistics and updates the running
    buffers in place (``running = momentum * running + (1 - momentum) *
    batch``); eval mode is a deterministic function of the running buffers.
    """
    axes = tuple(range(x.data.ndim - 1))
    count = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
    if train:
        if count < 2:
            raise ValueError("batch_norm in train mode needs at least 2 values per feature")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = gamma.data * xhat + beta.data

    def back(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=axes))
        if x.requires_grad:
            if train:
                # full gradient through the batch mean and variance
                gm = g.mean(axis=axes)
                gxm = (g * xhat).mean(axis=axes)
                dx = gamma.data * inv_std * (g - gm - xhat * gxm)
            else:
                dx = g * gamma.data * inv_std
            _accumulate(x, dx)

    return _make(out, (x, gamma, beta), back)


def dropout(x: Tensor, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and scale survivors by
    1/(1-p) in train mode; the exact identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)

    def back(g):
        if x.requires_grad:
            _accumulate(x, g * keep * scale)

    return _make(x.data * keep * scale, (x,), back)


# ---------------------------------------------------------------------------
# gradient checking


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    max_coords_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Compare backward() gradients of ``f()`` against central differences.

    ``f`` rebuilds the scalar loss from the current parameter values and must
    be deterministic. Returns the max relative error over all checked
    coordinates, with denominator max(|analytic|, |numeric|, 1e-8).
    ``max_coords_per_param`` subsamples coordinates of large parameters.
    Use float64 parameters; float32 finite differences are meaningless.
    """
    zero_grads(params)
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p, ref in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        else:
            coords = range(n)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = ref.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst

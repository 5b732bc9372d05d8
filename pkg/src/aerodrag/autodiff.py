"""Minimal reverse-mode differentiation for the RegDGCNN operator set.

Only the operators the network needs are provided, each with a hand-written
backward rule. Features are channel-last: the channel axis is always the
last one, and any leading axes (batch, points, neighbours) are carried
through.

Recording happens on the active :class:`Tape`::

    with Tape() as tape:
        loss = mse_loss(model(x), y)
    tape.backward(loss)

Conventions: LeakyReLU uses the negative-side slope as its subgradient at 0,
and max reductions send the gradient to the first maximal slot.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BatchTooSmall(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = g.astype(t.data.dtype, copy=False)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; backward replays it in reverse."""

    def __init__(self, check_finite: bool = False):
        self.records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self.check_finite = check_finite

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if loss.data.size != 1:
                raise ShapeMismatch("backward without an explicit gradient needs a scalar")
            grad = np.ones_like(loss.data)
        loss.grad = np.asarray(grad, dtype=loss.dtype).copy()
        for out, fn in reversed(self.records):
            if out.grad is not None:
                fn(out.grad)


def _record(out: Tensor, inputs: Sequence[Tensor], fn) -> Tensor:
    tape = _ACTIVE[-1] if _ACTIVE else None
    if tape is not None and tape.check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError("non-finite values produced during a recorded forward pass")
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.records.append((out, fn))
    return out


# ------------------------------------------------------------------ ops


def pointwise_linear(X: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-point affine map ``X @ W + b`` along the channel axis (kernel-size-1 conv)."""
    X, W = as_tensor(X), as_tensor(W)
    if X.shape[-1] != W.shape[0]:
        raise ShapeMismatch(f"input has {X.shape[-1]} channels, weight expects {W.shape[0]}")
    if b is not None and as_tensor(b).shape != (W.shape[1],):
        raise ShapeMismatch("bias length must equal output channels")
    out_data = X.data @ W.data
    if b is not None:
        b = as_tensor(b)
        out_data = out_data + b.data
    out = Tensor(out_data)

    def backward(g):
        cin, cout = W.shape
        _accum(X, g @ W.data.T)
        _accum(W, X.data.reshape(-1, cin).T @ g.reshape(-1, cout))
        if b is not None:
            _accum(b, g.reshape(-1, cout).sum(axis=0))

    return _record(out, [X, W] + ([b] if b is not None else []), backward)


def leaky_relu(X: Tensor, slope: float = 0.2) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError("slope must lie in (0, 1)")
    X = as_tensor(X)
    # valid because slope < 1
    out = Tensor(np.maximum(X.data, slope * X.data))

    def backward(g):
        _accum(X, np.where(X.data > 0, g, slope * g))

    return _record(out, [X], backward)


def batch_norm(
    X: Tensor,
    gamma: Tensor | None,
    beta: Tensor | None,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each channel over every non-channel axis.

    In training mode the batch statistics are used and the running buffers
    are updated in place (the running variance uses the unbiased estimate).
    In inference mode the running buffers are used unchanged.
    """
    X = as_tensor(X)
    c = X.shape[-1]
    if running_mean.shape != (c,) or (gamma is not None and gamma.shape != (c,)):
        raise ShapeMismatch(f"batch_norm parameters do not match {c} channels")
    axes = tuple(range(X.data.ndim - 1))
    count = X.data.size // c
    if training:
        if count < 2:
            raise BatchTooSmall("training-mode batch_norm needs more than one value per channel")
        mean = X.data.mean(axis=axes)
        var = X.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * count / (count - 1)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (X.data - mean) * inv_std
    g_data = gamma.data if gamma is not None else 1.0
    out = Tensor((xhat * g_data + (beta.data if beta is not None else 0.0)).astype(X.dtype, copy=False))

    def backward(g):
        if gamma is not None:
            _accum(gamma, (g * xhat).sum(axis=axes))
        if beta is not None:
            _accum(beta, g.sum(axis=axes))
        dxhat = g * g_data
        if training:
            dx = (
                count * dxhat
                - dxhat.sum(axis=axes)
                - xhat * (dxhat * xhat).sum(axis=axes)
            ) * (inv_std / count)
        else:
            dx = dxhat * inv_std
        _accum(X, dx)

    params = [p for p in (gamma, beta) if p is not None]
    return _record(out, [X] + params, backward)


def _max_over(X: Tensor, axis: int) -> Tensor:
    X = as_tensor(X)
    arg = np.expand_dims(np.argmax(X.data, axis=axis), axis)
    out = Tensor(np.take_along_axis(X.data, arg, axis=axis).squeeze(axis))

    def backward(g):
        dx = np.zeros_like(X.data)
        np.put_along_axis(dx, arg, np.expand_dims(g, axis), axis=axis)
        _accum(X, dx)

    return _record(out, [X], backward)


def neighborhood_max_pool(H: Tensor) -> Tensor:
    """(..., n, k, c) -> (..., n, c): max over each point's k edge slots."""
    if as_tensor(H).data.ndim < 3:
        raise ShapeMismatch("neighborhood_max_pool expects (..., n, k, c)")
    return _max_over(H, -2)


def global_max_pool(X: Tensor) -> Tensor:
    """(..., n, c) -> (..., c): per-channel max over all points."""
    return _max_over(X, -2)


def dropout(X: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Identity when ``p == 0`` or outside training."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    X = as_tensor(X)
    if not training or p == 0.0:
        return X
    keep = rng.random(X.shape) >= p
    scale = keep * (1.0 / (1.0 - p))
    out = Tensor((X.data * scale).astype(X.dtype, copy=False))

    def backward(g):
        _accum(X, g * scale)

    return _record(out, [X], backward)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    lead = xs[0].shape[:-1]
    if any(x.shape[:-1] != lead for x in xs):
        raise ShapeMismatch("concat_channels inputs disagree on leading dimensions")
    out = Tensor(np.concatenate([x.data for x in xs], axis=-1))
    splits = np.cumsum([x.shape[-1] for x in xs])[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, splits, axis=-1)):
            _accum(x, part)

    return _record(out, xs, backward)


def mse_loss(pred: Tensor, target) -> Tensor:
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} vs target {target.shape}")
    if pred.data.size == 0:
        raise ShapeMismatch("mse_loss needs at least one value")
    diff = pred.data - target
    m = diff.size
    out = Tensor(np.asarray((diff * diff).sum() / m, dtype=pred.dtype))

    def backward(g):
        _accum(pred, g * (2.0 / m) * diff)

    return _record(out, [pred], backward)


def _scatter_rows(G: np.ndarray, idx: np.ndarray, n: int) -> np.ndarray:
    """S[..., m, :] = sum of G[..., i, j, :] over slots with idx[..., i, j] == m."""
    lead = idx.shape[:-2]
    B = int(np.prod(lead)) if lead else 1
    c = G.shape[-1]
    flat = (idx.reshape(B, -1) + (np.arange(B) * n)[:, None]).reshape(-1)
    S = np.zeros((B * n, c), dtype=G.dtype)
    np.add.at(S, flat, G.reshape(-1, c))
    return S.reshape(*lead, n, c)


def _gather_rows(X: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """X: (..., n, c), idx: (..., n, k) -> (..., n, k, c)."""
    lead = idx.shape[:-2]
    n, k = idx.shape[-2:]
    flat = idx.reshape(*lead, n * k, 1)
    return np.take_along_axis(X, flat, axis=-2).reshape(*lead, n, k, X.shape[-1])


def edge_features(X: Tensor, idx: np.ndarray) -> Tensor:
    """Edge tensor ``[x_i, x_j - x_i]`` for each neighbour j of i.

    X: (..., n, c); idx: (..., n, k) neighbour indices into the same n rows.
    Returns (..., n, k, 2c).
    """
    X = as_tensor(X)
    idx = np.asarray(idx)
    if idx.shape[:-1] != X.shape[:-1]:
        raise ShapeMismatch(f"graph over {idx.shape[:-1]} rows, features have {X.shape[:-1]}")
    center = np.broadcast_to(X.data[..., :, None, :], idx.shape + (X.shape[-1],))
    neigh = _gather_rows(X.data, idx)
    out = Tensor(np.concatenate([center, neigh - center], axis=-1))
    c = X.shape[-1]

    def backward(g):
        g_center, g_rel = g[..., :c], g[..., c:]
        dx = g_center.sum(axis=-2) - g_rel.sum(axis=-2)
        dx += _scatter_rows(g_rel, idx, X.shape[-2])
        _accum(X, dx)

    return _record(out, [X], backward)


def edge_linear(X: Tensor, idx: np.ndarray, W: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused ``pointwise_linear(edge_features(X, idx), W, b)``.

    With W split into its centre half W_c and offset half W_o, each edge
    response is ``x_i (W_c - W_o) + x_j W_o + b``; the two matrix products
    are taken per point and then gathered, which saves a factor of k.
    """
    X, W = as_tensor(X), as_tensor(W)
    idx = np.asarray(idx)
    c = X.shape[-1]
    if W.shape[0] != 2 * c:
        raise ShapeMismatch(f"edge weight expects {W.shape[0] // 2} channels, got {c}")
    if idx.shape[:-1] != X.shape[:-1]:
        raise ShapeMismatch(f"graph over {idx.shape[:-1]} rows, features have {X.shape[:-1]}")
    Wc, Wo = W.data[:c], W.data[c:]
    A = Wc - Wo
    self_part = X.data @ A
    neigh_part = X.data @ Wo
    out_data = self_part[..., :, None, :] + _gather_rows(neigh_part, idx)
    if b is not None:
        b = as_tensor(b)
        out_data = out_data + b.data
    out = Tensor(out_data)

    def backward(g):
        cout = W.shape[1]
        g_self = g.sum(axis=-2)
        S = _scatter_rows(g, idx, X.shape[-2])
        x2 = X.data.reshape(-1, c)
        dA = x2.T @ g_self.reshape(-1, cout)
        dWo = x2.T @ S.reshape(-1, cout)
        _accum(W, np.concatenate([dA, dWo - dA], axis=0))
        _accum(X, g_self @ A.T + S @ Wo.T)
        if b is not None:
            _accum(b, g.reshape(-1, cout).sum(axis=0))

    return _record(out, [X, W] + ([b] if b is not None else []), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"add of {a.shape} and {b.shape}")
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, [a, b], backward)


def scale(a: Tensor, factor: float) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data * factor)
    return _record(out, [a], lambda g: _accum(a, g * factor))


def total(a: Tensor) -> Tensor:
    """Sum of every element, as a 0-d tensor."""
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    return _record(out, [a], lambda g: _accum(a, np.broadcast_to(g, a.shape)))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, [a], lambda g: _accum(a, g.reshape(a.shape)))

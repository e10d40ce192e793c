"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are plain functions over :class:`Tensor` values. When a :class:`Tape`
is active on the current thread, every operation whose inputs require a
gradient appends one node to it; :meth:`Tape.gradient` then replays the
recorded adjoints in reverse order. Tapes are thread-local, so independent
evaluations can run concurrently.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, InputError, NumericalError

__all__ = [
    "Tensor",
    "Tape",
    "add",
    "scale",
    "reshape",
    "concat",
    "relu",
    "dense",
    "conv2d",
    "max_pool2d",
    "upsample_nearest",
    "global_max_pool",
    "dropout",
    "softmax",
    "softmax_cross_entropy",
    "l2_reconstruction_loss",
    "numeric_gradient",
    "grad_check",
]

_local = threading.local()


class Tensor:
    """An immutable dense array of doubles.

    ``requires_grad`` marks values the tape should differentiate through;
    leaves created with ``requires_grad=True`` are the parameters a caller
    asks :meth:`Tape.gradient` about.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, which is a topological order of
    the computation graph; the backward sweep simply walks them in reverse.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        self._nodes.append((out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of the scalar ``target`` with respect to each source.

        Sources the target does not depend on receive zeros. Gradients of a
        value used several times are summed.
        """
        if target.size != 1:
            raise InputError(f"gradient target must be a scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        wanted = {id(s) for s in sources}
        for out, inputs, backward in reversed(self._nodes):
            g = grads.get(id(out))
            if g is None:
                continue
            if id(out) not in wanted:
                del grads[id(out)]
            for inp, gi in zip(inputs, backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by {op}")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    if requires:
        tape = _active_tape()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


# -- elementwise and structural -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise InputError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise InputError("concat of zero tensors")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


# -- layers -----------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape [B, in], ``weight`` [out, in]."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ConfigurationError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data

    def backward(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _result(xd @ wd.T + bias.data, (x, weight, bias), backward, "dense")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with zero same-padding.

    ``x`` is [B, C, H, W], ``weight`` is [C', C, k, k] with odd ``k``; the
    output is [B, C', H, W]. Implemented as cross-correlation (no kernel
    flip), the usual deep-learning convention.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(f"conv2d: expected 4-d input and weight, got {x.shape}, {weight.shape}")
    out_c, in_c, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel must be square and odd-sized, got {kh}x{kw}")
    if x.shape[1] != in_c:
        raise ConfigurationError(f"conv2d: input has {x.shape[1]} channels, kernel expects {in_c}")
    if bias.shape != (out_c,):
        raise ConfigurationError(f"conv2d: bias {bias.shape} does not match {out_c} output channels")
    b, c, h, w = x.shape
    k, p = kh, kh // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    # cols: [B*H*W, C*k*k]
    cols = sliding_window_view(xp, (k, k), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * k * k)
    wmat = weight.data.reshape(out_c, -1)
    out = (cols @ wmat.T).reshape(b, h, w, out_c).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * h * w, out_c)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3))
        dcols = (gmat @ wmat).reshape(b, h, w, c, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gxp[:, :, p:p + h, p:p + w], gw, gb

    return _result(np.ascontiguousarray(out), (x, weight, bias), backward, "conv2d")


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; the stride equals the window.

    On ties the first element of the window in row-major order receives the
    gradient.
    """
    b, c, h, w = x.shape
    if h % size or w % size:
        raise ConfigurationError(f"max_pool2d: spatial extent {h}x{w} not divisible by {size}")
    ho, wo = h // size, w // size
    win = x.data.reshape(b, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, size * size)
    idx = win.argmax(axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        gx = gw.reshape(b, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return _result(out, (x,), backward, "max_pool2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor == 1:
        return x
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample_nearest")


def global_max_pool(x: Tensor) -> Tensor:
    """Reduce [B, C, H, W] to [B, C] by the spatial maximum."""
    if x.data.ndim != 4:
        raise ConfigurationError(f"global_max_pool: expected 4-d input, got {x.shape}")
    b, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ConfigurationError("global_max_pool: empty spatial extent")
    flat = x.data.reshape(b, c, h * w)
    idx = flat.argmax(axis=-1)[..., None]
    out = np.take_along_axis(flat, idx, axis=-1)[..., 0]

    def backward(g):
        gf = np.zeros_like(flat)
        np.put_along_axis(gf, idx, g[..., None], axis=-1)
        return (gf.reshape(b, c, h, w),)

    return _result(out, (x,), backward, "global_max_pool")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)`` at train time."""
    if not 0.0 <= rate < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- losses -----------------------------------------------------------------------


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Row-wise softmax with max subtraction. Plain numpy, not recorded."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise InputError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    b, n = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise InputError(f"label out of range [0, {n})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(logsum - z[rows, labels])

    def backward(g):
        grad = softmax(logits.data)
        grad[rows, labels] -= 1.0
        return (grad * (g / b),)

    return _result(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


def l2_reconstruction_loss(x: Tensor, recon: Tensor) -> Tensor:
    """Batch mean of ``||x - recon||^2`` divided by the per-sample element count."""
    if x.shape != recon.shape:
        raise InputError(f"l2_reconstruction_loss: shape mismatch {x.shape} vs {recon.shape}")
    diff = x.data - recon.data
    count = diff.size
    loss = np.sum(diff * diff) / count

    def backward(g):
        gd = diff * (2.0 * g / count)
        return gd, -gd

    return _result(np.asarray(loss), (x, recon), backward, "l2_reconstruction_loss")


# -- gradient checking ------------------------------------------------------------


def numeric_gradient(fn: Callable[[dict], Tensor], params: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of a scalar-valued ``fn`` for every parameter element."""
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name, arr in base.items():
        grad = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig - h
            fm = fn({k: Tensor(v) for k, v in base.items()}).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out[name] = grad
    return out


def grad_check(fn: Callable[[dict], Tensor], params: dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Largest relative disagreement between tape and finite-difference gradients.

    ``fn`` maps a dict of tensors to a scalar tensor and must be deterministic
    (dropout disabled). The error per element is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    leaves = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        loss = fn(leaves)
    analytic = dict(zip(leaves, tape.gradient(loss, list(leaves.values()))))
    numeric = numeric_gradient(fn, params, h)
    worst = 0.0
    for name in params:
        a, n = analytic[name], numeric[name]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
            raise NumericalError(f"non-finite gradient for {name}")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst

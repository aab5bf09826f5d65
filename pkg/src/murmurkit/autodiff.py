"""Dense-tensor reverse-mode automatic differentiation.

Exactly the operator set the encoder needs, on row-major numpy arrays:
matmul (with leading-batch broadcast), elementwise add/mul (a trailing
shape may broadcast against leading batch axes), transpose of the last two
axes, softmax / log-softmax over the last axis, layer norm over the last
axis, GELU, dropout with caller-supplied streams, depthwise 1-D
convolution, strided 2-D convolution with explicit padding, reductions,
reshape/concat/slice plumbing, and a relative-offset bias lookup.

Gradients accumulate (never overwrite), so shared subexpressions are safe.
The default numeric width is float32; gradient checks run under
``precision(np.float64)``.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if np.dtype(dtype) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError("supported dtypes are float32 and float64")
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default numeric width."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (inference fast path)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class ShapeError(ValueError):
    """Operand shapes incompatible for the requested operator."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=_DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray, own: bool = False) -> None:
        # ``own=True`` promises g is freshly allocated and exclusively ours,
        # so the first accumulation can take the buffer instead of copying.
        if self.grad is None:
            self.grad = g if own else g.copy()
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every tracked input."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _check_suffix(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> None:
    if a_shape[len(a_shape) - len(b_shape):] != b_shape:
        raise ShapeError(f"shape {b_shape} is not a trailing suffix of {a_shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Sum out the leading batch axes that were broadcast in the forward pass.
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))


def add(a, b) -> Tensor:
    """Elementwise sum; the smaller operand's shape must be a trailing suffix."""
    a, b = as_tensor(a), as_tensor(b)
    big, small = (a, b) if a.data.ndim >= b.data.ndim else (b, a)
    _check_suffix(big.data.shape, small.data.shape)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            ga = _reduce_to(g, a.data.shape)
            a._accumulate(ga, own=ga is not g)
        if b.requires_grad:
            gb = _reduce_to(g, b.data.shape)
            b._accumulate(gb, own=gb is not g)

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Elementwise product; scalars and trailing-suffix shapes broadcast."""
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        scalar = a.data.dtype.type(b)
        data = a.data * scalar

        def backward_scalar(g):
            if a.requires_grad:
                a._accumulate(g * scalar, own=True)

        return _node(data, (a,), backward_scalar)

    a, b = as_tensor(a), as_tensor(b)
    big, small = (a, b) if a.data.ndim >= b.data.ndim else (b, a)
    _check_suffix(big.data.shape, small.data.shape)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            b._accumulate(_reduce_to(g * a.data, b.data.shape), own=True)

    return _node(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner mismatch: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to(g @ b.data.swapaxes(-1, -2), a.data.shape),
                          own=True)
        if b.requires_grad:
            b._accumulate(_reduce_to(a.data.swapaxes(-1, -2) @ g, b.data.shape),
                          own=True)

    return _node(data, (a, b), backward)


def linear(x, weight, bias) -> Tensor:
    """x @ weight + bias, with weight (in_dim, out_dim) and bias (out_dim,)."""
    return add(matmul(x, weight), bias)


def transpose_last2(x) -> Tensor:
    x = as_tensor(x)
    data = np.ascontiguousarray(x.data.swapaxes(-1, -2))

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.swapaxes(-1, -2))

    return _node(data, (x,), backward)


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _node(data, (x,), backward)


def permute(x, axes: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inverse = np.argsort(axes)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.transpose(inverse))

    return _node(data, (x,), backward)


def concat_last(parts: list[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    lead = parts[0].data.shape[:-1]
    for p in parts[1:]:
        if p.data.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last needs matching leading shapes, got "
                f"{[p.data.shape for p in parts]}")
    data = np.concatenate([p.data for p in parts], axis=-1)
    sizes = [p.data.shape[-1] for p in parts]

    def backward(g):
        start = 0
        for p, size in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(g[..., start:start + size])
            start += size

    return _node(data, tuple(parts), backward)


def slice_last(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    data = np.ascontiguousarray(x.data[..., start:stop])

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[..., start:stop] = g
            x._accumulate(full, own=True)

    return _node(data, (x,), backward)


def softmax_last(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            inner = (g * data).sum(axis=-1, keepdims=True)
            x._accumulate(data * (g - inner), own=True)

    return _node(data, (x,), backward)


def log_softmax_last(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    data = shifted - logz
    soft = np.exp(data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g - soft * g.sum(axis=-1, keepdims=True), own=True)

    return _node(data, (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    dim = x.data.shape[-1]
    if gamma.data.shape != (dim,) or beta.data.shape != (dim,):
        raise ShapeError(
            f"layer_norm scale/shift must be ({dim},), got "
            f"{gamma.data.shape} and {beta.data.shape}")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    data = gamma.data * xhat + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, dim).sum(axis=0), own=True)
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, dim).sum(axis=0), own=True)
        if x.requires_grad:
            gx_hat = g * gamma.data
            mean_g = gx_hat.mean(axis=-1, keepdims=True)
            mean_gx = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv_std * (gx_hat - mean_g - xhat * mean_gx), own=True)

    return _node(data, (x, gamma, beta), backward)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    x = as_tensor(x)
    v = x.data
    v2 = v * v
    th = np.tanh(_GELU_C * v * (1.0 + _GELU_A * v2))
    data = 0.5 * v * (1.0 + th)

    def backward(g):
        if x.requires_grad:
            sech2 = 1.0 - th * th
            d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * v2)
            x._accumulate(g * (0.5 * (1.0 + th) + 0.5 * v * sech2 * d_inner),
                          own=True)

    return _node(data, (x,), backward)


def dropout(x, p: float, gen: np.random.Generator | None,
            mask_shape: tuple[int, ...] | None = None) -> Tensor:
    """Inverted dropout. ``p == 0`` is an exact identity; otherwise a mask is
    drawn from ``gen``, so replaying the same stream replays the mask.

    ``mask_shape`` may replace leading axes with 1 to share one mask across
    them (used to apply a single stochastic sub-network to a whole batch).
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    x = as_tensor(x)
    if p == 0.0:
        return x
    if gen is None:
        raise ValueError("dropout with p > 0 requires a random stream")
    shape = x.data.shape if mask_shape is None else mask_shape
    if len(shape) != x.data.ndim or any(
            m not in (1, full) for m, full in zip(shape, x.data.shape)):
        raise ShapeError(f"mask shape {shape} does not broadcast to {x.data.shape}")
    keep = (gen.random(shape) >= p)
    mask = keep.astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    data = x.data * mask

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * mask, own=True)

    return _node(data, (x,), backward)


def depthwise_conv1d(x, weight, bias) -> Tensor:
    """Per-channel 1-D convolution over time with same-length output.

    x: (B, T, C), weight: (K, C) with K odd, bias: (C,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 3:
        raise ShapeError(f"depthwise_conv1d input must be (B, T, C), got {x.data.shape}")
    k, c = weight.data.shape
    if k % 2 == 0:
        raise ShapeError(f"kernel length must be odd, got {k}")
    if x.data.shape[-1] != c or bias.data.shape != (c,):
        raise ShapeError(
            f"channel mismatch: x {x.data.shape}, weight {weight.data.shape}, "
            f"bias {bias.data.shape}")
    half = k // 2
    b, t, _ = x.data.shape
    padded = np.pad(x.data, ((0, 0), (half, half), (0, 0)))
    # windows: (B, T, C, K)
    windows = np.lib.stride_tricks.sliding_window_view(padded, k, axis=1)
    data = np.einsum("btck,kc->btc", windows, weight.data) + bias.data

    def backward(g):
        if weight.requires_grad:
            weight._accumulate(np.einsum("btck,btc->kc", windows, g), own=True)
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, c).sum(axis=0), own=True)
        if x.requires_grad:
            gpad = np.zeros_like(padded)
            for i in range(k):
                gpad[:, i:i + t, :] += g * weight.data[i]
            # the slice views gpad, whose buffer this closure exclusively owns
            x._accumulate(gpad[:, half:half + t, :], own=True)

    return _node(data, (x, weight, bias), backward)


def conv2d(x, weight, bias, stride: tuple[int, int],
           pads: tuple[tuple[int, int], tuple[int, int]]) -> Tensor:
    """Strided 2-D convolution with explicit (possibly asymmetric) padding.

    x: (B, C, H, W), weight: (O, C, KH, KW), bias: (O,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d needs (B,C,H,W) and (O,C,KH,KW), got {x.data.shape} and "
            f"{weight.data.shape}")
    out_ch, in_ch, kh, kw = weight.data.shape
    if x.data.shape[1] != in_ch or bias.data.shape != (out_ch,):
        raise ShapeError(
            f"conv2d channel mismatch: x {x.data.shape}, weight {weight.data.shape}")
    sh, sw = stride
    (pt, pb), (pl, pr) = pads
    padded = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    batch, _, hp, wp = padded.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::sh, ::sw]  # (B, C, HO, WO, KH, KW)
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * ho * wo, in_ch * kh * kw)
    wmat = weight.data.reshape(out_ch, -1)
    out = (cols @ wmat.T).reshape(batch, ho, wo, out_ch)
    data = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias.data[None, :, None, None]

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(batch * ho * wo, out_ch)
        if bias.requires_grad:
            bias._accumulate(gmat.sum(axis=0), own=True)
        if weight.requires_grad:
            weight._accumulate((gmat.T @ cols).reshape(weight.data.shape), own=True)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(batch, ho, wo, in_ch, kh, kw)
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += (
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            x._accumulate(gpad[:, :, pt:pt + x.data.shape[2], pl:pl + x.data.shape[3]],
                          own=True)

    return _node(data, (x, weight, bias), backward)


def mean_axis(x, axis: int) -> Tensor:
    x = as_tensor(x)
    data = x.data.mean(axis=axis)
    n = x.data.shape[axis]

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.expand_dims(g, axis).repeat(n, axis=axis) / n, own=True)

    return _node(data, (x,), backward)


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape).astype(x.data.dtype),
                          own=True)

    return _node(data, (x,), backward)


def relative_bias_matrix(table, length: int, max_offset: int) -> Tensor:
    """Expand a learned per-head offset table into pairwise bias logits.

    table: (heads, 2*max_offset+1); output (heads, length, length) where
    entry [h, i, j] = table[h, clip(j - i, -max_offset, max_offset) + max_offset].
    """
    table = as_tensor(table)
    heads, width = table.data.shape
    if width != 2 * max_offset + 1:
        raise ShapeError(
            f"offset table must have {2 * max_offset + 1} columns, got {width}")
    pos = np.arange(length)
    idx = np.clip(pos[None, :] - pos[:, None], -max_offset, max_offset) + max_offset
    data = np.ascontiguousarray(table.data[:, idx])

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, (np.arange(heads)[:, None, None], idx[None, :, :]), g)
            table._accumulate(gt, own=True)

    return _node(data, (table,), backward)


def grad_check(f, params: list[Tensor], h: float = 1e-4, n_samples: int = 20,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a nullary callable returning a scalar Tensor built from
    ``params``. For each parameter, ``n_samples`` coordinates are sampled and
    perturbed by +-h; the error for a coordinate is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    gen = np.random.Generator(np.random.Philox(key=seed))
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        n_coords = min(n_samples, flat.size)
        coords = gen.choice(flat.size, size=n_coords, replace=False)
        for c in coords:
            original = flat[c]
            flat[c] = original + h
            up = float(f().data)
            flat[c] = original - h
            down = float(f().data)
            flat[c] = original
            numeric = (up - down) / (2.0 * h)
            a = float(ga.reshape(-1)[c])
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst

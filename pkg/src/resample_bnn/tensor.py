"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records a backward closure on its output tensor; calling
``backward()`` on a scalar replays the closures in reverse topological
order. This graph of closures is the gradient tape: single-threaded per
graph, deterministic for fixed inputs, and independent graphs may live on
separate threads. All data is float64 throughout.

Gradients are accumulated by reassignment (``t.grad = t.grad + g``), never
by in-place mutation, so closures may hand the same array to several
parents safely.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    """A NaN or Inf surfaced where only finite values are allowed."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording (inference-only forwards)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional float64 array, optionally part of a gradient graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def require_finite(self, context: str = "") -> "Tensor":
        if not np.isfinite(self.data).all():
            where = f" in {context}" if context else ""
            raise NonFiniteError(f"non-finite values{where}"
                                 f"{f' (tensor {self.name!r})' if self.name else ''}")
        return self

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-topological replay of the recorded backward closures."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient "
                                 "requires a scalar tensor")
            grad = np.ones_like(self.data)
        # Iterative post-order DFS; recursion depth is unbounded for long chains.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise operators ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mul(self.sum(), 1.0 / self.size)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._parents):
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
    return out


# -- primitive elementwise ops ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


def log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(out_data, (a,), backward)


def softplus(a) -> Tensor:
    """ln(1 + exp(x)), computed without overflow; derivative is sigmoid(x)."""
    a = as_tensor(a)
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)),
                       np.exp(np.minimum(x, 0.0)) / (1.0 + np.exp(np.minimum(x, 0.0))))
        _accumulate(a, g * sig)

    return _make(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _accumulate(a, g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), backward)


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, np.asarray(g).reshape(a.shape))

    return _make(out_data, (a,), backward)


# -- neural-network ops -------------------------------------------------------

def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        if len(v) != 2:
            raise ValueError(f"expected a pair, got {v!r}")
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _same_padding(extent: int, k: int, s: int) -> tuple[int, int]:
    out = -(-extent // s)  # ceil
    total = max((out - 1) * s + k - extent, 0)
    lo = total // 2
    return lo, total - lo


# im2col column blocks are kept near this size so they stay cache-resident;
# measured 2-4x faster than whole-batch columns on a single core.
_COL_BLOCK_BYTES = 4 << 20
# cached forward columns above this total are dropped and rebuilt in backward
_COL_CACHE_BYTES = 96 << 20


def _conv_geometry(x_shape, k_shape, stride, padding):
    N, C, H, W = x_shape
    F, Ck, kH, kW = k_shape
    if Ck != C:
        raise ValueError(f"conv2d channel mismatch: input has {C} channels, "
                         f"kernel expects {Ck}")
    sh, sw = _pair(stride)
    if sh < 1 or sw < 1:
        raise ValueError(f"conv2d stride must be positive, got {(sh, sw)}")
    if padding == "valid":
        pads = ((0, 0), (0, 0))
    elif padding == "same":
        pads = (_same_padding(H, kH, sh), _same_padding(W, kW, sw))
    else:
        raise ValueError(f"conv2d padding must be 'valid' or 'same', got {padding!r}")
    Hp = H + pads[0][0] + pads[0][1]
    Wp = W + pads[1][0] + pads[1][1]
    if kH > Hp or kW > Wp:
        raise ValueError(f"conv2d kernel {kH}x{kW} larger than (padded) input {Hp}x{Wp}")
    Ho = (Hp - kH) // sh + 1
    Wo = (Wp - kW) // sw + 1
    return (sh, sw), pads, (Hp, Wp), (Ho, Wo)


def _im2col(xp: np.ndarray, kH: int, kW: int, sh: int, sw: int,
            Ho: int, Wo: int) -> np.ndarray:
    """(n,C,Hp,Wp) -> contiguous (n, C*kH*kW, Ho*Wo) column blocks.

    For strided convolutions the input is first split into stride-phase
    grids so every offset copy reads contiguous rows instead of gathering.
    """
    n, C = xp.shape[0], xp.shape[1]
    cols = np.empty((n, C, kH * kW, Ho, Wo))
    if sh > 1 or sw > 1:
        phases = {}
        for a in range(min(sh, kH)):
            for b in range(min(sw, kW)):
                phases[a, b] = np.ascontiguousarray(xp[:, :, a::sh, b::sw])
        i = 0
        for u in range(kH):
            for v in range(kW):
                src = phases[u % sh, v % sw]
                cols[:, :, i] = src[:, :, u // sh:u // sh + Ho, v // sw:v // sw + Wo]
                i += 1
    else:
        i = 0
        for u in range(kH):
            for v in range(kW):
                cols[:, :, i] = xp[:, :, u:u + Ho, v:v + Wo]
                i += 1
    return cols.reshape(n, C * kH * kW, Ho * Wo)


def conv2d(x, kernel, stride=1, padding: str = "valid") -> Tensor:
    """Batched 2-D cross-correlation: (N,C,H,W) * (F,C,kH,kW) -> (N,F,H',W')."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got "
                         f"{x.shape} and {kernel.shape}")
    N, C, H, W = x.shape
    F, _, kH, kW = kernel.shape
    (sh, sw), pads, (Hp, Wp), (Ho, Wo) = _conv_geometry(x.shape, kernel.shape,
                                                        stride, padding)
    padded = pads != ((0, 0), (0, 0))
    xp = np.pad(x.data, ((0, 0), (0, 0), pads[0], pads[1])) if padded else x.data

    K = C * kH * kW
    kmat = kernel.data.reshape(F, K)
    per_item = K * Ho * Wo * 8
    chunk = max(1, _COL_BLOCK_BYTES // max(1, per_item))
    cache_cols = _grad_enabled() and N * per_item <= _COL_CACHE_BYTES \
        and bool(kernel.requires_grad or kernel._parents)
    col_cache: list[np.ndarray] = []
    out_data = np.empty((N, F, Ho, Wo))
    for n0 in range(0, N, chunk):
        cols = _im2col(xp[n0:n0 + chunk], kH, kW, sh, sw, Ho, Wo)
        res = np.matmul(kmat, cols)  # (n, F, Ho*Wo)
        out_data[n0:n0 + chunk] = res.reshape(-1, F, Ho, Wo)
        if cache_cols:
            col_cache.append(cols)

    def backward(g):
        g = np.ascontiguousarray(g)
        need_dk = bool(kernel.requires_grad or kernel._parents)
        need_dx = bool(x.requires_grad or x._parents)
        dk = np.zeros((F, K)) if need_dk else None
        dxp = np.zeros((N, C, Hp, Wp)) if need_dx else None
        for ci, n0 in enumerate(range(0, N, chunk)):
            nc = min(chunk, N - n0)
            g3 = g[n0:n0 + nc].reshape(nc, F, Ho * Wo)
            if need_dk:
                cols = col_cache[ci] if cache_cols else _im2col(
                    xp[n0:n0 + nc], kH, kW, sh, sw, Ho, Wo)
                dk += np.matmul(g3, cols.swapaxes(1, 2)).sum(axis=0)
            if need_dx:
                prod = np.matmul(kmat.T, g3)  # (nc, K, Ho*Wo)
                prod = prod.reshape(nc, C, kH * kW, Ho, Wo)
                i = 0
                for u in range(kH):
                    for v in range(kW):
                        dxp[n0:n0 + nc, :,
                            u:u + (Ho - 1) * sh + 1:sh,
                            v:v + (Wo - 1) * sw + 1:sw] += prod[:, :, i]
                        i += 1
        col_cache.clear()
        if need_dk:
            _accumulate(kernel, dk.reshape(F, C, kH, kW))
        if need_dx:
            if padded:
                (pt, pb), (pl, pr) = pads
                dx = dxp[:, :, pt:Hp - pb, pl:Wp - pr]
            else:
                dx = dxp
            _accumulate(x, dx)

    return _make(out_data, (x, kernel), backward)


def conv2d_flipout(x, mu_kernel, delta_kernel, r: np.ndarray, s: np.ndarray,
                   stride=1, padding: str = "valid") -> Tensor:
    """Fused flipout convolution.

    Computes conv(x, mu) + conv(x * r, delta) * s where ``r`` (N,C) and
    ``s`` (N,F) are fixed per-example sign vectors and ``delta`` is the
    shared weight perturbation. Folding the signs into a per-example
    effective kernel A_n = mu + (delta * r_n) * s_n lets base and
    perturbation share one im2col pass and one batched gemm, which
    roughly halves the cost versus two separate convolutions.
    """
    x, mu_kernel, delta_kernel = as_tensor(x), as_tensor(mu_kernel), as_tensor(delta_kernel)
    if mu_kernel.shape != delta_kernel.shape:
        raise ValueError(f"mu/delta kernel shapes differ: {mu_kernel.shape} "
                         f"vs {delta_kernel.shape}")
    N, C, H, W = x.shape
    F, _, kH, kW = mu_kernel.shape
    r = np.asarray(r, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if r.shape != (N, C) or s.shape != (N, F):
        raise ValueError(f"sign vectors must be (N,C)={N, C} and (N,F)={N, F}, "
                         f"got {r.shape} and {s.shape}")
    (sh, sw), pads, (Hp, Wp), (Ho, Wo) = _conv_geometry(x.shape, mu_kernel.shape,
                                                        stride, padding)
    padded = pads != ((0, 0), (0, 0))
    xp = np.pad(x.data, ((0, 0), (0, 0), pads[0], pads[1])) if padded else x.data

    K = C * kH * kW
    mu2 = mu_kernel.data.reshape(F, K)
    delta2 = delta_kernel.data.reshape(F, K)
    r_cols = np.repeat(r, kH * kW, axis=1)  # (N,K): per-input-channel signs
    # per-example effective kernels: A_n = mu + (delta ∘ r_n) ∘ s_n
    eff = mu2[None, :, :] + delta2[None, :, :] * r_cols[:, None, :] * s[:, :, None]

    per_item = K * Ho * Wo * 8
    chunk = max(1, _COL_BLOCK_BYTES // max(1, per_item))
    need_grads = _grad_enabled()
    cache_cols = need_grads and N * per_item <= _COL_CACHE_BYTES
    col_cache: list[np.ndarray] = []
    out_data = np.empty((N, F, Ho, Wo))
    for n0 in range(0, N, chunk):
        cols = _im2col(xp[n0:n0 + chunk], kH, kW, sh, sw, Ho, Wo)
        out_data[n0:n0 + chunk] = np.matmul(eff[n0:n0 + cols.shape[0]],
                                            cols).reshape(-1, F, Ho, Wo)
        if cache_cols:
            col_cache.append(cols)

    def backward(g):
        g = np.ascontiguousarray(g)
        need_dmu = bool(mu_kernel.requires_grad or mu_kernel._parents)
        need_dd = bool(delta_kernel.requires_grad or delta_kernel._parents)
        need_dx = bool(x.requires_grad or x._parents)
        dmu = np.zeros((F, K)) if need_dmu else None
        dd = np.zeros((F, K)) if need_dd else None
        dxp = np.zeros((N, C, Hp, Wp)) if need_dx else None
        for ci, n0 in enumerate(range(0, N, chunk)):
            nc = min(chunk, N - n0)
            g3 = g[n0:n0 + nc].reshape(nc, F, Ho * Wo)
            if need_dmu or need_dd:
                cols = col_cache[ci] if cache_cols else _im2col(
                    xp[n0:n0 + nc], kH, kW, sh, sw, Ho, Wo)
                m = np.matmul(g3, cols.swapaxes(1, 2))  # (nc,F,K) per-example outer
                if need_dmu:
                    dmu += m.sum(axis=0)
                if need_dd:
                    dd += (m * s[n0:n0 + nc, :, None]
                           * r_cols[n0:n0 + nc, None, :]).sum(axis=0)
            if need_dx:
                prod = np.matmul(eff[n0:n0 + nc].swapaxes(1, 2), g3)
                prod = prod.reshape(nc, C, kH * kW, Ho, Wo)
                i = 0
                for u in range(kH):
                    for v in range(kW):
                        dxp[n0:n0 + nc, :,
                            u:u + (Ho - 1) * sh + 1:sh,
                            v:v + (Wo - 1) * sw + 1:sw] += prod[:, :, i]
                        i += 1
        col_cache.clear()
        if need_dmu:
            _accumulate(mu_kernel, dmu.reshape(F, C, kH, kW))
        if need_dd:
            _accumulate(delta_kernel, dd.reshape(F, C, kH, kW))
        if need_dx:
            if padded:
                (pt, pb), (pl, pr) = pads
                dx = dxp[:, :, pt:Hp - pb, pl:Wp - pr]
            else:
                dx = dxp
            _accumulate(x, dx)

    return _make(out_data, (x, mu_kernel, delta_kernel), backward)


def dense(x, weight, bias=None) -> Tensor:
    """Affine map (N,D) @ (D,K) + (K,)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ValueError(f"dense expects 2-D input and weight, got "
                         f"{x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense inner dimensions disagree: input {x.shape} "
                         f"vs weight {weight.shape}")
    out_data = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"dense bias shape {bias.shape} does not match "
                             f"output width {weight.shape[1]}")
        out_data = out_data + bias.data
        parents.append(bias)

    def backward(g):
        g = np.asarray(g)
        if x.requires_grad or x._parents:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad or weight._parents:
            _accumulate(weight, x.data.T @ g)
        if bias is not None and (bias.requires_grad or bias._parents):
            _accumulate(bias, g.sum(axis=0))

    return _make(out_data, tuple(parents), backward)


def maxpool2d(x, window, stride=None) -> Tensor:
    """Max pooling; backward routes gradient to the first (row-major) argmax."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"maxpool2d expects a 4-D input, got {x.shape}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride) if stride is not None else (kh, kw)
    N, C, H, W = x.shape
    if kh > H or kw > W:
        raise ValueError(f"maxpool2d window {kh}x{kw} larger than input {H}x{W}")
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1

    def offset_slice(arr, u, v):
        return arr[:, :, u:u + (Ho - 1) * sh + 1:sh, v:v + (Wo - 1) * sw + 1:sw]

    out_data = offset_slice(x.data, 0, 0).copy()
    for u in range(kh):
        for v in range(kw):
            if u or v:
                np.maximum(out_data, offset_slice(x.data, u, v), out=out_data)

    def backward(g):
        g = np.asarray(g)
        dx = np.zeros((N, C, H, W))
        # Row-major offset scan with a "not yet routed" mask reproduces the
        # first-index argmax tie-break without materializing windows.
        open_slots = np.ones((N, C, Ho, Wo), dtype=bool)
        for u in range(kh):
            for v in range(kw):
                hit = offset_slice(x.data, u, v) == out_data
                hit &= open_slots
                offset_slice(dx, u, v)[...] += g * hit
                open_slots &= ~hit
        _accumulate(x, dx)

    return _make(out_data, (x,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise stabilized softmax on a plain array (inference helper)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], max-stabilized."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects 2-D logits, got {logits.shape}")
    N, K = logits.shape
    if labels.shape != (N,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {N}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"labels must lie in [0, {K}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.intp)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logprobs = z - logsumexp
    out_data = -logprobs[np.arange(N), labels].mean()

    def backward(g):
        probs = np.exp(logprobs)
        probs[np.arange(N), labels] -= 1.0
        _accumulate(logits, (float(g) / N) * probs)

    return _make(np.float64(out_data), (logits,), backward)

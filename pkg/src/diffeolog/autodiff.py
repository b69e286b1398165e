"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the operations the deformation autoencoder and the square
root optimizer need: dense layers, strided 2D convolution and its transposed
adjoint, pointwise nonlinearities, a differentiable clamped-bilinear field
composition, reductions and elementwise arithmetic, plus an Adam optimizer.

Each op computes its output eagerly and records a backward closure on the
output tensor.  `backward` walks the recorded graph once in reverse
topological order; gradients accumulate additively, so fan-out (the same
tensor consumed twice, e.g. warp(psi, psi)) is handled correctly.  No
broadcasting beyond the explicit bias cases, no views shared with callers:
a closed op set keeps the gradient checks exhaustive.
"""

from __future__ import annotations

import numba
import numpy as np


class Tensor:
    """A float numpy array plus the graph edge that produced it.

    float32 data stays float32 (the training lane); everything else is cast
    to float64, the precision used by oracles and gradient checks.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, np.ndarray) and data.dtype == np.float32:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t: Tensor, g, own: bool = False) -> None:
    """Add g into t.grad.  own=True promises g is a fresh buffer no other
    node aliases, so the first accumulation may keep it without copying."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if own and isinstance(g, np.ndarray) else np.array(g)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Reverse accumulation from a scalar tensor through its graph."""
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g, own=True)

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(g):
        _accum(a, g * b.data, own=True)
        _accum(b, g * a.data, own=True)

    return _node(a.data * b.data, (a, b), bwd)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    out_data = a.data / b.data

    def bwd(g):
        _accum(a, g / b.data, own=True)
        _accum(b, -g * out_data / b.data, own=True)

    return _node(out_data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bwd(g):
        _accum(a, g * s, own=True)

    return _node(a.data * s, (a,), bwd)


def add_const(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        _accum(a, g)

    return _node(a.data + float(c), (a,), bwd)


def square(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, 2.0 * a.data * g, own=True)

    return _node(a.data * a.data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * (0.5 / out_data), own=True)

    return _node(out_data, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    def bwd(g):
        _accum(a, np.full(a.data.shape, float(g), dtype=a.data.dtype), own=True)

    return _node(np.sum(a.data), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    inv = 1.0 / a.data.size

    def bwd(g):
        _accum(a, np.full(a.data.shape, float(g) * inv, dtype=a.data.dtype), own=True)

    return _node(np.mean(a.data), (a,), bwd)


def sum_last(a: Tensor) -> Tensor:
    """Sum over the last axis."""

    def bwd(g):
        _accum(a, np.broadcast_to(np.asarray(g)[..., None], a.data.shape))

    return _node(np.sum(a.data, axis=-1), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def bwd(g):
        _accum(a, np.reshape(g, a.data.shape))

    return _node(a.data.reshape(shape), (a,), bwd)


def slice0(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along axis 0 (contiguous block of rows/samples)."""

    def bwd(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full, own=True)

    return _node(a.data[start:stop].copy(), (a,), bwd)


def concat0(parts: list[Tensor]) -> Tensor:
    """Concatenate along axis 0."""
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g):
        off = 0
        for p, n in zip(parts, sizes):
            _accum(p, g[off : off + n])
            off += n

    return _node(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bwd)


def permute0(a: Tensor, perm) -> Tensor:
    """Reorder rows along axis 0 by a permutation index."""
    perm = np.asarray(perm, dtype=np.intp)
    if perm.shape != (a.data.shape[0],) or not np.array_equal(np.sort(perm), np.arange(perm.size)):
        raise ValueError("perm must be a permutation of the rows")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size, dtype=np.intp)

    def bwd(g):
        _accum(a, g[inv], own=True)

    return _node(a.data[perm], (a,), bwd)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def leaky_relu(a: Tensor, alpha: float = 0.1) -> Tensor:
    pos = a.data >= 0

    def bwd(g):
        _accum(a, g * np.where(pos, 1.0, alpha), own=True)

    return _node(np.where(pos, a.data, alpha * a.data), (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data * out_data), own=True)

    return _node(out_data, (a,), bwd)


def pointwise(a: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(a)
    if kind == "tanh":
        return tanh(a)
    if kind == "identity":
        return a
    raise ValueError(f"unknown pointwise kind: {kind!r}")


# ---------------------------------------------------------------------------
# dense layer


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.data.shape} x {b.data.shape}")

    def bwd(g):
        _accum(a, g @ b.data.T, own=True)
        _accum(b, a.data.T @ g, own=True)

    return _node(a.data @ b.data, (a, b), bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Bias broadcast over [B, O] + [O] or [B, C, H, W] + [C]."""
    if x.data.ndim == 2 and b.data.shape == (x.data.shape[1],):
        def bwd(g):
            _accum(x, g)
            _accum(b, g.sum(axis=0), own=True)

        return _node(x.data + b.data, (x, b), bwd)
    if x.data.ndim == 4 and b.data.shape == (x.data.shape[1],):
        def bwd(g):
            _accum(x, g)
            _accum(b, g.sum(axis=(0, 2, 3)), own=True)

        return _node(x.data + b.data[None, :, None, None], (x, b), bwd)
    raise ValueError(f"add_bias: bias {b.data.shape} does not fit input {x.data.shape}")


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x [B, I], w [I, O], b [O]."""
    return add_bias(matmul(x, w), b)


# ---------------------------------------------------------------------------
# strided convolution and its transposed adjoint


def conv_out_hw(h: int, w: int, stride: int) -> tuple[int, int]:
    """Output size of a stride-s conv with odd kernel and (k-1)/2 zero padding."""
    return ((h - 1) // stride + 1, (w - 1) // stride + 1)


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(B*Ho*Wo, C*k*k) patch matrix of the zero-padded input."""
    B, C, H, W = x.shape
    p = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    # (B, C, Ho, Wo, k, k) -> (B, Ho, Wo, C, k, k) -> (B*Ho*Wo, C*k*k)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(win.shape[0] * win.shape[2] * win.shape[3], -1)


def _conv_fwd(x: np.ndarray, ker: np.ndarray, stride: int, cols: np.ndarray | None = None) -> np.ndarray:
    B = x.shape[0]
    F, _, k, _ = ker.shape
    Ho, Wo = conv_out_hw(x.shape[2], x.shape[3], stride)
    if cols is None:
        cols = _im2col(x, k, stride)
    out = cols @ ker.reshape(F, -1).T
    return out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)


def _conv_bwd_x(g: np.ndarray, ker: np.ndarray, stride: int, in_hw) -> np.ndarray:
    B, F, Ho, Wo = g.shape
    _, C, k, _ = ker.shape
    H, W = in_hw
    p = (k - 1) // 2
    gmat = g.transpose(1, 0, 2, 3).reshape(F, B * Ho * Wo)
    cols = (ker.reshape(F, C * k * k).T @ gmat).reshape(C, k, k, B, Ho, Wo)
    gxp = np.zeros((C, B, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            gxp[:, :, a : a + stride * Ho : stride, b : b + stride * Wo : stride] += cols[:, a, b]
    return np.ascontiguousarray(gxp[:, :, p : p + H, p : p + W].transpose(1, 0, 2, 3))


def _conv_bwd_k(g: np.ndarray, cols: np.ndarray, shape: tuple) -> np.ndarray:
    """Kernel gradient from the upstream gradient and the input patch matrix."""
    F, C, k, _ = shape
    B = g.shape[0]
    gm = g.transpose(0, 2, 3, 1).reshape(-1, F)
    return (gm.T @ cols).reshape(F, C, k, k)


def _check_conv_args(x: Tensor, kernels: Tensor, bias: Tensor, stride: int) -> int:
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ValueError("conv expects 4D input [B,C,H,W] and kernels [F,C,k,k]")
    k = kernels.data.shape[2]
    if kernels.data.shape[3] != k or k % 2 != 1:
        raise ValueError("conv kernels must be square with odd size")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return k


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int) -> Tensor:
    """Strided cross-correlation with symmetric zero padding (k-1)/2.

    x [B,C,H,W], kernels [F,C,k,k], bias [F] -> [B,F,ceil(H/s),ceil(W/s)].
    """
    k = _check_conv_args(x, kernels, bias, stride)
    B, C, H, W = x.data.shape
    F = kernels.data.shape[0]
    if kernels.data.shape[1] != C:
        raise ValueError(f"conv2d: kernel channels {kernels.data.shape[1]} != input {C}")
    if bias.data.shape != (F,):
        raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({F},)")
    cols = _im2col(x.data, k, stride)
    out = _conv_fwd(x.data, kernels.data, stride, cols) + bias.data[None, :, None, None]

    def bwd(g):
        _accum(x, _conv_bwd_x(g, kernels.data, stride, (H, W)), own=True)
        _accum(kernels, _conv_bwd_k(g, cols, kernels.data.shape), own=True)
        _accum(bias, g.sum(axis=(0, 2, 3)), own=True)

    return _node(out, (x, kernels, bias), bwd)


def conv2d_transpose(
    x: Tensor, kernels: Tensor, bias: Tensor, stride: int, out_hw
) -> Tensor:
    """Exact adjoint of conv2d with the same kernels and stride.

    x [B,F,h,w], kernels [F,C,k,k], bias [C] -> [B,C,H,W] with (h,w) equal to
    the conv output size for (H,W).  Sharing the conv kernels this way makes
    decoder gradients exercise the same tested convolution code paths.
    """
    k = _check_conv_args(x, kernels, bias, stride)
    B, F, h, w = x.data.shape
    H, W = out_hw
    if kernels.data.shape[0] != F:
        raise ValueError(f"conv2d_transpose: kernel count {kernels.data.shape[0]} != input channels {F}")
    C = kernels.data.shape[1]
    if bias.data.shape != (C,):
        raise ValueError(f"conv2d_transpose: bias shape {bias.data.shape} != ({C},)")
    if conv_out_hw(H, W, stride) != (h, w):
        raise ValueError(
            f"conv2d_transpose: input {h}x{w} is not the conv output size of {H}x{W} at stride {stride}"
        )
    out = _conv_bwd_x(x.data, kernels.data, stride, (H, W)) + bias.data[None, :, None, None]

    def bwd(g):
        gcols = _im2col(g, k, stride)
        _accum(x, _conv_fwd(g, kernels.data, stride, gcols), own=True)
        _accum(kernels, _conv_bwd_k(x.data, gcols, kernels.data.shape), own=True)
        _accum(bias, g.sum(axis=(0, 2, 3)), own=True)

    return _node(out, (x, kernels, bias), bwd)


# ---------------------------------------------------------------------------
# differentiable field composition


@numba.njit(cache=True)
def _warp_fwd_kernel(od, idd):
    """Clamped-bilinear composition forward pass.

    Returns the composed displacement plus the per-pixel cell indices,
    in-cell fractions and unclamped-coordinate masks the backward pass needs.
    Difference-form blending keeps grid-node samples and constant fields
    exact, matching the non-differentiable field composition.
    """
    B, _, H, W = od.shape
    out = np.empty_like(od)
    r0a = np.empty((B, H, W), dtype=np.int64)
    c0a = np.empty((B, H, W), dtype=np.int64)
    fra = np.empty((B, H, W), dtype=od.dtype)
    fca = np.empty((B, H, W), dtype=od.dtype)
    mra = np.empty((B, H, W), dtype=np.uint8)
    mca = np.empty((B, H, W), dtype=np.uint8)
    for b in range(B):
        for i in range(H):
            for j in range(W):
                pr = i + idd[b, 0, i, j]
                pc = j + idd[b, 1, i, j]
                mra[b, i, j] = 1 if (pr > 0.0 and pr < H - 1.0) else 0
                mca[b, i, j] = 1 if (pc > 0.0 and pc < W - 1.0) else 0
                cr = min(max(pr, 0.0), H - 1.0)
                cc = min(max(pc, 0.0), W - 1.0)
                r0 = int(np.floor(cr))
                c0 = int(np.floor(cc))
                r1 = min(r0 + 1, H - 1)
                c1 = min(c0 + 1, W - 1)
                fr = cr - r0
                fc = cc - c0
                r0a[b, i, j] = r0
                c0a[b, i, j] = c0
                fra[b, i, j] = fr
                fca[b, i, j] = fc
                for ch in range(2):
                    v00 = od[b, ch, r0, c0]
                    v01 = od[b, ch, r0, c1]
                    v10 = od[b, ch, r1, c0]
                    v11 = od[b, ch, r1, c1]
                    top = v00 + fc * (v01 - v00)
                    bot = v10 + fc * (v11 - v10)
                    out[b, ch, i, j] = idd[b, ch, i, j] + (top + fr * (bot - top))
    return out, r0a, c0a, fra, fca, mra, mca


@numba.njit(cache=True)
def _warp_bwd_kernel(g, od, r0a, c0a, fra, fca, mra, mca, need_inner, need_outer):
    B, _, H, W = od.shape
    gi = np.zeros_like(g)
    go = np.zeros_like(od)
    for b in range(B):
        for i in range(H):
            for j in range(W):
                r0 = r0a[b, i, j]
                c0 = c0a[b, i, j]
                r1 = min(r0 + 1, H - 1)
                c1 = min(c0 + 1, W - 1)
                fr = fra[b, i, j]
                fc = fca[b, i, j]
                grow = 0.0
                gcol = 0.0
                for ch in range(2):
                    gv = g[b, ch, i, j]
                    v00 = od[b, ch, r0, c0]
                    v01 = od[b, ch, r0, c1]
                    v10 = od[b, ch, r1, c0]
                    v11 = od[b, ch, r1, c1]
                    if need_inner:
                        grow += gv * ((1.0 - fc) * (v10 - v00) + fc * (v11 - v01))
                        gcol += gv * ((1.0 - fr) * (v01 - v00) + fr * (v11 - v10))
                    if need_outer:
                        go[b, ch, r0, c0] += (1.0 - fr) * (1.0 - fc) * gv
                        go[b, ch, r0, c1] += (1.0 - fr) * fc * gv
                        go[b, ch, r1, c0] += fr * (1.0 - fc) * gv
                        go[b, ch, r1, c1] += fr * fc * gv
                if need_inner:
                    gi[b, 0, i, j] = g[b, 0, i, j] + grow * mra[b, i, j]
                    gi[b, 1, i, j] = g[b, 1, i, j] + gcol * mca[b, i, j]
    return gi, go


def warp(outer: Tensor, inner: Tensor) -> Tensor:
    """Differentiable composition of batched displacement fields [B, 2, H, W].

    out = inner + sample(outer, id + inner) with clamped bilinear sampling,
    matching the field composition semantics used elsewhere.  Gradients flow
    to both inputs; the gradient through the sampling coordinates uses the
    piecewise-linear bilinear derivative, and a clamped coordinate passes
    zero gradient along the clamped axis.
    """
    _check_same_shape(outer, inner, "warp")
    od, idd = outer.data, inner.data
    if od.ndim != 4 or od.shape[1] != 2:
        raise ValueError("warp expects [B, 2, H, W] displacement tensors")
    if od.dtype != idd.dtype:
        raise ValueError("warp operands must share a dtype")
    od = np.ascontiguousarray(od)
    idd = np.ascontiguousarray(idd)
    out_data, r0a, c0a, fra, fca, mra, mca = _warp_fwd_kernel(od, idd)

    def bwd(g):
        gi, go = _warp_bwd_kernel(
            np.ascontiguousarray(g), od, r0a, c0a, fra, fca, mra, mca,
            inner.requires_grad, outer.requires_grad,
        )
        if inner.requires_grad:
            _accum(inner, gi, own=True)
        if outer.requires_grad:
            _accum(outer, go, own=True)

    return _node(out_data, (outer, inner), bwd)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Standard bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

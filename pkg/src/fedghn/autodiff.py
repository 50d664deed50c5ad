"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tape`` records primitive operations in execution order while it is
active; ``backward`` replays the records in reverse and accumulates
vector-Jacobian products into per-leaf gradient arrays.  Only the
primitives needed by the rest of the package are implemented: dense and
convolutional linear maps, pointwise nonlinearities, shape plumbing, and
fused classification losses.
"""

from __future__ import annotations

import numpy as np

from .errors import LabelOutOfRange, NotScalar, ShapeError

Array = np.ndarray


class Tensor:
    """A numpy array plus a flag marking it as a differentiable leaf.

    Tensors are hashed by identity so they can key gradient maps; never
    rely on ``==`` between tensors.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Records operations while active so ``backward`` can replay them."""

    def __init__(self):
        self._records: list[tuple[Tensor, list[tuple[Tensor, object]]]] = []
        self._produced: set[int] = set()
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def watch(self, tensor: Tensor) -> None:
        """Register a leaf so backward reports a gradient even if unused."""
        tensor.requires_grad = True
        self._leaves[id(tensor)] = tensor

    def _record(self, out: Tensor, vjps: list[tuple[Tensor, object]]) -> None:
        for inp, _ in vjps:
            if inp.requires_grad and id(inp) not in self._produced:
                self._leaves[id(inp)] = inp
        self._produced.add(id(out))
        self._records.append((out, vjps))


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _finish(out: Tensor, vjps: list[tuple[Tensor, object]]) -> Tensor:
    tape = _active_tape()
    needs = any(inp.requires_grad for inp, _ in vjps)
    if needs:
        out.requires_grad = True
        if tape is not None:
            tape._record(out, vjps)
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, Tensor]:
    """Return gradients of scalar ``loss`` w.r.t. every leaf seen on ``tape``.

    Accumulators start from zero on every call; leaves that do not
    influence the loss map to zero tensors.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for out, vjps in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, fn in vjps:
            if not inp.requires_grad:
                continue
            contrib = fn(g)
            prev = grads.get(id(inp))
            grads[id(inp)] = contrib if prev is None else prev + contrib
    result: dict[Tensor, Tensor] = {}
    for key, leaf in tape._leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        result[leaf] = Tensor(g)
    return result


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum gradient ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.dtype)
    out = Tensor(a.data + b.data)
    return _finish(out, [
        (a, lambda g, sa=a.shape: _unbroadcast(g, sa)),
        (b, lambda g, sb=b.shape: _unbroadcast(g, sb)),
    ])


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.dtype)
    ad, bd = a.data, b.data
    out = Tensor(ad * bd)
    return _finish(out, [
        (a, lambda g, sa=a.shape: _unbroadcast(g * bd, sa)),
        (b, lambda g, sb=b.shape: _unbroadcast(g * ad, sb)),
    ])


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    out = Tensor(ad @ bd)
    return _finish(out, [
        (a, lambda g: g @ bd.T),
        (b, lambda g: ad.T @ g),
    ])


def relu(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = Tensor(np.maximum(xd, 0))
    return _finish(out, [(x, lambda g: g * (xd > 0))])


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    out = Tensor(np.where(xd > 0, xd, xd * slope))
    return _finish(out, [(x, lambda g: np.where(xd > 0, g, g * slope))])


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.data.shape
    out = Tensor(x.data.reshape(shape))
    return _finish(out, [(x, lambda g: g.reshape(old))])


def flatten(x) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    x = _as_tensor(x)
    return reshape(x, (x.shape[0], -1))


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one input")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    vjps = []
    offset = 0
    for t in tensors:
        n = t.shape[axis]
        sl = [slice(None)] * out.data.ndim
        sl[axis] = slice(offset, offset + n)
        vjps.append((t, lambda g, s=tuple(sl): g[s]))
        offset += n
    return _finish(out, vjps)


def gather_rows(x, indices) -> Tensor:
    """Select rows of a 2-D tensor; duplicate indices accumulate on backward."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(x.data[idx])

    def vjp(g, shape=x.shape, idx=idx):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, idx, g)
        return gx

    return _finish(out, [(x, vjp)])


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"slice_cols expects a 2-D tensor, got {x.shape}")
    if not (0 <= start <= stop <= x.shape[1]):
        raise ShapeError(f"column slice [{start}:{stop}) out of range for {x.shape}")
    out = Tensor(x.data[:, start:stop].copy())

    def vjp(g, shape=x.shape, start=start, stop=stop):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return gx

    return _finish(out, [(x, vjp)])


def global_avg_pool(x) -> Tensor:
    """Average over the two spatial axes of a (B, C, H, W) tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (B, C, H, W), got {x.shape}")
    b, c, h, w = x.shape
    out = Tensor(x.data.mean(axis=(2, 3), keepdims=True))

    def vjp(g, shape=(b, c, h, w), area=h * w):
        return np.broadcast_to(g / area, shape).copy()

    return _finish(out, [(x, vjp)])


def rescale_rows(x, target: float, eps: float = 1e-12) -> Tensor:
    """Scale every row of a 2-D tensor to L2 norm ``target``.

    Rows with norm at or below ``eps`` are scaled by target/eps instead of
    dividing by zero, so an exactly-zero row stays zero.
    """
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"rescale_rows expects a 2-D tensor, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    r = np.maximum(norms, eps)
    out = Tensor(x.data * (target / r))

    def vjp(g, xd=x.data, norms=norms, r=r):
        # d/dx of t*x/r is t/r*(I - x x^T / r^2) on rows above the floor.
        dot = (g * xd).sum(axis=1, keepdims=True)
        gx = g * (target / r)
        gx -= np.where(norms > eps, target * dot / (r ** 3), 0.0) * xd
        return gx

    return _finish(out, [(x, vjp)])


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum())
    return _finish(out, [(x, lambda g, s=x.shape, d=x.dtype: np.full(s, g, dtype=d))])


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    out = Tensor(x.data.mean())
    return _finish(out, [(x, lambda g, s=x.shape, d=x.dtype: np.full(s, g / n, dtype=d))])


def _conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of (B, Cin, H, W) input with (Cout, Cin, kh, kw) filters.

    Lowered to a single GEMM over im2col patches; the patch matrix is kept
    for the backward pass.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape}, {w.shape}")
    bsz, cin, h, wid = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"bad conv2d stride/padding: {stride}, {padding}")
    oh = _conv_out_size(h, kh, stride, padding)
    ow = _conv_out_size(wid, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {kh}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(bsz * oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, -1).T
    flat = cols @ wmat
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d bias must have shape ({cout},), got {b.shape}")
        flat = flat + b.data
    out = Tensor(np.ascontiguousarray(flat.reshape(bsz, oh, ow, cout).transpose(0, 3, 1, 2)))

    padded_shape = xp.shape

    def flatten_grad(g):
        return np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(bsz * oh * ow, cout)

    def vjp_w(g):
        gw = cols.T @ flatten_grad(g)
        return np.ascontiguousarray(gw.T).reshape(cout, cin, kh, kw)

    def vjp_x(g):
        gcols = flatten_grad(g) @ wmat.T
        gwin = gcols.reshape(bsz, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gwin[:, :, :, :, i, j]
        if padding:
            return gxp[:, :, padding:padding + h, padding:padding + wid]
        return gxp

    vjps = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        vjps.append((b, lambda g: flatten_grad(g).sum(axis=0)))
    return _finish(out, vjps)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels under softmax logits."""
    logits = _as_tensor(logits)
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects (B, classes), got {logits.shape}")
    y = np.asarray(labels)
    n, k = z.shape
    if y.shape != (n,):
        raise ShapeError(f"labels must have shape ({n},), got {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))
    nll = lse[:, 0] - z[np.arange(n), y]
    out = Tensor(np.asarray(nll.mean(), dtype=z.dtype))
    probs = np.exp(z - lse)

    def vjp(g):
        gz = probs.copy()
        gz[np.arange(n), y] -= 1.0
        return gz * (g / n)

    return _finish(out, [(logits, vjp)])


def sigmoid_bce(logits, targets) -> Tensor:
    """Mean binary cross-entropy of {0,1} targets under sigmoid logits."""
    logits = _as_tensor(logits)
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    if t.shape != z.shape:
        raise ShapeError(f"targets shape {t.shape} must match logits {z.shape}")
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(np.asarray(per.mean(), dtype=z.dtype))
    n = z.size
    sig = 1.0 / (1.0 + np.exp(-z))

    def vjp(g):
        return (sig - t) * (g / n)

    return _finish(out, [(logits, vjp)])


def finite_diff_check(fn, params, eps: float = 1e-5, max_coords_per_param: int = 64,
                      seed: int = 0) -> float:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must be a deterministic closure over ``params`` returning a
    scalar tensor.  Returns the worst relative error over the sampled
    coordinates, with denominator max(|analytic|, |numeric|, 1e-8).
    """
    params = list(params)
    with Tape() as tape:
        for p in params:
            tape.watch(p)
        loss = fn()
    grads = backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = grads[p].data.reshape(-1)
        n = p.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        flat = p.data.reshape(-1)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + eps
            plus = float(fn().data)
            flat[i] = saved - eps
            minus = float(fn().data)
            flat[i] = saved
            numeric = (plus - minus) / (2.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst

"""Reverse-mode automatic differentiation on float64 numpy arrays.

Everything the policy computes flows through the ops in this module so that
training, sampling, and the gradient checker share one numeric path. Design
points that the rest of the package relies on:

- float64 only; op outputs are frozen (read-only) arrays, so no op can mutate
  a value another node recorded.
- every op validates that its output is finite and raises NumericError
  otherwise (NaN/Inf is an error state, not a value).
- reductions and contractions always run through numpy kernels on arrays in a
  fixed, explicitly constructed order; callers that need permutation
  invariance (the tokenizer, the transformer) canonicalize their operand
  order before calling in here.

Ops record onto the innermost active GradTape; outside any tape they are
plain numpy computations with no bookkeeping, which is the inference path.
"""

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

_ACTIVE_TAPE = None

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
GELU_CUBIC = 0.044715
MASK_NEG = -1e30  # additive mask constant; exp(-1e30 - rowmax) underflows to exactly 0.0


class NumericError(ArithmeticError):
    """A non-finite value appeared where the numeric contracts forbid one."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    # Single-pass probe: any NaN/Inf in arr makes the sum non-finite. A finite
    # overflow false alarm would need |sum| > 1e308, unreachable for the value
    # scales this package produces.
    if not np.isfinite(arr.sum()):
        if np.isfinite(arr).all():
            return
        raise NumericError(f"non-finite values in output of {op}")


class Tensor:
    """Immutable float64 array node.

    Construct with `Tensor(data)` (copies) or mark a trainable leaf with
    `requires_grad=True`. Op results come back as new Tensors; their arrays
    are frozen, so grab `.data` freely without defensive copies.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        _check_finite(arr, "Tensor()")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr) -> "Tensor":
        # Internal: adopt a freshly computed array without copying. numpy
        # returns 0-d scalars from 0-d arithmetic; normalize those back.
        t = object.__new__(cls)
        if not isinstance(arr, np.ndarray) or not (
            arr.dtype == np.float64 and arr.flags.c_contiguous
        ):
            arr = np.asarray(arr, dtype=np.float64, order="C")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; floats/ints are treated as constants (no gradient).
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not an op; use mul with a reciprocal")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class GradTape:
    """Records ops executed under `with tape:` for one reverse sweep.

    A tape is single-use: backward() consumes it, and a second backward()
    without a new forward pass raises. Gradients for leaves marked
    requires_grad are retained and fetched with grad(); intermediate
    gradients are freed as the sweep passes them to keep peak memory at
    roughly one extra copy of the forward activations.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._grads: dict[int, np.ndarray] | None = None
        self._consumed = False
        self._prev = None

    def __enter__(self):
        global _ACTIVE_TAPE
        self._prev = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._prev
        self._prev = None
        return False

    def _record(self, out: Tensor, parents: tuple, vjp) -> None:
        self._nodes.append((out, parents, vjp))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("tape already backpropagated; run a new forward pass")
        self._consumed = True
        if loss.shape != ():
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        _check_finite(loss.data, "backward(loss)")

        # Each op output is produced by exactly one node, and its consumers
        # were recorded later, so by the time the producing node is visited in
        # reverse order its gradient is fully accumulated and can be popped.
        # Accumulation is out-of-place: identity-style vjps hand back shared
        # or viewed arrays, which an in-place += would corrupt.
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for out, parents, vjp in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            pgrads = vjp(g)
            for p, pg in zip(parents, pgrads):
                if pg is None:
                    continue
                pid = id(p)
                acc = grads.get(pid)
                grads[pid] = pg if acc is None else acc + pg
        # What survives the sweep are gradients of leaves (tensors that are
        # inputs of recorded nodes but outputs of none).
        self._grads = grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the loss w.r.t. a requires_grad leaf (zeros if unused)."""
        if self._grads is None:
            raise RuntimeError("backward() has not run on this tape")
        if not t.requires_grad:
            raise ValueError("grad() is only tracked for requires_grad leaves")
        g = self._grads.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g


def _active() -> GradTape | None:
    return _ACTIVE_TAPE


def _emit(arr: np.ndarray, op: str, parents: tuple, vjp) -> Tensor:
    _check_finite(arr, op)
    out = Tensor._wrap(arr)
    tape = _ACTIVE_TAPE
    if tape is not None and any(isinstance(p, Tensor) for p in parents):
        tape._record(out, parents, vjp)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to an operand's shape."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (gd, sd) in enumerate(zip(grad.shape, shape)) if sd == 1 and gd != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and broadcast arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(out, "add", (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit(out, "sub", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit(out, "mul", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _emit(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, "scale", (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data + c, "shift", (a,), lambda g: (g,))


def add_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """a + constant array (no gradient to the constant)."""
    arr = np.asarray(arr, dtype=np.float64)
    out = a.data + arr
    return _emit(out, "add_const", (a,), lambda g: (_unbroadcast(g, a.shape),))


def mul_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """a * constant array (no gradient to the constant); used for validity masks."""
    arr = np.asarray(arr, dtype=np.float64)
    out = a.data * arr
    return _emit(out, "mul_const", (a,), lambda g: (_unbroadcast(g * arr, a.shape),))


# ---------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with exactly matching batch dims (no batch broadcast)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dims must match exactly: {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _emit(out, "matmul", (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w + b over the last axis of x; w is (k, n), b is (n,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, w {w.shape}")
    out = np.matmul(x.data, w.data)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ValueError(f"linear bias must be ({w.shape[1]},), got {b.shape}")
        out += b.data

    def vjp(g):
        gx = np.matmul(g, w.data.T)
        gf = g.reshape(-1, w.shape[1])
        gw = np.matmul(x.data.reshape(-1, w.shape[0]).T, gf)
        if b is None:
            return gx, gw
        return gx, gw, gf.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return _emit(out, "linear", parents, vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalizers


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    xd = x.data
    inner = SQRT_2_OVER_PI * (xd + GELU_CUBIC * xd * xd * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        sech2 = 1.0 - t * t
        dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * sech2 * dinner),)

    return _emit(out, "gelu", (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    gain/bias of None mean the constants 1/0 (the transformer blocks use
    that form; modulation supplies the learned affine there). A constant
    input row maps to bias exactly: zero variance is regularized by eps.
    """
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        dy = g * gain.data if gain is not None else g
        m1 = dy.mean(axis=-1, keepdims=True)
        m2 = (dy * y).mean(axis=-1, keepdims=True)
        gx = inv * (dy - m1 - y * m2)
        grads = [gx]
        if gain is not None:
            grads.append((g * y).reshape(-1, xd.shape[-1]).sum(axis=0))
        if bias is not None:
            grads.append(g.reshape(-1, xd.shape[-1]).sum(axis=0))
        return tuple(grads)

    parents = [x]
    if gain is not None:
        parents.append(gain)
    if bias is not None:
        parents.append(bias)
    return _emit(out, "layer_norm", tuple(parents), vjp)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    xd = x.data
    z = xd - xd.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _emit(y, "softmax", (x,), vjp)


# ---------------------------------------------------------------------------
# attention


def masked_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray) -> Tensor:
    """Scaled dot-product attention with a boolean keep-mask.

    q is (..., S_q, d_h), k/v are (..., S_k, d_h); mask is boolean,
    broadcastable to (..., S_q, S_k), True where attention is allowed.
    Masked-out columns get an additive -1e30, which underflows to an exact
     0.0 weight after the shifted softmax, so masked tokens contribute
    nothing, bit for bit. A row with no allowed column is an error.
    """
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise TypeError("mask must be boolean")
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ValueError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask has a row with no allowed column")
    d_h = q.shape[-1]
    scores = matmul(q, transpose_last(k))
    scores = scale(scores, 1.0 / math.sqrt(d_h))
    bias = np.where(mask, 0.0, MASK_NEG)
    scores = add_const(scores, bias)
    weights = softmax(scores)
    return matmul(weights, v)


# ---------------------------------------------------------------------------
# structure ops


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.shape
    return _emit(out, "reshape", (x,), lambda g: (g.reshape(orig),))


def transpose(x: Tensor, axes: tuple) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), "transpose", (x,), lambda g: (g.transpose(inv),))


def transpose_last(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    return transpose(x, axes)


def concat(parts: list, axis: int) -> Tensor:
    if not parts:
        raise ValueError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(out, "concat", tuple(parts), vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx]
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[idx] = g
        return (gx,)

    return _emit(np.ascontiguousarray(out), "narrow", (x,), vjp)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of table by integer id; grad scatter-adds back."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min {ids.min()}, max {ids.max()}"
        )
    out = table.data[ids]
    d = table.shape[1]
    vocab = table.shape[0]

    def vjp(g):
        gt = np.zeros((vocab, d), dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _emit(out, "embedding_lookup", (table,), vjp)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-sample row gather: x is (B, S, d), idx is (B, S') of row indices."""
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise ValueError(f"take_rows needs (B,S,d) and (B,S') shapes, got {x.shape}, {idx.shape}")
    B, S, d = x.shape
    out = np.take_along_axis(x.data, idx[:, :, None], axis=1)
    flat_idx = (idx + (np.arange(B)[:, None] * S)).reshape(-1)

    def vjp(g):
        gx = np.zeros((B * S, d), dtype=np.float64)
        np.add.at(gx, flat_idx, g.reshape(-1, d))
        return (gx.reshape(B, S, d),)

    return _emit(np.ascontiguousarray(out), "take_rows", (x,), vjp)


def max_reduce(x: Tensor, axis: int) -> Tensor:
    """Max over one axis; the gradient routes to the first (lowest-index) argmax."""
    axis = axis % x.ndim
    out = x.data.max(axis=axis)
    arg = np.expand_dims(x.data.argmax(axis=axis), axis)
    shape = x.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=np.float64)
        np.put_along_axis(gx, arg, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _emit(out, "max_reduce", (x,), vjp)


def mean_reduce(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis; the gradient spreads uniformly along it."""
    axis = axis % x.ndim
    n = x.shape[axis]
    out = x.data.mean(axis=axis)

    def vjp(g):
        return (np.repeat(np.expand_dims(g / n, axis), n, axis=axis),)

    return _emit(out, "mean_reduce", (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum())
    return _emit(out, "sum_all", (x,), lambda g: (np.full(shape, float(g)),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    """Outcome of comparing tape gradients to central finite differences."""

    passed: bool
    tol: float
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    per_param: dict = field(default_factory=dict)
    checked: dict = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        lines = [
            f"grad_check {status}: max rel err {self.max_rel_err:.3e} "
            f"(tol {self.tol:.1e}) at {self.worst_param}{list(self.worst_index)}"
        ]
        for name in sorted(self.per_param):
            lines.append(
                f"  {name}: rel err {self.per_param[name]:.3e} "
                f"({self.checked[name]} components)"
            )
        return "\n".join(lines)


def grad_check(f, params: dict, h: float = 1e-5, tol: float = 1e-4,
               max_components: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare reverse-mode gradients of f against central finite differences.

    f maps {name: Tensor} -> scalar Tensor and must be a pure function of the
    given params. Relative error per component is
    |ad - fd| / max(|ad|, |fd|, 1e-6). When max_components is set, each
    parameter is checked on a deterministic seeded subsample of that many
    components (the count actually checked is reported per parameter).
    """
    leaves = {name: Tensor(arr, requires_grad=True) for name, arr in params.items()}
    with GradTape() as tape:
        loss = f(leaves)
    if loss.shape != ():
        raise ValueError("grad_check target must be scalar")
    tape.backward(loss)
    analytic = {name: tape.grad(t) for name, t in leaves.items()}

    max_rel = 0.0
    worst = ("", ())
    per_param: dict = {}
    checked: dict = {}
    for pi, name in enumerate(sorted(leaves)):
        base = leaves[name].data
        n = base.size
        if max_components is not None and n > max_components:
            rng = np.random.Generator(np.random.Philox(key=[seed, pi]))
            flat_ids = np.sort(rng.choice(n, size=max_components, replace=False))
        else:
            flat_ids = np.arange(n)
        checked[name] = int(flat_ids.size)
        worst_here = 0.0
        ad_flat = analytic[name].reshape(-1)
        for fid in flat_ids:
            plus = base.copy()
            minus = base.copy()
            plus.reshape(-1)[fid] += h
            minus.reshape(-1)[fid] -= h
            lp = f({**leaves, name: Tensor(plus)}).item()
            lm = f({**leaves, name: Tensor(minus)}).item()
            fd = (lp - lm) / (2.0 * h)
            ad = float(ad_flat[fid])
            rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
            if rel > worst_here:
                worst_here = rel
            if rel > max_rel:
                max_rel = rel
                worst = (name, tuple(np.unravel_index(fid, base.shape)))
        per_param[name] = worst_here

    return GradCheckReport(
        passed=max_rel < tol,
        tol=tol,
        max_rel_err=max_rel,
        worst_param=worst[0],
        worst_index=worst[1],
        per_param=per_param,
        checked=checked,
    )


@contextmanager
def no_tape():
    """Run enclosed ops without recording, regardless of surrounding tapes."""
    global _ACTIVE_TAPE
    prev = _ACTIVE_TAPE
    _ACTIVE_TAPE = None
    try:
        yield
    finally:
        _ACTIVE_TAPE = prev

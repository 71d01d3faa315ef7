"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array, a
:class:`Tape` records the primitive operations executed while it is active,
and :func:`backward` replays the tape in reverse, accumulating vector-Jacobian
products into ``Tensor.grad``. There is no higher-order differentiation and
no graph surgery; one tape serves one forward/backward pair and is discarded
afterwards.

Conventions
-----------
* All values are float64. Integer or float32 input is upcast on entry.
* Most operations work on 2-D arrays (rows = graph nodes, columns =
  features); losses and reductions produce 0-d scalars.
* Elementwise binary operations broadcast only between equal shapes or
  against a scalar (0-d / size-1) operand. Per-row scaling, the one
  structured broadcast the models need, has its own primitive
  (:func:`row_mul`) instead of silent numpy broadcasting.
* Operations raise on non-finite input rather than propagate NaNs.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "backward",
    "matmul",
    "spmm",
    "add",
    "sub",
    "mul",
    "scale",
    "row_mul",
    "recip",
    "rsqrt_or_zero",
    "activate",
    "dropout",
    "normalize",
    "mse",
    "masked_mse",
    "cross_entropy",
    "sum_all",
    "pick",
    "ACTIVATIONS",
    "NORM_KINDS",
]

# Guard threshold under which 1/sqrt(x) is defined to be exactly zero.
_RSQRT_CUTOFF = 1e-12


class Tensor:
    """A float64 array plus the gradient accumulated for it.

    ``grad`` is ``None`` until a backward pass reaches the tensor; after
    :func:`backward` it holds d(root)/d(self) with the same shape as
    ``values``.
    """

    __slots__ = ("values", "grad", "name", "_tape")

    def __init__(self, values: np.ndarray, name: Optional[str] = None):
        self.values = values
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional["Tape"] = None

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ValueError(f"item() requires a scalar tensor, shape is {self.shape}")
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{tag})"


def tensor(values, name: Optional[str] = None) -> Tensor:
    """Create a leaf tensor from array-like data (copied, upcast to float64)."""
    arr = np.array(values, dtype=np.float64)
    _require_finite(arr, "tensor")
    return Tensor(arr, name=name)


class _Entry:
    """One recorded primitive: the output tensor and its input pullbacks."""

    __slots__ = ("out", "pulls")

    def __init__(self, out: Tensor, pulls):
        self.out = out
        # pulls: list of (input_tensor, vjp) where vjp maps the output
        # cotangent to the input cotangent.
        self.pulls = pulls


class Tape:
    """Ordered record of primitives, consumed by one backward pass.

    Use as a context manager around the forward computation::

        with Tape():
            loss = mse(predict(params, x), y)
        backward(loss)

    Operations executed while no tape is active run forward-only.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        if popped is not self:  # pragma: no cover - indicates misuse
            raise RuntimeError("tape stack corrupted: exited a tape that is not innermost")

    def __len__(self) -> int:
        return len(self._entries)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, pulls) -> Tensor:
    tape = _active_tape()
    if tape is not None:
        if tape._consumed:
            raise RuntimeError("cannot record onto a tape that has already been consumed")
        tape._entries.append(_Entry(out, pulls))
        out._tape = tape
    return out


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(x) into ``x.grad`` for every tensor feeding root.

    ``root`` must be a scalar (size-1) tensor. The tape that recorded it is
    consumed: its entries are dropped so intermediate arrays can be freed,
    and a second backward over the same tape raises.
    """
    if root.values.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.values.shape}")
    root.grad = np.ones_like(root.values)
    tape = root._tape
    if tape is None:
        return  # a bare leaf: gradient of itself is 1, nothing upstream
    if tape._consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    for entry in reversed(tape._entries):
        g = entry.out.grad
        if g is None:
            continue  # not on the path from root
        for inp, vjp in entry.pulls:
            contrib = vjp(g)
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.values)
            inp.grad += contrib
    tape._consumed = True
    tape._entries.clear()


def _require_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{op}: non-finite values in input")


def _check_inputs(op: str, *tensors: Tensor) -> None:
    for t in tensors:
        _require_finite(t.values, op)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Dense matrix product a @ b for 2-D operands."""
    _check_inputs("matmul", a, b)
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {av.shape} @ {bv.shape}")
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {av.shape} @ {bv.shape}")
    out = Tensor(av @ bv)
    return _record(
        out,
        [
            (a, lambda g, bv=bv: g @ bv.T),
            (b, lambda g, av=av: av.T @ g),
        ],
    )


def spmm(matrix, x: Tensor) -> Tensor:
    """Multiply a constant sparse (or dense) matrix into a tensor.

    ``matrix`` is held fixed: it does not receive a gradient. Coefficient
    dependence of a propagator enters through :func:`row_mul` factors applied
    to the operand and the product, which keeps the sparse kernel itself
    purely structural.
    """
    _check_inputs("spmm", x)
    xv = x.values
    if xv.ndim != 2:
        raise ValueError(f"spmm expects a 2-D dense operand, got shape {xv.shape}")
    if matrix.shape[1] != xv.shape[0]:
        raise ValueError(f"spmm dimensions differ: {matrix.shape} @ {xv.shape}")
    prod = matrix @ xv
    out = Tensor(np.asarray(prod, dtype=np.float64))
    mt = matrix.T
    return _record(out, [(x, lambda g: np.asarray(mt @ g, dtype=np.float64))])


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.values.shape == b.values.shape:
        return
    if a.values.size == 1 or b.values.size == 1:
        return
    raise ValueError(
        f"{op} supports only equal shapes or a scalar operand, "
        f"got {a.values.shape} and {b.values.shape}"
    )


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cotangent down to ``shape`` (identity, or scalar collapse)."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) * np.ones(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("add", a, b)
    _binary_shapes("add", a, b)
    out = Tensor(a.values + b.values)
    return _record(
        out,
        [
            (a, lambda g, s=a.values.shape: _reduce_to(g, s)),
            (b, lambda g, s=b.values.shape: _reduce_to(g, s)),
        ],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("sub", a, b)
    _binary_shapes("sub", a, b)
    out = Tensor(a.values - b.values)
    return _record(
        out,
        [
            (a, lambda g, s=a.values.shape: _reduce_to(g, s)),
            (b, lambda g, s=b.values.shape: -_reduce_to(g, s)),
        ],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_inputs("mul", a, b)
    _binary_shapes("mul", a, b)
    out = Tensor(a.values * b.values)
    return _record(
        out,
        [
            (a, lambda g, bv=b.values, s=a.values.shape: _reduce_to(g * bv, s)),
            (b, lambda g, av=a.values, s=b.values.shape: _reduce_to(g * av, s)),
        ],
    )


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python constant (no gradient for the constant)."""
    _check_inputs("scale", a)
    c = float(c)
    if not np.isfinite(c):
        raise FloatingPointError("scale: non-finite constant")
    out = Tensor(a.values * c)
    return _record(out, [(a, lambda g: g * c)])


def row_mul(x: Tensor, s: Tensor) -> Tensor:
    """Scale each row of ``x`` (n, d) by the column vector ``s`` (n, 1)."""
    _check_inputs("row_mul", x, s)
    xv, sv = x.values, s.values
    if xv.ndim != 2 or sv.shape != (xv.shape[0], 1):
        raise ValueError(f"row_mul expects x (n,d) and s (n,1), got {xv.shape} and {sv.shape}")
    out = Tensor(xv * sv)
    return _record(
        out,
        [
            (x, lambda g, sv=sv: g * sv),
            (s, lambda g, xv=xv: np.sum(g * xv, axis=1, keepdims=True)),
        ],
    )


def recip(x: Tensor) -> Tensor:
    """Elementwise 1/x. Zero entries are a domain error."""
    _check_inputs("recip", x)
    if np.any(x.values == 0.0):
        raise ZeroDivisionError("recip: zero entry in input")
    inv = 1.0 / x.values
    out = Tensor(inv)
    return _record(out, [(x, lambda g, inv=inv: -g * inv * inv)])


def rsqrt_or_zero(x: Tensor) -> Tensor:
    r"""Elementwise 1/sqrt(x) with 1/sqrt(0) defined as 0.

    Entries at or below a tiny cutoff map to exactly 0 with zero gradient;
    this is the convention used for compensated degrees of nodes whose whole
    neighbourhood sits on the other side of a hard partition.
    """
    _check_inputs("rsqrt_or_zero", x)
    if np.any(x.values < -_RSQRT_CUTOFF):
        raise ValueError("rsqrt_or_zero: negative entries")
    mask = x.values > _RSQRT_CUTOFF
    out_vals = np.zeros_like(x.values)
    out_vals[mask] = 1.0 / np.sqrt(x.values[mask])
    out = Tensor(out_vals)

    def pull(g, xv=x.values, mask=mask):
        d = np.zeros_like(xv)
        d[mask] = -0.5 * xv[mask] ** -1.5
        return g * d

    return _record(out, [(x, pull)])


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)
_GELU_CUBIC = 0.044715


def _softplus(v: np.ndarray) -> np.ndarray:
    # log(1 + e^v), stable for large |v|
    return np.logaddexp(0.0, v)


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


#: Supported activation kinds. "identity" exists for diagnostics that need a
#: linear stack (energy floors, frozen-propagator Jacobian probes).
ACTIVATIONS = ("tanh", "gelu", "relu", "sigmoid", "softplus", "identity")


def activate(x: Tensor, kind: str) -> Tensor:
    """Apply a pointwise nonlinearity.

    ``gelu`` uses the tanh approximation
    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))), not the exact erf form;
    the difference is below 1e-3 absolute and the derivative used in the
    backward pass is the exact derivative of the approximation.
    """
    _check_inputs("activate", x)
    v = x.values
    if kind == "tanh":
        t = np.tanh(v)
        out = Tensor(t)
        return _record(out, [(x, lambda g, t=t: g * (1.0 - t * t))])
    if kind == "relu":
        keep = v > 0
        out = Tensor(np.where(keep, v, 0.0))
        return _record(out, [(x, lambda g, keep=keep: g * keep)])
    if kind == "sigmoid":
        s = _sigmoid(v)
        out = Tensor(s)
        return _record(out, [(x, lambda g, s=s: g * s * (1.0 - s))])
    if kind == "softplus":
        out = Tensor(_softplus(v))
        s = _sigmoid(v)
        return _record(out, [(x, lambda g, s=s: g * s)])
    if kind == "gelu":
        u = _SQRT_2_OVER_PI * (v + _GELU_CUBIC * v**3)
        t = np.tanh(u)
        out = Tensor(0.5 * v * (1.0 + t))

        def pull(g, v=v, t=t):
            du = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * v * v)
            return g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)

        return _record(out, [(x, pull)])
    if kind == "identity":
        out = Tensor(v.copy())
        return _record(out, [(x, lambda g: g)])
    raise ValueError(f"unknown activation kind {kind!r}; expected one of {ACTIVATIONS}")


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout: keep with probability 1-rate and rescale by 1/(1-rate).

    Outside training (or at rate 0) this is the identity and records nothing,
    so evaluation never consumes randomness.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    _check_inputs("dropout", x)
    keep = 1.0 - rate
    mask = (rng.random(x.values.shape) < keep) / keep
    out = Tensor(x.values * mask)
    return _record(out, [(x, lambda g, mask=mask: g * mask)])


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

NORM_KINDS = ("layer", "batch")
_NORM_EPS = 1e-5


def normalize(x: Tensor, gain: Tensor, bias: Tensor, kind: str) -> Tensor:
    """Standardize then apply a learned affine map.

    ``layer`` standardizes each row over its features; ``batch`` standardizes
    each column over the rows of the current batch (biased variance, epsilon
    1e-5 added inside the square root). ``gain`` and ``bias`` are (1, d).
    Batch statistics always come from the tensor being normalized; no running
    averages are kept.
    """
    _check_inputs("normalize", x, gain, bias)
    if kind == "layer":
        axis = 1
    elif kind == "batch":
        axis = 0
    else:
        raise ValueError(f"unknown normalize kind {kind!r}; expected one of {NORM_KINDS}")
    v = x.values
    if v.ndim != 2:
        raise ValueError(f"normalize expects a 2-D input, got shape {v.shape}")
    d = v.shape[1]
    if gain.values.shape != (1, d) or bias.values.shape != (1, d):
        raise ValueError(f"normalize gain/bias must have shape (1, {d})")
    mean = v.mean(axis=axis, keepdims=True)
    var = v.var(axis=axis, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _NORM_EPS)
    xhat = (v - mean) * inv_std
    out = Tensor(xhat * gain.values + bias.values)

    m = v.shape[0] if axis == 0 else v.shape[1]

    def pull_x(g, gain_v=gain.values, xhat=xhat, inv_std=inv_std, axis=axis, m=m):
        gh = g * gain_v
        term = gh - gh.mean(axis=axis, keepdims=True) - xhat * (gh * xhat).mean(
            axis=axis, keepdims=True
        )
        return term * inv_std

    return _record(
        out,
        [
            (x, pull_x),
            (gain, lambda g, xhat=xhat: np.sum(g * xhat, axis=0, keepdims=True)),
            (bias, lambda g: np.sum(g, axis=0, keepdims=True)),
        ],
    )


# ---------------------------------------------------------------------------
# losses and reductions
# ---------------------------------------------------------------------------


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over every entry."""
    _check_inputs("mse", pred)
    t = np.asarray(target, dtype=np.float64)
    _require_finite(t, "mse")
    if t.shape != pred.values.shape:
        raise ValueError(f"mse target shape {t.shape} differs from prediction {pred.values.shape}")
    diff = pred.values - t
    out = Tensor(np.asarray(np.mean(diff**2)))
    n = diff.size
    return _record(out, [(pred, lambda g, diff=diff, n=n: (2.0 / n) * diff * g)])


def masked_mse(pred: Tensor, target: np.ndarray, rows) -> Tensor:
    """Mean squared error restricted to the given rows.

    The mean runs over masked rows times feature columns only; unmasked rows
    contribute nothing to the value or the gradient.
    """
    _check_inputs("masked_mse", pred)
    t = np.asarray(target, dtype=np.float64)
    _require_finite(t, "masked_mse")
    rows = np.asarray(rows, dtype=np.int64)
    if rows.ndim != 1 or rows.size == 0:
        raise ValueError("masked_mse needs a non-empty 1-D row index array")
    if t.shape != pred.values.shape:
        raise ValueError(
            f"masked_mse target shape {t.shape} differs from prediction {pred.values.shape}"
        )
    if rows.min() < 0 or rows.max() >= pred.values.shape[0]:
        raise IndexError("masked_mse row index out of range")
    diff = pred.values[rows] - t[rows]
    count = diff.size
    out = Tensor(np.asarray(np.mean(diff**2)))

    def pull(g, diff=diff, rows=rows, shape=pred.values.shape, count=count):
        full = np.zeros(shape)
        full[rows] = (2.0 / count) * diff * g
        return full

    return _record(out, [(pred, pull)])


def cross_entropy(logits: Tensor, labels, rows=None) -> Tensor:
    """Mean negative log-likelihood of integer labels under row softmax.

    ``rows`` optionally restricts the mean to a subset of rows. Uniform
    logits over C classes give exactly log(C).
    """
    _check_inputs("cross_entropy", logits)
    lab = np.asarray(labels, dtype=np.int64)
    v = logits.values
    if v.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got shape {v.shape}")
    if lab.shape != (v.shape[0],):
        raise ValueError(f"cross_entropy labels must have shape ({v.shape[0]},), got {lab.shape}")
    if lab.min() < 0 or lab.max() >= v.shape[1]:
        raise IndexError("cross_entropy label outside the class range")
    if rows is None:
        rows = np.arange(v.shape[0], dtype=np.int64)
    else:
        rows = np.asarray(rows, dtype=np.int64)
        if rows.ndim != 1 or rows.size == 0:
            raise ValueError("cross_entropy needs a non-empty 1-D row index array")
        if rows.min() < 0 or rows.max() >= v.shape[0]:
            raise IndexError("cross_entropy row index out of range")
    sel = v[rows]
    sel_lab = lab[rows]
    shifted = sel - sel.max(axis=1, keepdims=True)
    logz = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logp = shifted - logz
    nll = -logp[np.arange(rows.size), sel_lab]
    out = Tensor(np.asarray(np.mean(nll)))

    def pull(g, shifted=shifted, logz=logz, rows=rows, sel_lab=sel_lab, shape=v.shape):
        soft = np.exp(shifted - logz)
        soft[np.arange(rows.size), sel_lab] -= 1.0
        full = np.zeros(shape)
        full[rows] = soft * (g / rows.size)
        return full

    return _record(out, [(logits, pull)])


def sum_all(x: Tensor) -> Tensor:
    """Sum every entry into a scalar."""
    _check_inputs("sum_all", x)
    out = Tensor(np.asarray(np.sum(x.values)))
    shape = x.values.shape
    return _record(out, [(x, lambda g, shape=shape: np.full(shape, float(g)))])


def pick(x: Tensor, i: int, j: int) -> Tensor:
    """Select the scalar entry x[i, j] (used by Jacobian probes)."""
    _check_inputs("pick", x)
    v = x.values
    if v.ndim != 2:
        raise ValueError(f"pick expects a 2-D input, got shape {v.shape}")
    out = Tensor(np.asarray(v[i, j]))

    def pull(g, shape=v.shape, i=i, j=j):
        full = np.zeros(shape)
        full[i, j] = float(g)
        return full

    return _record(out, [(x, pull)])

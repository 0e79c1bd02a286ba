"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

Values are numpy arrays (0-d scalars, vectors, matrices); every operation is a
pure function that optionally records a vector-Jacobian-product closure on the
innermost active GradTape. With no tape active, operations are plain numpy
calls. Gradients never live on tensors: `backward` returns a map from tensor
id to gradient array, so finished parameter sets can be shared freely across
threads.

Design choices: 64-bit floats everywhere (finite-difference checks need the
headroom), 2-d is the largest supported rank, and tensors without
requires_grad never receive a tape entry, which makes "frozen" a structural
property rather than a runtime check.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateVectorError, ShapeError

_ids = itertools.count()

# Innermost-last stack of active tapes.
_TAPE_STACK: list["GradTape"] = []


class Tensor:
    """Immutable-by-convention dense array with a requires_grad flag.

    `data` exposes the flat row-major view the rest of the package treats as
    canonical. Training loops may swap the underlying array between tape
    scopes via `assign_` (never while a tape that saw the tensor is alive).
    """

    __slots__ = ("array", "requires_grad", "id")

    def __init__(self, array, requires_grad: bool = False):
        # np.ascontiguousarray would promote 0-d scalars to 1-d; keep rank.
        arr = np.asarray(array, dtype=np.float64, order="C")
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-d, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ContractError("tensor values must be finite")
        self.array = arr
        self.requires_grad = bool(requires_grad)
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.array.shape

    @property
    def data(self) -> np.ndarray:
        return self.array.reshape(-1)

    def item(self) -> float:
        if self.array.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.array.reshape(()))

    def assign_(self, array: np.ndarray) -> None:
        """Replace the stored values in place (optimizer use only, off-tape)."""
        arr = np.ascontiguousarray(array, dtype=np.float64)
        if arr.shape != self.array.shape:
            raise ShapeError(f"assign_ shape {arr.shape} != {self.array.shape}")
        self.array = arr

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small operator sugar; the named functions below are the real surface.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(array, requires_grad: bool = False) -> Tensor:
    return Tensor(array, requires_grad=requires_grad)


def _out(arr: np.ndarray) -> Tensor:
    """Fast constructor for operation results.

    Inputs were validated on entry and every op keeps finite values finite
    (log/exp/norms guard themselves), so results skip the finite scan.
    """
    t = Tensor.__new__(Tensor)
    t.array = arr if isinstance(arr, np.ndarray) else np.asarray(arr, dtype=np.float64)
    t.requires_grad = False
    t.id = next(_ids)
    return t


class GradTape:
    """Ordered record of operations for one reverse pass.

    Each entry is (output_id, input_ids, vjps) where vjps[i] maps the output
    gradient to input i's gradient, or is None when that input does not
    require a gradient.
    """

    def __init__(self):
        self.entries: list[tuple[int, tuple[int, ...], tuple]] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "GradTape scopes must nest"


def _record(out: Tensor, inputs: Sequence[Tensor], vjps: Sequence) -> Tensor:
    if _TAPE_STACK:
        keep = tuple(v if t.requires_grad else None for t, v in zip(inputs, vjps))
        if any(v is not None for v in keep):
            out.requires_grad = True
            _TAPE_STACK[-1].entries.append((out.id, tuple(t.id for t in inputs), keep))
    return out


def backward(loss: Tensor, tape: GradTape) -> dict[int, np.ndarray]:
    """Walk the tape in reverse from a scalar loss; return id -> gradient.

    Only tensors reachable from the loss appear; frozen (requires_grad=False)
    tensors are structurally absent.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not any(out_id == loss.id for out_id, _, _ in tape.entries):
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=np.float64)}
    for out_id, input_ids, vjps in reversed(tape.entries):
        g_out = grads.get(out_id)
        if g_out is None:
            continue
        for inp_id, vjp in zip(input_ids, vjps):
            if vjp is None:
                continue
            g = vjp(g_out)
            acc = grads.get(inp_id)
            grads[inp_id] = g if acc is None else acc + g
    return grads


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = _out(a.array + b.array)
    return _record(out, (a, b), (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = _out(a.array - b.array)
    return _record(out, (a, b), (lambda g: g, lambda g: -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = _out(a.array * b.array)
    return _record(out, (a, b), (lambda g: g * b.array, lambda g: g * a.array))


def scale(a: Tensor, c: float) -> Tensor:
    out = _out(a.array * c)
    return _record(out, (a,), (lambda g: g * c,))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Row-broadcast add: a is [m, n], b is [n]."""
    if a.array.ndim != 2 or b.array.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {a.shape} and {b.shape} do not broadcast")
    out = _out(a.array + b.array[None, :])
    return _record(out, (a, b), (lambda g: g, lambda g: g.sum(axis=0)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.array.ndim != 2 or b.array.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    out = _out(a.array @ b.array)
    return _record(
        out, (a, b), (lambda g: g @ b.array.T, lambda g: a.array.T @ g)
    )


def transpose(a: Tensor) -> Tensor:
    out = _out(a.array.T)
    return _record(out, (a,), (lambda g: g.T,))


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows of a 2-d tensor; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.array)
        np.add.at(out, idx, g)
        return out

    out = _out(a.array[idx])
    return _record(out, (a,), (vjp,))


def gather_elements(a: Tensor, rows, cols) -> Tensor:
    """Pick a [k] vector of elements a[rows[i], cols[i]]."""
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(a.array)
        np.add.at(out, (r, c), g)
        return out

    out = _out(a.array[r, c])
    return _record(out, (a,), (vjp,))


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    def vjp(g):
        out = np.zeros_like(a.array)
        out[:, lo:hi] = g
        return out

    out = _out(a.array[:, lo:hi])
    return _record(out, (a,), (vjp,))


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    def vjp(g):
        out = np.zeros_like(a.array)
        out[lo:hi, :] = g
        return out

    out = _out(a.array[lo:hi, :])
    return _record(out, (a,), (vjp,))


def _offsets(sizes: list[int]) -> list[int]:
    acc = [0]
    for s in sizes:
        acc.append(acc[-1] + s)
    return acc


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one part")
    offsets = _offsets([p.shape[0] for p in parts])
    vjps = [
        (lambda lo, hi: (lambda g: g[lo:hi, :]))(offsets[i], offsets[i + 1])
        for i in range(len(parts))
    ]
    out = _out(np.concatenate([p.array for p in parts], axis=0))
    return _record(out, tuple(parts), tuple(vjps))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one part")
    offsets = _offsets([p.shape[1] for p in parts])
    vjps = [
        (lambda lo, hi: (lambda g: g[:, lo:hi]))(offsets[i], offsets[i + 1])
        for i in range(len(parts))
    ]
    out = _out(np.concatenate([p.array for p in parts], axis=1))
    return _record(out, tuple(parts), tuple(vjps))


# ---------------------------------------------------------------------------
# reductions and nonlinearities
# ---------------------------------------------------------------------------


def sum_all(a: Tensor) -> Tensor:
    out = _out(np.asarray(a.array.sum()))
    return _record(out, (a,), (lambda g: np.full_like(a.array, g),))


def mean_all(a: Tensor) -> Tensor:
    n = a.array.size
    out = _out(np.asarray(a.array.mean()))
    return _record(out, (a,), (lambda g: np.full_like(a.array, g / n),))


def log(a: Tensor) -> Tensor:
    if (a.array <= 0).any():
        raise ContractError("log needs strictly positive input")
    out = _out(np.log(a.array))
    return _record(out, (a,), (lambda g: g / a.array,))


def exp(a: Tensor) -> Tensor:
    val = np.exp(a.array)
    if not np.isfinite(val).all():
        raise ContractError("exp overflowed; rescale the input")
    out = _out(val)
    return _record(out, (a,), (lambda g: g * out.array,))


def softplus(a: Tensor) -> Tensor:
    """Smooth ramp log(1 + e^x), computed overflow-free."""
    out = _out(np.logaddexp(0.0, a.array))

    def vjp(g):
        return g / (1.0 + np.exp(-a.array))

    return _record(out, (a,), (vjp,))


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-form GELU; smooth everywhere, so finite differences stay clean."""
    x = a.array
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = _out(0.5 * x * (1.0 + t))

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 0.134145 * x2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner)

    return _record(out, (a,), (vjp,))


def rmsnorm_rows(a: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row to unit RMS (no learned gain)."""
    if a.array.ndim != 2:
        raise ShapeError(f"rmsnorm_rows needs a matrix, got {a.shape}")
    x = a.array
    n = x.shape[1]
    ms = (x * x).mean(axis=1, keepdims=True) + eps
    s = ms**-0.5
    out = _out(x * s)

    def vjp(g):
        dot = (x * g).sum(axis=1, keepdims=True)
        return s * (g - (s * s / n) * x * dot)

    return _record(out, (a,), (vjp,))


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1 within 1e-12."""
    if x.array.ndim != 2:
        raise ShapeError(f"softmax_rows needs a matrix, got {x.shape}")
    z = x.array - x.array.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = _out(p)

    def vjp(g):
        dot = (p * g).sum(axis=1, keepdims=True)
        return p * (g - dot)

    return _record(out, (x,), (vjp,))


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.array.ndim != 2:
        raise ShapeError(f"log_softmax_rows needs a matrix, got {x.shape}")
    z = x.array - x.array.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = _out(z - lse)
    p = np.exp(out.array)

    def vjp(g):
        return g - p * g.sum(axis=1, keepdims=True)

    return _record(out, (x,), (vjp,))


# ---------------------------------------------------------------------------
# similarity
# ---------------------------------------------------------------------------


def cosine(a: Tensor, b: Tensor) -> float:
    """Cosine similarity of two vectors, clamped to [-1, 1].

    Plain real result; the differentiable path is cosine_matrix.
    """
    va, vb = a.array.reshape(-1), b.array.reshape(-1)
    if va.shape != vb.shape:
        raise ShapeError(f"cosine: shapes {a.shape} and {b.shape} differ")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine undefined for zero-norm input")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine: a [n, d] x b [t, d] -> [n, t], differentiable."""
    if a.array.ndim != 2 or b.array.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"cosine_matrix: shapes {a.shape} and {b.shape} differ in d")
    na = np.linalg.norm(a.array, axis=1, keepdims=True)
    nb = np.linalg.norm(b.array, axis=1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateVectorError("cosine_matrix: zero-norm row")
    ah = a.array / na
    bh = b.array / nb
    c = np.clip(ah @ bh.T, -1.0, 1.0)
    out = _out(c)

    def vjp_a(g):
        return (g @ bh - (g * c).sum(axis=1, keepdims=True) * ah) / na

    def vjp_b(g):
        return (g.T @ ah - (g * c).sum(axis=0)[:, None] * bh) / nb

    return _record(out, (a, b), (vjp_a, vjp_b))


def multihead_attention(
    q: Tensor, k: Tensor, v: Tensor, n_heads: int, causal: bool
) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention over n_heads column blocks.

    q is [n, d]; k and v are [m, d]; the result is [n, d] plus the attention
    weights [n_heads, n, m] (plain array, for probing). Scale is
    1/sqrt(d / n_heads). With causal=True (requires n == m) position i only
    attends to positions <= i; rows always sum to 1.
    """
    n, d = q.shape
    m = k.shape[0]
    if d % n_heads:
        raise ShapeError(f"head count {n_heads} must divide width {d}")
    if k.shape[1] != d or v.shape != k.shape:
        raise ShapeError(f"attention shapes differ: q {q.shape}, k {k.shape}, v {v.shape}")
    if causal and n != m:
        raise ShapeError("causal attention needs matching sequence lengths")
    dh = d // n_heads
    scale = 1.0 / np.sqrt(dh)
    # [heads, len, dh] views; batched matmul beats einsum at these sizes.
    qh = q.array.reshape(n, n_heads, dh).transpose(1, 0, 2)
    kh = k.array.reshape(m, n_heads, dh).transpose(1, 0, 2)
    vh = v.array.reshape(m, n_heads, dh).transpose(1, 0, 2)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    if causal:
        scores = scores + np.triu(np.full((n, n), -np.inf), k=1)[None, :, :]
    z = np.exp(scores - scores.max(axis=2, keepdims=True))
    weights = z / z.sum(axis=2, keepdims=True)
    out = _out((weights @ vh).transpose(1, 0, 2).reshape(n, d))

    def split_heads(g):
        return g.reshape(n, n_heads, dh).transpose(1, 0, 2)

    def grad_scores(g):
        gw = split_heads(g) @ vh.transpose(0, 2, 1)
        return weights * (gw - (weights * gw).sum(axis=2, keepdims=True))

    def vjp_q(g):
        return (scale * (grad_scores(g) @ kh)).transpose(1, 0, 2).reshape(n, d)

    def vjp_k(g):
        return (scale * (grad_scores(g).transpose(0, 2, 1) @ qh)).transpose(1, 0, 2).reshape(m, d)

    def vjp_v(g):
        return (weights.transpose(0, 2, 1) @ split_heads(g)).transpose(1, 0, 2).reshape(m, d)

    return _record(out, (q, k, v), (vjp_q, vjp_k, vjp_v)), weights


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    Error per coordinate is |analytic - fd| / max(1, |fd|); f must evaluate
    finite at every probe point.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    with GradTape() as tape:
        loss = f(params)
    grads = backward(loss, tape)

    def evaluate() -> float:
        value = f(params).item()
        if not np.isfinite(value):
            raise ContractError("f is not finite at a probe point")
        return value

    worst = 0.0
    for p in params:
        analytic = grads.get(p.id, np.zeros_like(p.array)).reshape(-1)
        flat = p.array.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = evaluate()
            flat[i] = orig - eps
            f_minus = evaluate()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return worst

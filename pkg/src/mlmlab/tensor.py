"""Define-by-run reverse-mode autodiff over numpy arrays.

A forward pass executes inside a `GradGraph` context; every op appends one
record (inputs, output, backward rule) to the active graph, so the tape's
order *is* the execution order.  `GradGraph.backward` walks the tape once in
reverse and accumulates gradients on tensors.  Graphs are rebuilt every
forward pass and are confined to a single thread; there is no graph reuse.

Training runs in float32, gradient checking in float64 (`finite_diff_check`
enforces the latter).  All reductions use numpy's fixed-order kernels on a
single thread, so repeated runs are bitwise reproducible.
"""
from __future__ import annotations

import hashlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradGraph", "GraphError", "ParamStore",
    "matmul", "add", "scale", "reshape", "transpose", "gather_rows",
    "softmax_rows", "layer_norm", "gelu", "dropout", "cross_entropy_masked",
    "finite_diff_check", "FiniteDiffReport",
]

# Additive logit for blocked attention keys: large enough that exp underflows
# to exactly 0.0 after max-subtraction in both float32 and float64.
NEG_BLOCK = -1e9


class GraphError(RuntimeError):
    pass


class Tensor:
    """numpy array + gradient slot. Parameters carry requires_grad=True."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_graph")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._graph: "GradGraph | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class _Record:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_ACTIVE: "GradGraph | None" = None


class GradGraph:
    """Tape of executed ops. One forward pass per graph, one backward per graph."""

    def __init__(self):
        self._records: list[_Record] = []
        self._backward_done = False

    def __enter__(self) -> "GradGraph":
        global _ACTIVE
        if _ACTIVE is not None:
            raise GraphError("a GradGraph is already active; graphs do not nest")
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = None

    def __len__(self) -> int:
        return len(self._records)

    def op_names(self) -> list[str]:
        return [r.op for r in self._records]

    def signature(self) -> str:
        """Hash of the executed op sequence with input/output shapes."""
        h = hashlib.sha256()
        for r in self._records:
            line = f"{r.op}|{[t.shape for t in r.inputs]}|{r.out.shape}\n"
            h.update(line.encode())
        return h.hexdigest()

    def backward(self, loss: Tensor) -> None:
        """Reverse pass from a scalar loss recorded on this graph."""
        if self._backward_done:
            raise GraphError("backward already ran on this graph; rebuild the graph")
        if loss._graph is not self:
            raise GraphError("loss tensor was not produced on this graph")
        if loss.data.shape != ():
            raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
        self._backward_done = True
        loss.grad = np.ones((), dtype=loss.data.dtype)
        for rec in reversed(self._records):
            g = rec.out.grad
            if g is None:
                continue  # branch not reaching the loss
            for t, gi in zip(rec.inputs, rec.bwd(g)):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, bwd) -> Tensor:
    """Wrap an op result; record it on the active graph when grads are needed."""
    g = _ACTIVE
    track = g is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        out._graph = g
        g._records.append(_Record(op, tuple(inputs), out, bwd))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b. Supports 2-D @ 2-D, N-D @ 2-D, and N-D @ N-D with equal batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.ndim < 2 or B.ndim < 2:
        raise ValueError(f"matmul needs >=2-D operands, got {A.shape} @ {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise ValueError(f"matmul inner-dimension mismatch: {A.shape} @ {B.shape}")
    if B.ndim == 2:
        def bwd(g):
            ga = g @ B.swapaxes(-1, -2)
            # weight grad sums over all leading axes of a
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    elif A.ndim == B.ndim and A.shape[:-2] == B.shape[:-2]:
        def bwd(g):
            return g @ B.swapaxes(-1, -2), A.swapaxes(-1, -2) @ g
    else:
        raise ValueError(f"unsupported matmul batching: {A.shape} @ {B.shape}")
    return _emit("matmul", (a, b), A @ B, bwd)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise a + b; b may be 1-D and broadcast over the last axis (bias)."""
    a, b = _as_tensor(a), _as_tensor(b)
    A, B = a.data, b.data
    if A.shape == B.shape:
        bwd = lambda g: (g, g)
    elif B.ndim == 1 and A.ndim >= 1 and A.shape[-1] == B.shape[0]:
        lead = tuple(range(A.ndim - 1))
        bwd = lambda g: (g, g.sum(axis=lead) if lead else g)
    else:
        raise ValueError(f"add shape mismatch: {A.shape} + {B.shape}")
    return _emit("add", (a, b), A + B, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit("scale", (a,), a.data * np.asarray(c, dtype=a.data.dtype),
                 lambda g: (g * c,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    return _emit("reshape", (a,), a.data.reshape(shape),
                 lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), np.transpose(a.data, axes),
                 lambda g: (np.transpose(g, inv),))


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows a[idx] (first axis). Backward scatter-adds, so repeated
    indices (tied embeddings, segment 0) accumulate correctly."""
    a = _as_tensor(a)
    idx = np.asarray(idx)
    if idx.ndim != 1 or not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"gather_rows needs a 1-D integer index, got {idx.dtype} {idx.shape}")
    n = a.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(np.argmax((idx < 0) | (idx >= n)))
        raise ValueError(f"gather_rows index out of range at position {bad}: "
                         f"{int(idx[bad])} not in [0, {n})")

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _emit("gather_rows", (a,), a.data[idx], bwd)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis with max-subtraction (overflow-safe)."""
    a = _as_tensor(a)
    A = a.data
    z = A - A.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        # dA = y * (g - sum(g*y))
        s = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - s),)

    return _emit("softmax_rows", (a,), y, bwd)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    X = x.data
    h = X.shape[-1]
    if h < 2:
        raise ValueError("layer_norm over a single feature is degenerate (h=1 rejected)")
    if gamma.data.shape != (h,) or beta.data.shape != (h,):
        raise ValueError(f"layer_norm affine shapes must be ({h},), got "
                         f"{gamma.data.shape} and {beta.data.shape}")
    mu = X.mean(axis=-1, keepdims=True)
    var = X.var(axis=-1, keepdims=True)  # biased, matching 1/h
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (X - mu) * inv
    out = xhat * gamma.data + beta.data
    lead = tuple(range(X.ndim - 1))

    def bwd(g):
        dgamma = (g * xhat).sum(axis=lead) if lead else g * xhat
        dbeta = g.sum(axis=lead) if lead else g
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgamma, dbeta

    return _emit("layer_norm", (x, gamma, beta), out, bwd)


# tanh-approximation constants (documented): sqrt(2/pi) and the cubic coefficient
_GELU_C0 = 0.7978845608028654
_GELU_C1 = 0.044715


def _gelu_grad(X: np.ndarray) -> np.ndarray:
    u = _GELU_C0 * (X + _GELU_C1 * X ** 3)
    t = np.tanh(u)
    return 0.5 * (1.0 + t) + 0.5 * X * (1.0 - t ** 2) * _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * X ** 2)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = _as_tensor(x)
    X = x.data
    t = np.tanh(_GELU_C0 * (X + _GELU_C1 * X ** 3))
    return _emit("gelu", (x,), 0.5 * X * (1.0 + t),
                 lambda g: (g * _gelu_grad(X),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. rate=0 is the identity (and records nothing)."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _emit("dropout", (x,), x.data * keep, lambda g: (g * keep,))


def cross_entropy_masked(logits: Tensor, labels, active) -> Tensor:
    """Mean token cross-entropy over active rows of [s, V] logits.

    labels: int[s] gold ids (ignored where inactive); active: bool[s].
    """
    logits = _as_tensor(logits)
    L = logits.data
    if L.ndim != 2:
        raise ValueError(f"cross_entropy_masked expects [s, V] logits, got {L.shape}")
    labels = np.asarray(labels)
    active = np.asarray(active, dtype=bool)
    if labels.shape != (L.shape[0],) or active.shape != (L.shape[0],):
        raise ValueError("labels/active must be 1-D of the sequence length")
    n_active = int(active.sum())
    if n_active == 0:
        raise ValueError("cross_entropy_masked with zero active positions")
    lab = labels[active]
    if lab.min() < 0 or lab.max() >= L.shape[1]:
        raise ValueError("active label id outside vocabulary")
    rows = L[active]
    m = rows.max(axis=-1, keepdims=True)
    z = rows - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    picked = rows[np.arange(n_active), lab]
    loss = (lse - picked).mean(dtype=L.dtype)

    def bwd(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(n_active), lab] -= 1.0
        dl = np.zeros_like(L)
        dl[active] = p * (g / n_active)
        return (dl,)

    return _emit("cross_entropy_masked", (logits,), np.asarray(loss), bwd)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

class ParamStore:
    """Named parameter tensors. Iteration is sorted by name so every
    reduction/update/serialisation order is deterministic."""

    def __init__(self):
        self._d: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._d:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(data), requires_grad=True, name=name)
        self._d[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._d[name]

    def __contains__(self, name: str) -> bool:
        return name in self._d

    def __len__(self) -> int:
        return len(self._d)

    def names(self) -> list[str]:
        return sorted(self._d)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return ((k, self._d[k]) for k in sorted(self._d))

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradient per parameter; parameters the loss never reached get zeros."""
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in self.items()}

    def n_scalars(self) -> int:
        return sum(t.data.size for t in self._d.values())


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

class FiniteDiffReport:
    def __init__(self, max_rel_err: float, worst: list[tuple[str, int, float, float, float]]):
        self.max_rel_err = max_rel_err
        self.worst = worst  # (param, flat index, analytic, numeric, rel err)

    def __repr__(self) -> str:
        lines = [f"max_rel_err={self.max_rel_err:.3e}"]
        for name, i, a, n, r in self.worst:
            lines.append(f"  {name}[{i}] analytic={a:.6e} numeric={n:.6e} rel={r:.3e}")
        return "\n".join(lines)


# Relative-error floor: absolute disagreements below floor*step never matter
# at model scale, and a shared near-zero gradient should not divide by ~0.
_REL_FLOOR = 1e-6


def finite_diff_check(f: Callable[[], Tensor], params: ParamStore,
                      step: float = 1e-5, top_k: int = 5) -> FiniteDiffReport:
    """Compare analytic gradients of loss = f() against central differences.

    f must build the loss from `params` and be deterministic (any RNG frozen);
    a non-reproducible f is rejected.  Parameters must be float64.
    """
    for name, t in params.items():
        if t.data.dtype != np.float64:
            raise ValueError(f"gradient check requires float64 parameters; {name} is {t.data.dtype}")

    v1 = float(f().data)
    v2 = float(f().data)
    if v1 != v2:
        raise ValueError("loss function is not deterministic under repeated evaluation; "
                         "freeze its RNG before gradient checking")

    params.zero_grads()
    with GradGraph() as g:
        loss = f()
        g.backward(loss)
    analytic = params.grads()

    worst: list[tuple[str, int, float, float, float]] = []
    max_rel = 0.0
    for name, t in params.items():
        arr = t.data
        ga = analytic[name]
        flat = arr.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            v = flat[i]
            flat[i] = v + step
            fp = float(f().data)
            flat[i] = v - step
            fm = float(f().data)
            flat[i] = v
            num = (fp - fm) / (2.0 * step)
            a = float(gflat[i])
            rel = abs(a - num) / max(abs(a), abs(num), _REL_FLOOR)
            if rel > max_rel:
                max_rel = rel
            worst.append((name, i, a, num, rel))
            worst.sort(key=lambda w: -w[4])
            del worst[top_k:]
    return FiniteDiffReport(max_rel, worst)

"""Dense tensors with reverse-mode differentiation.

Small numpy-backed tape engine: each op builds an output Tensor holding a
closure that routes the output gradient to its parents. Gradients flow in
reverse topological order and every reduction runs in a fixed order (CSR row
order for sparse aggregation, index order elsewhere), so repeated runs on the
same inputs are bit-identical.
"""
from __future__ import annotations

import json
import logging
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

# gather_rows backward switches from np.add.at to sort+reduceat above this
# many scattered elements; both strategies sum in index order.
_SCATTER_SORT_THRESHOLD = 16384


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes for the requested op."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips tape construction (inference / FD probes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            self.data = data if data.dtype.kind == "f" else data.astype(DEFAULT_DTYPE)
        else:
            self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor (defaults to d(self)/d(self) = 1)."""
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if grad is None else np.asarray(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    """Add g into t.grad.

    own=True donates g: the caller guarantees the array is freshly
    allocated, not aliased by any other consumer, and never read again.
    """
    if t.grad is None:
        t.grad = g if own and g.dtype == t.data.dtype else np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _make(data: np.ndarray, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over dimensions that were broadcast in the forward pass."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}") from e

    def backward(g):
        # g (= out.grad) is never read after this call, so it may be donated
        # to one parent; the other gets a reduction (fresh) or a copy
        ga = _unbroadcast(g, a.shape)
        _accum(a, ga, own=True)
        gb = _unbroadcast(g, b.shape)
        _accum(b, gb, own=gb is not g)

    return _make(data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise ShapeMismatch(f"sub: {a.shape} vs {b.shape}") from e

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape), own=True)
        _accum(b, _unbroadcast(-g, b.shape), own=True)

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}") from e

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape), own=True)
        _accum(b, _unbroadcast(g * a.data, b.shape), own=True)

    return _make(data, (a, b), backward)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accum(a, -g, own=True)

    return _make(-a.data, (a,), backward)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)

    def backward(g):
        _accum(a, g * s, own=True)

    return _make(a.data * s, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T, own=True)
        _accum(b, a.data.T @ g, own=True)

    return _make(data, (a, b), backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)

    def backward(g):
        _accum(a, g.T)

    return _make(a.data.T, (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        # disjoint views of g; donatable since g is consumed by this call
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(p, g[tuple(idx)], own=True)

    return _make(data, tuple(parts), backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    data = a.data.reshape(shape)

    def backward(g):
        _accum(a, np.ascontiguousarray(g.reshape(a.shape)), own=True)

    return _make(data, (a,), backward)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"slice_cols expects a matrix, got {a.shape}")
    data = a.data[:, start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _accum(a, full, own=True)

    return _make(data, (a,), backward)


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"slice_rows expects a matrix, got {a.shape}")
    data = a.data[start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        _accum(a, full, own=True)

    return _make(data, (a,), backward)


def gather_rows(a, idx) -> Tensor:
    """Row lookup a[idx]; backward scatter-adds in a fixed order."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backward(g):
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if idx.size * (a.data.shape[1] if a.ndim == 2 else 1) > _SCATTER_SORT_THRESHOLD:
            order = np.argsort(idx, kind="stable")
            sorted_idx = idx[order]
            starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
            sums = np.add.reduceat(g[order], starts, axis=0)
            a.grad[sorted_idx[starts]] += sums
        else:
            np.add.at(a.grad, idx, g)

    return _make(data, (a,), backward)


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy(), own=True)
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, a.shape).copy(), own=True)

    return _make(data, (a,), backward)


def mean_rows(a) -> Tensor:
    """Arithmetic mean over rows (axis 0)."""
    a = _as_tensor(a)
    n = a.shape[0]
    data = a.data.mean(axis=0)

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape).copy(), own=True)

    return _make(data, (a,), backward)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = _as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        _accum(a, g * (a.data > 0), own=True)

    return _make(data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        _accum(a, g * data * (1.0 - data), own=True)

    return _make(data, (a,), backward)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        _accum(a, g * (1.0 - data * data), own=True)

    return _make(data, (a,), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        _accum(a, g * data, own=True)

    return _make(data, (a,), backward)


def log(a) -> Tensor:
    a = _as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data, own=True)

    return _make(data, (a,), backward)


def softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=1, keepdims=True)
        _accum(a, data * (g - dot), own=True)

    return _make(data, (a,), backward)


def log_softmax_rows(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    data = shifted - lse

    def backward(g):
        soft = np.exp(data)
        _accum(a, g - soft * g.sum(axis=1, keepdims=True), own=True)

    return _make(data, (a,), backward)


def l2_normalize_rows(a) -> Tensor:
    """Scale each row to unit L2 norm; zero rows stay zero (and are logged)."""
    a = _as_tensor(a)
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    zero_rows = norms.ravel() == 0.0
    if zero_rows.any():
        logger.warning("l2_normalize_rows: %d zero row(s) left unnormalized",
                       int(zero_rows.sum()))
    safe = np.where(norms == 0.0, 1.0, norms)
    data = a.data / safe

    def backward(g):
        # d(x/|x|) = g/|x| - x (x.g)/|x|^3 ; zero rows get zero gradient
        dot = (g * a.data).sum(axis=1, keepdims=True)
        grad = g / safe - a.data * dot / (safe ** 3)
        grad[zero_rows] = 0.0
        _accum(a, grad, own=True)

    return _make(data, (a,), backward)


def dropout(a, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return _as_tensor(a)
    a = _as_tensor(a)
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(mask))


# ---------------------------------------------------------------------------
# segment / adjacency ops


class NeighborPlan:
    """Mean-aggregation schedule over directed edges.

    The neighbor index lists are compiled once per packed graph batch into a
    row-normalized CSR adjacency (plus its transpose for the backward pass),
    so each application is one deterministic sparse-dense product, O(E * d).
    """

    __slots__ = ("num_nodes", "num_edges", "matrix", "matrix_t")

    def __init__(self, src: np.ndarray, dst: np.ndarray, num_nodes: int):
        from scipy import sparse

        src = np.asarray(src, dtype=np.intp)
        dst = np.asarray(dst, dtype=np.intp)
        self.num_nodes = int(num_nodes)
        self.num_edges = int(src.size)
        if self.num_edges == 0:
            self.matrix = self.matrix_t = None
            return
        deg = np.bincount(dst, minlength=num_nodes)
        weights = 1.0 / deg[dst]
        mat = sparse.csr_matrix((weights, (dst, src)), shape=(num_nodes, num_nodes))
        mat.sum_duplicates()
        self.matrix = mat
        self.matrix_t = mat.T.tocsr()


def neighbor_mean(h, plan: NeighborPlan) -> Tensor:
    """Per-node mean of neighbor rows; nodes without neighbors get zeros."""
    h = _as_tensor(h)
    if h.shape[0] != plan.num_nodes:
        raise ShapeMismatch(f"neighbor_mean: {h.shape[0]} rows vs plan {plan.num_nodes}")
    out = np.zeros_like(h.data) if plan.matrix is None else plan.matrix @ h.data

    def backward(g):
        if plan.matrix is not None:
            _accum(h, plan.matrix_t @ g, own=True)

    return _make(out, (h,), backward)


def segment_mean_rows(h, starts: np.ndarray, counts: np.ndarray) -> Tensor:
    """Mean of each contiguous row segment; segments must cover all rows."""
    h = _as_tensor(h)
    starts = np.asarray(starts, dtype=np.intp)
    counts = np.asarray(counts, dtype=np.intp)
    sums = np.add.reduceat(h.data, starts, axis=0)
    data = sums / counts[:, None]

    def backward(g):
        _accum(h, np.repeat(g / counts[:, None], counts, axis=0), own=True)

    return _make(data, (h,), backward)


# ---------------------------------------------------------------------------
# parameters and checkpoints

CHECKPOINT_VERSION = 1


class ParamStore:
    """Named collection of trainable tensors with unique names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, t.data.copy())
        return out

    def load_values(self, other: "ParamStore") -> None:
        for name, t in self._params.items():
            t.data = other[name].data.copy()


def save_params(store: ParamStore, path: str, meta: dict | None = None) -> None:
    """Write a checkpoint: npz of name -> array plus a JSON meta entry."""
    blob = {"__meta__": np.frombuffer(
        json.dumps({"version": CHECKPOINT_VERSION, **(meta or {})}).encode(), dtype=np.uint8)}
    for name, t in store.items():
        blob[name] = t.data
    np.savez(path, **blob)


def load_params(path: str) -> tuple[ParamStore, dict]:
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {meta.get('version')}")
        store = ParamStore()
        for name in z.files:
            if name != "__meta__":
                store.add(name, z[name])
    return store, meta


# ---------------------------------------------------------------------------
# finite-difference validation


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor],
               step: float = 1e-5, rel_floor: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central finite differences.

    `f` must rebuild its graph on every call and be deterministic (fix any rng
    seeds inside). Relative error uses max(|analytic|, |numeric|, rel_floor)
    as denominator so near-zero entries are compared absolutely.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.ravel()
            ga_flat = ga.ravel()
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = f().item()
                flat[i] = orig - step
                lo = f().item()
                flat[i] = orig
                gn = (hi - lo) / (2.0 * step)
                err = abs(ga_flat[i] - gn) / max(abs(ga_flat[i]), abs(gn), rel_floor)
                worst = max(worst, err)
    return worst

"""Dense float arrays plus a small reverse-mode tape.

Every op accepts plain ``numpy`` arrays or :class:`Var` handles.  With plain
arrays the op is an ordinary numpy computation.  As soon as one argument is a
``Var`` the result is recorded on that variable's :class:`Tape` and a ``Var``
is returned, so the same layer code serves inference and training.

Only the ops the scene-flow pipeline needs are provided.  Shapes are never
broadcast implicitly except for the bias row of :func:`linear_map`.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Sequence

import numpy as np

DEFAULT_SLOPE = 0.1


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "id", "value")

    def __init__(self, tape: "Tape", id: int, value: np.ndarray):
        self.tape = tape
        self.id = id
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(id={self.id}, shape={self.value.shape})"


@dataclass
class Node:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    ctx: Any
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None


class GradientMap(dict):
    """Node id -> gradient. Nodes the seed does not reach read as zeros."""

    def __init__(self, tape: "Tape"):
        super().__init__()
        self._tape = tape

    def __missing__(self, key: int) -> np.ndarray:
        return np.zeros_like(self._tape.values[key])

    def of(self, var: Var) -> np.ndarray:
        return self[var.id]


class Tape:
    """Append-only record of operations; node ids are positions in ``nodes``."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.values: list[np.ndarray] = []

    def variable(self, value: Any) -> Var:
        value = np.array(value, dtype=np.float64)
        return self._append("leaf", (), value, None, None)

    def record(self, op: str, args: Sequence[Any], value: np.ndarray, vjp, ctx=None) -> Var:
        ids = []
        for a in args:
            if isinstance(a, Var):
                if a.tape is not self:
                    raise ValueError(f"{op}: operands live on different tapes")
                ids.append(a.id)
            else:
                ids.append(None)
        return self._append(op, tuple(ids), value, vjp, ctx)

    def _append(self, op, ids, value, vjp, ctx) -> Var:
        nid = len(self.nodes)
        self.nodes.append(Node(op, ids, nid, ctx, vjp))
        self.values.append(value)
        return Var(self, nid, value)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(tape: Tape, seed: Var | int) -> GradientMap:
    """Reverse sweep from a scalar node; returns gradients for every node."""
    sid = seed.id if isinstance(seed, Var) else int(seed)
    if tape.values[sid].ndim != 0:
        raise ValueError(f"backward seed must be scalar, got shape {tape.values[sid].shape}")
    grads = GradientMap(tape)
    grads[sid] = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes[: sid + 1]):
        g = dict.get(grads, node.output)
        if g is None or node.vjp is None:
            continue
        for iid, gi in zip(node.inputs, node.vjp(g)):
            if iid is None or gi is None:
                continue
            prev = dict.get(grads, iid)
            grads[iid] = gi if prev is None else prev + gi
    return grads


# ---------------------------------------------------------------- MAC counter


class MacCounter:
    def __init__(self) -> None:
        self.total = 0


_MAC_COUNTER: contextvars.ContextVar[MacCounter | None] = contextvars.ContextVar(
    "biflow_mac_counter", default=None
)


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates performed by :func:`linear_map` inside the block."""
    counter = MacCounter()
    token = _MAC_COUNTER.set(counter)
    try:
        yield counter
    finally:
        _MAC_COUNTER.reset(token)


# ---------------------------------------------------------------- helpers


def value_of(x: Any) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def _tape_of(args: Sequence[Any]) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _emit(op: str, args: Sequence[Any], value: np.ndarray, vjp, ctx=None):
    tape = _tape_of(args)
    if tape is None:
        return value
    return tape.record(op, args, value, vjp, ctx)


def _check_same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- ops


def linear_map(x, W, bias=None):
    """``x @ W (+ bias)`` for ``x`` of shape (n, a) and ``W`` of shape (a, b)."""
    xv, Wv = value_of(x), value_of(W)
    if xv.ndim != 2 or Wv.ndim != 2 or xv.shape[1] != Wv.shape[0]:
        raise ValueError(f"linear_map: cannot multiply x{xv.shape} by W{Wv.shape}")
    bv = None
    if bias is not None:
        bv = value_of(bias)
        if bv.shape != (Wv.shape[1],):
            raise ValueError(f"linear_map: bias{bv.shape} does not match W{Wv.shape}")
    counter = _MAC_COUNTER.get()
    if counter is not None:
        counter.total += xv.shape[0] * xv.shape[1] * Wv.shape[1]
    out = xv @ Wv
    if bv is not None:
        out = out + bv

    def vjp(g):
        gx = g @ Wv.T if isinstance(x, Var) else None
        gW = xv.T @ g if isinstance(W, Var) else None
        gb = g.sum(axis=0) if isinstance(bias, Var) else None
        return gx, gW, gb

    return _emit("linear_map", (x, W, bias), out, vjp)


def leaky_relu(x, slope: float = DEFAULT_SLOPE):
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky_relu: slope must lie in [0, 1), got {slope}")
    xv = value_of(x)
    pos = xv >= 0
    out = np.where(pos, xv, slope * xv)
    return _emit("leaky_relu", (x,), out, lambda g: (np.where(pos, g, slope * g),), slope)


def group_max(values):
    """Max over axis 1 of a (G, K, C) array.

    Returns ``(maxima, argmax)``; ties resolve to the lowest member index and the
    gradient flows only to that member.
    """
    vv = value_of(values)
    if vv.ndim != 3:
        raise ValueError(f"group_max: expected (G, K, C), got {vv.shape}")
    if vv.shape[1] == 0:
        raise ValueError("group_max: empty group dimension")
    arg = vv.argmax(axis=1)  # first occurrence wins ties
    out = np.take_along_axis(vv, arg[:, None, :], axis=1)[:, 0, :]

    def vjp(g):
        gv = np.zeros_like(vv)
        np.put_along_axis(gv, arg[:, None, :], g[:, None, :], axis=1)
        return (gv,)

    return _emit("group_max", (values,), out, vjp, arg), arg


def add(a, b):
    av, bv = value_of(a), value_of(b)
    _check_same_shape("add", av, bv)
    return _emit("add", (a, b), av + bv, lambda g: (g, g))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _check_same_shape("sub", av, bv)
    return _emit("sub", (a, b), av - bv, lambda g: (g, -g))


def scale(x, c: float):
    return _emit("scale", (x,), value_of(x) * c, lambda g: (g * c,), c)


def concat(parts: Sequence[Any], axis: int = -1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(parts), out, vjp, axis)


def reshape(x, shape: tuple[int, ...]):
    xv = value_of(x)
    out = xv.reshape(shape)
    return _emit("reshape", (x,), out, lambda g: (g.reshape(xv.shape),))


def _scatter_rows(rows: np.ndarray, n: int, contrib: np.ndarray) -> np.ndarray:
    """Sum rows of ``contrib`` (len(rows), ...) into an (n, ...) array at ``rows``."""
    tail = contrib.shape[1:]
    width = int(np.prod(tail)) if tail else 1
    flat = contrib.reshape(len(rows), width)
    slots = (rows[:, None] * width + np.arange(width)).ravel()
    return np.bincount(slots, weights=flat.ravel(), minlength=n * width).reshape((n,) + tail)


def gather(x, index: np.ndarray):
    """Rows of ``x`` picked by an integer array; result shape ``index.shape + x.shape[1:]``."""
    xv = value_of(x)
    index = np.asarray(index, dtype=np.intp)
    out = xv[index]

    def vjp(g):
        return (_scatter_rows(index.ravel(), xv.shape[0], g.reshape((-1,) + xv.shape[1:])),)

    return _emit("gather", (x,), out, vjp, index)


def expand_members(x, k: int):
    """(G, C) -> (G, k, C) by replicating each row ``k`` times."""
    xv = value_of(x)
    if xv.ndim != 2:
        raise ValueError(f"expand_members: expected (G, C), got {xv.shape}")
    out = np.repeat(xv[:, None, :], k, axis=1)
    return _emit("expand_members", (x,), out, lambda g: (g.sum(axis=1),), k)


def weighted_gather(x, index: np.ndarray, weights: np.ndarray):
    """Row ``i`` of the result is ``sum_j weights[i, j] * x[index[i, j]]``."""
    xv = value_of(x)
    index = np.asarray(index, dtype=np.intp)
    if index.shape != weights.shape or index.ndim != 2:
        raise ValueError(f"weighted_gather: index{index.shape} vs weights{weights.shape}")
    out = np.einsum("gk,gkc->gc", weights, xv[index])

    def vjp(g):
        contrib = weights[:, :, None] * g[:, None, :]
        return (_scatter_rows(index.ravel(), xv.shape[0], contrib.reshape((-1,) + xv.shape[1:])),)

    return _emit("weighted_gather", (x,), out, vjp, (index, weights))


def row_norms(x):
    """Euclidean norm of each row; the subgradient at a zero row is zero."""
    xv = value_of(x)
    n = np.sqrt(np.sum(xv * xv, axis=1))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        return (np.where((n > 0)[:, None], xv / safe[:, None], 0.0) * g[:, None],)

    return _emit("row_norms", (x,), n, vjp)


def total(x):
    """Sum of all entries as a 0-d value."""
    xv = value_of(x)
    return _emit("sum", (x,), np.asarray(xv.sum()), lambda g: (np.full(xv.shape, float(g)),))


# ---------------------------------------------------------------- verification


def grad_check(
    fn: Callable[..., Any],
    inputs: Sequence[np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Largest relative disagreement between tape and central-difference gradients.

    ``fn`` maps the inputs to a scalar.  ``max_coords`` caps the number of
    coordinates probed per input (picked with a seeded RNG); ``None`` probes all.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps must lie in [1e-7, 1e-3], got {eps}")
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tape = Tape()
    handles = [tape.variable(a) for a in arrays]
    out = fn(*handles)
    if not isinstance(out, Var):
        raise ValueError("grad_check: function output does not depend on the inputs")
    grads = backward(tape, out)
    rng = np.random.default_rng(seed)

    worst = 0.0
    for k, (a, h) in enumerate(zip(arrays, handles)):
        analytic = grads.of(h).ravel()
        coords = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            coords = np.sort(rng.choice(a.size, size=max_coords, replace=False))
        for c in coords:
            flat = a.ravel()
            orig = flat[c]
            flat[c] = orig + eps
            hi = float(value_of(fn(*arrays)))
            flat[c] = orig - eps
            lo = float(value_of(fn(*arrays)))
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * eps)
            an = analytic[c]
            err = abs(an - numeric) / max(1e-8, abs(an) + abs(numeric))
            worst = max(worst, err)
    return worst

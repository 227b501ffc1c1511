"""Reverse-mode differentiation over dense float64 arrays.

Every primitive call appends a node to a :class:`Tape`. Backward rules are
written once against a tiny op namespace; the engine runs them either on raw
arrays (plain first-order gradients) or on taped :class:`Tensor` objects
(``create_graph=True``). The second mode records the backward pass itself,
which is what makes gradients of gradients, Hessian-vector products and mixed
second partials available without ever forming a Hessian.

Parameters live in flat :class:`ParamVector` objects; every derivative is
returned in that flat coordinate system.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "LayoutEntry",
    "ParamVector",
    "Tape",
    "Tensor",
    "grad",
    "value_and_grad",
    "hvp",
    "HessianVectorProduct",
    "mixed_partial_vjp",
    "grad_and_mixed_vjp",
    "forward",
]


class TapeError(ValueError):
    """Misuse of a tape: wrong output kind, foreign tensors, frozen tapes."""


class ShapeError(TapeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# --------------------------------------------------------------------------
# Flat parameter vectors
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """A flat float64 vector plus a named layout of the blocks inside it."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout: Sequence[LayoutEntry]):
        values = np.ascontiguousarray(values, dtype=np.float64).reshape(-1)
        layout = tuple(layout)
        offset = 0
        for entry in layout:
            if entry.offset != offset:
                raise ValueError(f"layout entry {entry.name!r} is not contiguous")
            offset += entry.size
        if offset != values.size:
            raise ValueError(
                f"layout covers {offset} values but vector has {values.size}"
            )
        self.values = values
        self.layout = layout

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "ParamVector":
        layout, chunks, offset = [], [], 0
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            layout.append(LayoutEntry(name, tuple(arr.shape), offset))
            chunks.append(arr.reshape(-1))
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.layout)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            e.name: self.values[e.offset : e.offset + e.size].reshape(e.shape)
            for e in self.layout
        }

    def __getitem__(self, name: str) -> np.ndarray:
        for e in self.layout:
            if e.name == name:
                return self.values[e.offset : e.offset + e.size].reshape(e.shape)
        raise KeyError(name)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def __repr__(self) -> str:
        blocks = ", ".join(f"{e.name}{list(e.shape)}" for e in self.layout)
        return f"ParamVector({blocks})"


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def _sum_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast result back to ``shape``."""
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    if lead:
        x = x.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and x.shape[i] != 1)
    if axes:
        x = x.sum(axis=axes, keepdims=True)
    return x.reshape(shape)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return expit(x)


def _pad_axis(x, start, total, axis):
    shape = list(x.shape)
    shape[axis] = total
    out = np.zeros(shape)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + x.shape[axis])
    out[tuple(idx)] = x
    return out


def _slice_axis(x, start, stop, axis):
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    return x[tuple(idx)]


class _ArrayOps:
    """Backward-rule namespace over plain arrays (no recording)."""

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    neg = staticmethod(np.negative)
    matmul = staticmethod(np.matmul)
    square = staticmethod(np.square)
    sigmoid = staticmethod(_sigmoid)
    reciprocal = staticmethod(np.reciprocal)
    sum_to = staticmethod(_sum_to)

    @staticmethod
    def transpose(x):
        return x.T

    @staticmethod
    def reshape(x, shape):
        return x.reshape(shape)

    @staticmethod
    def broadcast_to(x, shape):
        return np.broadcast_to(x, shape)

    @staticmethod
    def scale(x, c):
        return x * c

    @staticmethod
    def step(x):
        return (x > 0).astype(np.float64)

    @staticmethod
    def slice_axis(x, start, stop, axis):
        return _slice_axis(x, start, stop, axis)

    @staticmethod
    def pad_axis(x, start, total, axis):
        return _pad_axis(x, start, total, axis)


class _TensorOps:
    """Backward-rule namespace that records onto the tape."""

    @staticmethod
    def add(a, b):
        return add(a, b)

    @staticmethod
    def sub(a, b):
        return sub(a, b)

    @staticmethod
    def mul(a, b):
        return mul(a, b)

    @staticmethod
    def neg(a):
        return neg(a)

    @staticmethod
    def matmul(a, b):
        return matmul(a, b)

    @staticmethod
    def square(a):
        return square(a)

    @staticmethod
    def sigmoid(a):
        return sigmoid(a)

    @staticmethod
    def reciprocal(a):
        return reciprocal(a)

    @staticmethod
    def sum_to(a, shape):
        return sum_to(a, shape)

    @staticmethod
    def transpose(a):
        return transpose(a)

    @staticmethod
    def reshape(a, shape):
        return reshape(a, shape)

    @staticmethod
    def broadcast_to(a, shape):
        return broadcast_to(a, shape)

    @staticmethod
    def scale(a, c):
        return scale(a, c)

    @staticmethod
    def step(a):
        return step(a)

    @staticmethod
    def slice_axis(a, start, stop, axis):
        return slice_axis(a, start, stop, axis)

    @staticmethod
    def pad_axis(a, start, total, axis):
        return pad_axis(a, start, total, axis)


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., np.ndarray]
    # vjp(F, g, inputs, out, attrs) -> tuple of cotangents (None means zero)
    vjp: Callable | None


PRIMITIVES: dict[str, Primitive] = {}


def _register(name, forward, vjp):
    PRIMITIVES[name] = Primitive(name, forward, vjp)


def _vjp_add(F, g, ins, out, attrs):
    return F.sum_to(g, attrs["shapes"][0]), F.sum_to(g, attrs["shapes"][1])


def _vjp_sub(F, g, ins, out, attrs):
    return F.sum_to(g, attrs["shapes"][0]), F.neg(F.sum_to(g, attrs["shapes"][1]))


def _vjp_mul(F, g, ins, out, attrs):
    a, b = ins
    return F.sum_to(F.mul(g, b), attrs["shapes"][0]), F.sum_to(F.mul(g, a), attrs["shapes"][1])


def _vjp_matmul(F, g, ins, out, attrs):
    a, b = ins
    return F.matmul(g, F.transpose(b)), F.matmul(F.transpose(a), g)


def _vjp_sum(F, g, ins, out, attrs):
    return (F.broadcast_to(g, attrs["shapes"][0]),)


_register("add", lambda a, b: a + b, _vjp_add)
_register("sub", lambda a, b: a - b, _vjp_sub)
_register("mul", lambda a, b: a * b, _vjp_mul)
_register("neg", lambda a: -a, lambda F, g, ins, out, attrs: (F.neg(g),))
_register("scale", lambda a, c: a * c, lambda F, g, ins, out, attrs: (F.scale(g, attrs["c"]),))
_register("matmul", lambda a, b: a @ b, _vjp_matmul)
_register("transpose", lambda a: a.T, lambda F, g, ins, out, attrs: (F.transpose(g),))
_register(
    "reshape",
    lambda a, shape: a.reshape(shape),
    lambda F, g, ins, out, attrs: (F.reshape(g, attrs["shapes"][0]),),
)
_register(
    "broadcast_to",
    lambda a, shape: np.broadcast_to(a, shape).copy(),
    lambda F, g, ins, out, attrs: (F.sum_to(g, attrs["shapes"][0]),),
)
_register(
    "sum_to",
    lambda a, shape: _sum_to(a, shape),
    lambda F, g, ins, out, attrs: (F.broadcast_to(g, attrs["shapes"][0]),),
)
_register("sum", lambda a: np.asarray(a.sum()), _vjp_sum)
# relu'(0) is taken as 0
_register("relu", lambda a: np.maximum(a, 0.0), lambda F, g, ins, out, attrs: (F.mul(g, F.step(ins[0])),))
_register("step", lambda a: (a > 0).astype(np.float64), None)
_register("square", np.square, lambda F, g, ins, out, attrs: (F.mul(g, F.scale(ins[0], 2.0)),))
_register("exp", np.exp, lambda F, g, ins, out, attrs: (F.mul(g, out),))
_register("log", np.log, lambda F, g, ins, out, attrs: (F.mul(g, F.reciprocal(ins[0])),))
_register(
    "reciprocal",
    np.reciprocal,
    lambda F, g, ins, out, attrs: (F.neg(F.mul(g, F.square(out))),),
)
_register(
    "sigmoid",
    _sigmoid,
    lambda F, g, ins, out, attrs: (F.mul(g, F.sub(out, F.square(out))),),
)
_register("softplus", _softplus, lambda F, g, ins, out, attrs: (F.mul(g, F.sigmoid(ins[0])),))
_register(
    "slice_axis",
    lambda a, start, stop, axis: _slice_axis(a, start, stop, axis).copy(),
    lambda F, g, ins, out, attrs: (
        F.pad_axis(g, attrs["start"], attrs["shapes"][0][attrs["axis"]], attrs["axis"]),
    ),
)
_register(
    "pad_axis",
    _pad_axis,
    lambda F, g, ins, out, attrs: (
        F.slice_axis(g, attrs["start"], attrs["start"] + attrs["shapes"][0][attrs["axis"]], attrs["axis"]),
    ),
)


def _vjp_concat(F, g, ins, out, attrs):
    axis = attrs["axis"]
    cts, start = [], 0
    for shape in attrs["shapes"]:
        stop = start + shape[axis]
        cts.append(F.slice_axis(g, start, stop, axis))
        start = stop
    return tuple(cts)


_register("concat", lambda *arrs, axis: np.concatenate(arrs, axis=axis), _vjp_concat)

# attrs forwarded to the forward function as keyword arguments
_FORWARD_KWARGS = {
    "scale": ("c",),
    "reshape": ("shape",),
    "broadcast_to": ("shape",),
    "sum_to": ("shape",),
    "slice_axis": ("start", "stop", "axis"),
    "pad_axis": ("start", "total", "axis"),
    "concat": ("axis",),
}


# --------------------------------------------------------------------------
# Tape and Tensor
# --------------------------------------------------------------------------

_LEAF_KINDS = ("param", "input", "const")


@dataclass
class Node:
    op: str  # primitive name or one of _LEAF_KINDS
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray
    name: str | None = None


class Tensor:
    """Handle to one node of a tape."""

    __slots__ = ("tape", "id")
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def __repr__(self) -> str:
        node = self.tape.nodes[self.id]
        return f"Tensor(id={self.id}, op={node.op}, shape={self.shape})"


class Tape:
    """Ordered record of primitive applications.

    Node ids are positions in ``nodes``; every input id precedes its consumer,
    so list order is a topological order. ``roots`` holds the ids of parameter
    leaves.
    """

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.roots: list[int] = []
        self.check_finite = check_finite
        self.frozen = False
        self._param_layouts: list[tuple[ParamVector, dict[str, Tensor]]] = []

    def __len__(self) -> int:
        return len(self.nodes)

    # -- leaves ------------------------------------------------------------

    def _push(self, op, inputs, attrs, value, name=None) -> Tensor:
        if self.frozen:
            raise TapeError("tape is frozen; no further recording allowed")
        self.nodes.append(Node(op, tuple(inputs), attrs, value, name))
        return Tensor(self, len(self.nodes) - 1)

    def param(self, value, name: str | None = None) -> Tensor:
        t = self._push("param", (), {}, np.array(value, dtype=np.float64), name)
        self.roots.append(t.id)
        return t

    def input(self, value, name: str | None = None) -> Tensor:
        return self._push("input", (), {}, np.array(value, dtype=np.float64), name)

    def const(self, value) -> Tensor:
        return self._push("const", (), {}, np.asarray(value, dtype=np.float64))

    def bind(self, params: ParamVector, prefix: str = "") -> dict[str, Tensor]:
        """Create one parameter leaf per layout block."""
        leaves = {
            e.name: self.param(arr, prefix + e.name) for e, arr in zip(params.layout, params.arrays().values())
        }
        self._param_layouts.append((params, leaves))
        return leaves

    # -- recording ---------------------------------------------------------

    def apply(self, op: str, operands: Sequence, **attrs) -> Tensor:
        prim = PRIMITIVES[op]
        ids, values = [], []
        for x in operands:
            if isinstance(x, Tensor):
                if x.tape is not self:
                    raise TapeError(f"{op}: operand belongs to a different tape")
                ids.append(x.id)
                values.append(x.value)
            else:
                c = self.const(x)
                ids.append(c.id)
                values.append(c.value)
        attrs["shapes"] = tuple(v.shape for v in values)
        kwargs = {k: attrs[k] for k in _FORWARD_KWARGS.get(op, ())}
        try:
            # non-finite results are reported below with the node index
            with np.errstate(all="ignore"):
                value = np.asarray(prim.forward(*values, **kwargs), dtype=np.float64)
        except ValueError as exc:
            raise ShapeError(
                f"{op} at node {len(self.nodes)} rejected operand shapes {attrs['shapes']}: {exc}"
            ) from None
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{op} at node {len(self.nodes)} produced non-finite values")
        return self._push(op, ids, attrs, value)

    # -- replay ------------------------------------------------------------

    def replay(
        self,
        params: ParamVector | Sequence[ParamVector] | None = None,
        inputs: Mapping[str, np.ndarray] | None = None,
        output: Tensor | int | None = None,
    ) -> np.ndarray:
        """Re-run the recorded program on new leaf values.

        ``params`` replace the blocks bound with :meth:`bind` (in bind order);
        ``inputs`` replace input leaves by name. Saved values are overwritten so
        a later backward pass sees the new activations.
        """
        stop = len(self.nodes) - 1 if output is None else int(getattr(output, "id", output))
        if params is not None:
            plist = [params] if isinstance(params, ParamVector) else list(params)
            if len(plist) != len(self._param_layouts):
                raise TapeError(
                    f"tape has {len(self._param_layouts)} bound parameter groups, got {len(plist)}"
                )
            for new, (old, leaves) in zip(plist, self._param_layouts):
                if not new.same_layout(old):
                    raise ShapeError(f"parameter layout mismatch: {new!r} vs {old!r}")
                for name, arr in new.arrays().items():
                    self.nodes[leaves[name].id].value = np.array(arr)
        if inputs:
            seen = set()
            for node in self.nodes:
                if node.op == "input" and node.name in inputs:
                    new = np.asarray(inputs[node.name], dtype=np.float64)
                    if new.shape != node.value.shape:
                        raise ShapeError(
                            f"input {node.name!r} expects shape {node.value.shape}, got {new.shape}"
                        )
                    node.value = new.copy()
                    seen.add(node.name)
            missing = set(inputs) - seen
            if missing:
                raise TapeError(f"unknown input names {sorted(missing)}")
        for i in range(stop + 1):
            node = self.nodes[i]
            if node.op in _LEAF_KINDS:
                continue
            prim = PRIMITIVES[node.op]
            values = [self.nodes[j].value for j in node.inputs]
            shapes = tuple(v.shape for v in values)
            if shapes != node.attrs["shapes"]:
                raise ShapeError(
                    f"node {i} ({node.op}) expected operand shapes {node.attrs['shapes']}, got {shapes}"
                )
            kwargs = {k: node.attrs[k] for k in _FORWARD_KWARGS.get(node.op, ())}
            with np.errstate(all="ignore"):
                node.value = np.asarray(prim.forward(*values, **kwargs), dtype=np.float64)
            if self.check_finite and not np.all(np.isfinite(node.value)):
                raise NonFiniteError(f"node {i} ({node.op}) produced non-finite values on replay")
        return self.nodes[stop].value

    # -- differentiation ---------------------------------------------------

    def gradient(
        self,
        output: Tensor,
        wrt: Sequence[Tensor],
        create_graph: bool = False,
    ) -> list:
        """Cotangents of scalar ``output`` with respect to each tensor in ``wrt``.

        Returns arrays, or Tensors recorded on this tape when ``create_graph``
        is set (those can be differentiated again).
        """
        if not isinstance(output, Tensor) or output.tape is not self:
            raise TapeError("output must be a Tensor recorded on this tape")
        if output.shape != ():
            raise TapeError(f"output must be scalar, got shape {output.shape}")
        for w in wrt:
            if not isinstance(w, Tensor) or w.tape is not self:
                raise TapeError(
                    "wrt entries must be Tensors on this tape; a gradient taken "
                    "without create_graph cannot be differentiated again"
                )
        out_id = output.id
        wrt_ids = {w.id for w in wrt}
        nodes = self.nodes

        depends = np.zeros(out_id + 1, dtype=bool)
        for i in range(out_id + 1):
            if i in wrt_ids:
                depends[i] = True
            else:
                ins = nodes[i].inputs
                if ins and nodes[i].op in PRIMITIVES and PRIMITIVES[nodes[i].op].vjp is not None:
                    depends[i] = any(depends[j] for j in ins)

        F = _TensorOps if create_graph else _ArrayOps
        results: dict[int, object] = {}
        if depends[out_id]:
            seed = self.const(np.ones(())) if create_graph else np.ones(())
            cot: dict[int, object] = {out_id: seed}
            for i in range(out_id, -1, -1):
                g = cot.pop(i, None)
                if g is None:
                    continue
                if i in wrt_ids:
                    results[i] = g
                node = nodes[i]
                if node.op in _LEAF_KINDS:
                    continue
                if create_graph:
                    ins = [Tensor(self, j) for j in node.inputs]
                    out = Tensor(self, i)
                else:
                    ins = [nodes[j].value for j in node.inputs]
                    out = node.value
                cts = PRIMITIVES[node.op].vjp(F, g, ins, out, node.attrs)
                for j, ct in zip(node.inputs, cts):
                    if ct is None or not depends[j]:
                        continue
                    prev = cot.get(j)
                    cot[j] = ct if prev is None else F.add(prev, ct)

        grads = []
        for w in wrt:
            g = results.get(w.id)
            if g is None:
                g = self.const(np.zeros(w.shape)) if create_graph else np.zeros(w.shape)
            elif not create_graph:
                g = np.array(g, dtype=np.float64)
            grads.append(g)
        return grads


# --------------------------------------------------------------------------
# Recording helpers (the public primitive surface)
# --------------------------------------------------------------------------


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Tensor):
            return x.tape
    raise TapeError("at least one operand must be a Tensor")


def add(a, b):
    return _tape_of(a, b).apply("add", (a, b))


def sub(a, b):
    return _tape_of(a, b).apply("sub", (a, b))


def mul(a, b):
    return _tape_of(a, b).apply("mul", (a, b))


def neg(a):
    return a.tape.apply("neg", (a,))


def scale(a, c: float):
    return a.tape.apply("scale", (a,), c=float(c))


def matmul(a, b):
    tape = _tape_of(a, b)
    sa = a.shape if isinstance(a, Tensor) else np.shape(a)
    sb = b.shape if isinstance(b, Tensor) else np.shape(b)
    if len(sa) != 2 or len(sb) != 2:
        raise ShapeError(f"matmul at node {len(tape.nodes)} needs 2-D operands, got {sa} and {sb}")
    if sa[1] != sb[0]:
        raise ShapeError(f"matmul at node {len(tape.nodes)}: inner dimensions {sa} @ {sb} disagree")
    return tape.apply("matmul", (a, b))


def transpose(a):
    return a.tape.apply("transpose", (a,))


def reshape(a, shape):
    return a.tape.apply("reshape", (a,), shape=tuple(shape))


def broadcast_to(a, shape):
    return a.tape.apply("broadcast_to", (a,), shape=tuple(shape))


def sum_to(a, shape):
    return a.tape.apply("sum_to", (a,), shape=tuple(shape))


def tsum(a):
    return a.tape.apply("sum", (a,))


def mean(a):
    return scale(tsum(a), 1.0 / a.value.size)


def relu(a):
    return a.tape.apply("relu", (a,))


def step(a):
    return a.tape.apply("step", (a,))


def square(a):
    return a.tape.apply("square", (a,))


def exp(a):
    return a.tape.apply("exp", (a,))


def log(a):
    return a.tape.apply("log", (a,))


def reciprocal(a):
    return a.tape.apply("reciprocal", (a,))


def sigmoid(a):
    return a.tape.apply("sigmoid", (a,))


def softplus(a):
    return a.tape.apply("softplus", (a,))


def slice_axis(a, start, stop, axis):
    return a.tape.apply("slice_axis", (a,), start=int(start), stop=int(stop), axis=int(axis))


def pad_axis(a, start, total, axis):
    return a.tape.apply("pad_axis", (a,), start=int(start), total=int(total), axis=int(axis))


def concat(parts: Sequence, axis: int = 0):
    return _tape_of(*parts).apply("concat", tuple(parts), axis=int(axis))


def logistic_loss(scores, labels):
    """Mean of log(1 + exp(-y * s)) with labels in {-1, +1}."""
    return mean(softplus(neg(mul(scores, labels))))


def vdot(a: Tensor, b) -> Tensor:
    return tsum(mul(a, b))


# --------------------------------------------------------------------------
# Functional front end over ParamVectors
# --------------------------------------------------------------------------


def _flatten(grads: Sequence, like: ParamVector) -> ParamVector:
    if not grads:
        return like.zeros_like()
    return like.with_values(np.concatenate([np.asarray(g).reshape(-1) for g in grads]))


def _flatten_tensors(grads: Sequence[Tensor]) -> Tensor:
    flat = [reshape(g, (g.value.size,)) for g in grads]
    return flat[0] if len(flat) == 1 else concat(flat, axis=0)


def forward(tape: Tape, params=None, inputs=None, output=None) -> np.ndarray:
    """Replay a recorded tape; see :meth:`Tape.replay`."""
    return tape.replay(params, inputs, output)


def value_and_grad(fn: Callable, params: ParamVector, *args) -> tuple[float, ParamVector]:
    """``fn(leaves, *args)`` must return a scalar Tensor."""
    tape = Tape()
    leaves = tape.bind(params)
    out = fn(leaves, *args)
    grads = tape.gradient(out, list(leaves.values()))
    return out.item(), _flatten(grads, params)


def grad(fn: Callable, params: ParamVector, *args) -> ParamVector:
    return value_and_grad(fn, params, *args)[1]


class HessianVectorProduct:
    """Callable v -> (d^2 fn / d theta^2) v, built by double backward.

    The first-order gradient graph is recorded once; each call differentiates
    <grad, v> again, so repeated products (as in conjugate gradient) reuse the
    forward and first backward passes.
    """

    def __init__(self, fn: Callable, params: ParamVector, *args):
        self.params = params
        self.tape = Tape()
        self._leaves = list(self.tape.bind(params).values())
        out = fn(dict(zip(params.names, self._leaves)), *args)
        self.value = out.item()
        g = self.tape.gradient(out, self._leaves, create_graph=True)
        self._flat_grad = _flatten_tensors(g)
        self.gradient = params.with_values(self._flat_grad.value.copy())
        self._mark = len(self.tape.nodes)

    def __call__(self, vector) -> np.ndarray:
        v = vector.values if isinstance(vector, ParamVector) else np.asarray(vector, dtype=np.float64)
        if v.shape != (self.params.size,):
            raise ShapeError(f"vector has shape {v.shape}, expected ({self.params.size},)")
        # drop nodes recorded by the previous product so the tape stays small
        del self.tape.nodes[self._mark :]
        inner = vdot(self._flat_grad, v)
        hv = self.tape.gradient(inner, self._leaves)
        return np.concatenate([h.reshape(-1) for h in hv])


def hvp(fn: Callable, params: ParamVector, vector: ParamVector, *args) -> ParamVector:
    if isinstance(vector, ParamVector) and not vector.same_layout(params):
        raise ShapeError("vector layout differs from params layout")
    return params.with_values(HessianVectorProduct(fn, params, *args)(vector))


def grad_and_mixed_vjp(
    fn: Callable, params_a: ParamVector, params_b: ParamVector, vector, *args
) -> tuple[float, ParamVector, ParamVector, ParamVector]:
    """One tape for: value, grad_a, grad_b and grad_a <grad_b fn, vector>.

    ``fn(leaves_a, leaves_b, *args)`` must return a scalar Tensor.
    """
    v = vector.values if isinstance(vector, ParamVector) else np.asarray(vector, dtype=np.float64)
    if isinstance(vector, ParamVector) and not vector.same_layout(params_b):
        raise ShapeError("vector layout differs from params_b layout")
    if v.shape != (params_b.size,):
        raise ShapeError(f"vector has shape {v.shape}, expected ({params_b.size},)")
    tape = Tape()
    la = tape.bind(params_a)
    lb = tape.bind(params_b)
    out = fn(la, lb, *args)
    a_leaves, b_leaves = list(la.values()), list(lb.values())
    grads = tape.gradient(out, a_leaves + b_leaves, create_graph=True)
    ga, gb = grads[: len(a_leaves)], grads[len(a_leaves) :]
    inner = vdot(_flatten_tensors(gb), v)
    mixed = tape.gradient(inner, a_leaves)
    return (
        out.item(),
        _flatten([g.value for g in ga], params_a),
        _flatten([g.value for g in gb], params_b),
        _flatten(mixed, params_a),
    )


def mixed_partial_vjp(
    fn: Callable, params_a: ParamVector, params_b: ParamVector, vector, *args
) -> ParamVector:
    """(d/da d/db fn)^T v: differentiate <grad_b fn, v> with respect to a."""
    return grad_and_mixed_vjp(fn, params_a, params_b, vector, *args)[3]

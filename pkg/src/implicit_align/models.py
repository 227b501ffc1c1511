"""Representation network, per-group linear heads and the two prediction losses.

The representation is an MLP mapping inputs to an embedding; heads are
strictly linear (weight vector plus bias). Everything that needs derivatives
is written against :mod:`implicit_align.autodiff` tensors; ``transform`` and
``Head.scores`` are plain numpy fast paths used when nothing is differentiated.

Checkpoint files are a single text header line followed by little-endian
float64 values::

    IACKPT1 W0:5x3@0 b0:3@15 W1:3x3@18 b1:3@27\n<raw float64 bytes>

Each header entry is ``name:shape@offset`` with shape dims joined by ``x``
(``-`` for a scalar).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import LayoutEntry, ParamVector, Tape, Tensor


class LossKind(str, Enum):
    SQUARE = "square"
    LOGISTIC = "logistic"

    @property
    def task(self) -> str:
        return "regression" if self is LossKind.SQUARE else "binary_classification"

    @property
    def code(self) -> int:
        return _kernels.SQUARE if self is LossKind.SQUARE else _kernels.LOGISTIC

    @classmethod
    def for_task(cls, task: str) -> "LossKind":
        if task == "regression":
            return cls.SQUARE
        if task == "binary_classification":
            return cls.LOGISTIC
        raise ValueError(f"unknown task {task!r}")


ACTIVATIONS = ("relu", "linear")


def _activate(x, kind: str):
    if kind == "relu":
        return ad.relu(x) if isinstance(x, Tensor) else np.maximum(x, 0.0)
    if kind == "linear":
        return x
    raise ValueError(f"unknown activation {kind!r}")


def _project(values: np.ndarray, cap: float | None) -> np.ndarray:
    if cap is None:
        return values
    n = float(np.linalg.norm(values))
    return values * (cap / n) if n > cap else values


@dataclass
class ReprNet:
    """MLP ``x -> z`` with layer widths ``arch`` (input, hidden..., embed).

    Hidden layers use ``activation``; the embedding layer uses
    ``final_activation`` (linear unless configured otherwise).
    """

    params: ParamVector
    arch: tuple[int, ...]
    activation: str = "relu"
    final_activation: str = "linear"
    norm_cap: float | None = None

    def __post_init__(self):
        self.arch = tuple(int(a) for a in self.arch)
        if len(self.arch) < 2 or min(self.arch) < 1:
            raise ValueError(f"arch needs an input and an embed width >= 1, got {self.arch}")
        for act in (self.activation, self.final_activation):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        expected = self.param_count(self.arch)
        if self.params.size != expected:
            raise ValueError(f"arch {self.arch} implies {expected} parameters, got {self.params.size}")

    @staticmethod
    def param_count(arch) -> int:
        return sum(a * b + b for a, b in zip(arch[:-1], arch[1:]))

    @classmethod
    def init(
        cls,
        arch,
        seed: int = 0,
        activation: str = "relu",
        final_activation: str = "linear",
        norm_cap: float | None = None,
    ) -> "ReprNet":
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(seed)
        arrays = {}
        for i, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:])):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[f"W{i}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            arrays[f"b{i}"] = np.zeros(fan_out)
        params = ParamVector.from_arrays(arrays)
        params = params.with_values(_project(params.values, norm_cap))
        return cls(params, tuple(arch), activation, final_activation, norm_cap)

    @property
    def input_dim(self) -> int:
        return self.arch[0]

    @property
    def embed_dim(self) -> int:
        return self.arch[-1]

    @property
    def n_layers(self) -> int:
        return len(self.arch) - 1

    def with_values(self, values) -> "ReprNet":
        values = _project(np.asarray(values, dtype=np.float64), self.norm_cap)
        return replace(self, params=self.params.with_values(values))

    def _check_width(self, x):
        shape = x.shape if isinstance(x, Tensor) else np.shape(x)
        if len(shape) != 2 or shape[1] != self.input_dim:
            raise ValueError(f"expected inputs of shape (n, {self.input_dim}), got {tuple(shape)}")

    def forward(self, leaves: Mapping[str, Tensor], x) -> Tensor:
        """Taped forward pass with parameters given as tape leaves."""
        self._check_width(x)
        h = x
        for i in range(self.n_layers):
            h = ad.add(ad.matmul(h, leaves[f"W{i}"]), leaves[f"b{i}"])
            act = self.final_activation if i == self.n_layers - 1 else self.activation
            h = _activate(h, act)
        return h

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Untaped numpy forward pass."""
        self._check_width(x)
        arrs = self.params.arrays()
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            h = h @ arrs[f"W{i}"] + arrs[f"b{i}"]
            act = self.final_activation if i == self.n_layers - 1 else self.activation
            h = _activate(h, act)
        return h


@dataclass
class Head:
    """Linear predictor ``z -> w.z + b``; params layout is ``w`` (k,), ``b`` ()."""

    params: ParamVector
    task: str = "regression"
    norm_cap: float | None = None

    def __post_init__(self):
        if self.params.names != ("w", "b"):
            raise ValueError(f"head layout must be (w, b), got {self.params.names}")
        LossKind.for_task(self.task)

    @classmethod
    def from_flat(cls, values, task: str = "regression", norm_cap: float | None = None) -> "Head":
        values = np.asarray(values, dtype=np.float64)
        k = values.size - 1
        return cls(ParamVector(values, head_layout(k)), task, norm_cap)

    @classmethod
    def zeros(cls, embed_dim: int, task: str = "regression") -> "Head":
        return cls.from_flat(np.zeros(embed_dim + 1), task)

    @classmethod
    def init(cls, embed_dim: int, seed: int = 0, task: str = "regression", scale: float = 0.01) -> "Head":
        rng = np.random.default_rng(seed)
        values = np.append(rng.normal(scale=scale, size=embed_dim), 0.0)
        return cls.from_flat(values, task)

    @property
    def embed_dim(self) -> int:
        return self.params.size - 1

    @property
    def loss_kind(self) -> LossKind:
        return LossKind.for_task(self.task)

    @property
    def values(self) -> np.ndarray:
        return self.params.values

    def with_values(self, values) -> "Head":
        values = _project(np.asarray(values, dtype=np.float64), self.norm_cap)
        return replace(self, params=self.params.with_values(values))

    def scores(self, z: np.ndarray) -> np.ndarray:
        return z @ self.params["w"] + float(self.params["b"])


def head_layout(embed_dim: int) -> tuple[LayoutEntry, ...]:
    return (LayoutEntry("w", (embed_dim,), 0), LayoutEntry("b", (), embed_dim))


def augment(z: np.ndarray) -> np.ndarray:
    """Append the ones column so a head acts as ``za @ [w, b]``."""
    return np.hstack([z, np.ones((z.shape[0], 1))])


# --------------------------------------------------------------------------
# Taped building blocks
# --------------------------------------------------------------------------


def head_scores(head_leaves: Mapping[str, Tensor], z) -> Tensor:
    w = head_leaves["w"]
    k = w.shape[0]
    n = z.shape[0] if isinstance(z, Tensor) else np.shape(z)[0]
    s = ad.reshape(ad.matmul(z, ad.reshape(w, (k, 1))), (n,))
    return ad.add(s, head_leaves["b"])


def loss_from_scores(scores: Tensor, y: np.ndarray, kind: LossKind) -> Tensor:
    kind = LossKind(kind)
    if kind is LossKind.SQUARE:
        return ad.mean(ad.square(ad.sub(scores, y)))
    return ad.logistic_loss(scores, y)


def _check_labels(y: np.ndarray, kind: LossKind):
    if y.size == 0:
        raise ValueError("empty batch")
    if kind is LossKind.LOGISTIC and not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("logistic loss needs labels in {-1, +1}")


def _check_finite_samples(scores: np.ndarray, y: np.ndarray, kind: LossKind):
    with np.errstate(all="ignore"):
        per = (scores - y) ** 2 if kind is LossKind.SQUARE else np.logaddexp(0.0, -y * scores)
    bad = np.flatnonzero(~np.isfinite(per))
    if bad.size:
        raise FloatingPointError(f"non-finite loss at sample index {int(bad[0])}")


def group_loss_fn(net: ReprNet, x: np.ndarray, y: np.ndarray, kind: LossKind):
    """``fn(net_leaves, head_leaves) -> mean loss`` for autodiff helpers."""
    kind = LossKind(kind)

    def fn(net_leaves, head_leaves):
        return loss_from_scores(head_scores(head_leaves, net.forward(net_leaves, x)), y, kind)

    return fn


def head_loss_fn(z: np.ndarray, y: np.ndarray, kind: LossKind):
    """``fn(head_leaves) -> mean loss`` with the embedding held fixed."""
    kind = LossKind(kind)

    def fn(head_leaves):
        return loss_from_scores(head_scores(head_leaves, z), y, kind)

    return fn


# --------------------------------------------------------------------------
# Public operations
# --------------------------------------------------------------------------


def embed(net: ReprNet, x_batch: np.ndarray, tape: Tape | None = None) -> Tensor:
    """Embedding of ``x_batch`` recorded on ``tape`` (a new one by default)."""
    tape = Tape() if tape is None else tape
    leaves = tape.bind(net.params, prefix="net.")
    return net.forward(leaves, x_batch)


def group_loss(head: Head, net: ReprNet, batch, loss: LossKind | str, tape: Tape | None = None) -> Tensor:
    """Mean loss of ``head`` on ``net``'s embedding of ``batch = (x, y)``.

    The result is differentiable with respect to both parameter groups (the net
    is bound first, then the head).
    """
    x, y = batch
    kind = LossKind(loss)
    if kind is not head.loss_kind:
        raise ValueError(f"loss {kind.value} does not match head task {head.task}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y, kind)
    with np.errstate(all="ignore"):
        scores = predict(head, net, x)
    _check_finite_samples(scores, y, kind)
    tape = Tape() if tape is None else tape
    net_leaves = tape.bind(net.params, prefix="net.")
    head_leaves = tape.bind(head.params, prefix="head.")
    return loss_from_scores(head_scores(head_leaves, net.forward(net_leaves, x)), y, kind)


def predict(head: Head, net: ReprNet, x_batch: np.ndarray) -> np.ndarray:
    """Real-valued scores (regression values or logits)."""
    return head.scores(net.transform(np.asarray(x_batch, dtype=np.float64)))


def loss_value(head: Head, z: np.ndarray, y: np.ndarray) -> float:
    s = head.scores(z)
    if head.loss_kind is LossKind.SQUARE:
        return float(np.mean((s - y) ** 2))
    return float(np.mean(np.logaddexp(0.0, -y * s)))


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

CKPT_MAGIC = "IACKPT1"


def _fmt_shape(shape) -> str:
    return "x".join(str(s) for s in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def save_params(path, params: ParamVector) -> None:
    entries = " ".join(f"{e.name}:{_fmt_shape(e.shape)}@{e.offset}" for e in params.layout)
    with open(path, "wb") as fh:
        fh.write(f"{CKPT_MAGIC} {entries}\n".encode("ascii"))
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    header = raw[:nl].decode("ascii").split()
    if not header or header[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    layout = []
    for item in header[1:]:
        name, rest = item.split(":", 1)
        shape, offset = rest.split("@")
        layout.append(LayoutEntry(name, _parse_shape(shape), int(offset)))
    values = np.frombuffer(raw[nl + 1 :], dtype="<f8").astype(np.float64)
    return ParamVector(values, layout)

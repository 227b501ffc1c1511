"""Single-level comparison trainers: ERM, one-step gradient alignment, IRMv1, ERM with a mean-matching penalty.

All trainers draw the same per-group batch stream as the implicit trainer
(same seed, same split), update every parameter with one Adam optimizer,
and emit the same per-epoch RunRecords.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ParamVector, Tape
from .bilevel import (
    Adam,
    ConfigError,
    GradientError,
    StepStats,
    TrainResult,
    default_steps_per_epoch,
    full_train_batches,
)
from .models import Head, LossKind, ReprNet, head_scores, loss_from_scores

METHODS = ("erm", "one_step", "irm_v1", "erm_dp")
SEPARATE_HEADS = {"erm": False, "one_step": True, "irm_v1": False, "erm_dp": False}


@dataclass
class BaselineConfig:
    method: str = "erm"
    reg_coeff: float = 0.0
    outer_lr: float = 1e-3
    adam_eps: float = 1e-3
    max_epochs: int = 100
    batch_size_per_group: int = 500
    steps_per_epoch: int | None = None
    penalty_point: str = "shared"
    seed: int = 0

    def __post_init__(self):
        errors = []
        if self.method not in METHODS:
            errors.append(f"method must be one of {METHODS}")
        if not (self.reg_coeff >= 0 and math.isfinite(self.reg_coeff)):
            errors.append("reg_coeff must be a finite value >= 0")
        if self.method == "erm" and self.reg_coeff != 0:
            errors.append("reg_coeff must be 0 for erm")
        for name in ("outer_lr", "adam_eps"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be > 0")
        for name in ("max_epochs", "batch_size_per_group"):
            v = getattr(self, name)
            if not (isinstance(v, (int, np.integer)) and v >= 1):
                errors.append(f"{name} must be an integer >= 1")
        if self.steps_per_epoch is not None and not (
            isinstance(self.steps_per_epoch, int) and self.steps_per_epoch >= 1
        ):
            errors.append("steps_per_epoch must be an integer >= 1 or null")
        if self.penalty_point not in ("shared", "current"):
            errors.append("penalty_point must be 'shared' or 'current'")
        if errors:
            raise ConfigError("; ".join(errors))

    @classmethod
    def from_dict(cls, data: dict) -> "BaselineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown baseline config fields: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Per-method taped objectives. Each returns (objective, penalty) tensors.
# --------------------------------------------------------------------------


def _pooled(net, net_leaves, head_leaves, batch, kind):
    (x0, y0), (x1, y1) = batch
    x = np.vstack([x0, x1])
    y = np.concatenate([y0, y1])
    return loss_from_scores(head_scores(head_leaves, net.forward(net_leaves, x)), y, kind)


def erm_objective(net, leaves, batch, kind, cfg):
    return _pooled(net, leaves["net"], leaves["head"], batch, kind), None


def irm_objective(net, leaves, batch, kind, cfg):
    """Pooled risk plus sum over groups of (d/dw L_g(w * scores))^2 at w = 1."""
    risk = _pooled(net, leaves["net"], leaves["head"], batch, kind)
    if cfg.reg_coeff == 0:
        return risk, None
    tape = risk.tape
    penalty = None
    for x, y in batch:
        w = tape.param(np.ones(()), "irm.w")
        s = head_scores(leaves["head"], net.forward(leaves["net"], x))
        (gw,) = tape.gradient(loss_from_scores(ad.mul(s, w), y, kind), [w], create_graph=True)
        term = ad.square(gw)
        penalty = term if penalty is None else ad.add(penalty, term)
    return ad.add(risk, ad.scale(penalty, cfg.reg_coeff)), penalty


def dp_objective(net, leaves, batch, kind, cfg):
    """Pooled risk plus (mean score group 0 - mean score group 1)^2."""
    risk = _pooled(net, leaves["net"], leaves["head"], batch, kind)
    if cfg.reg_coeff == 0:
        return risk, None
    (x0, _), (x1, _) = batch
    m0 = ad.mean(head_scores(leaves["head"], net.forward(leaves["net"], x0)))
    m1 = ad.mean(head_scores(leaves["head"], net.forward(leaves["net"], x1)))
    penalty = ad.square(ad.sub(m0, m1))
    return ad.add(risk, ad.scale(penalty, cfg.reg_coeff)), penalty


def one_step_penalty(net, net_leaves, anchors, batch, kind):
    """||grad_h L0(a0, net) - grad_h L1(a1, net)||^2 with the anchors held fixed.

    Only the representation receives gradient from this term.
    """
    tape = next(iter(net_leaves.values())).tape
    grads = []
    for (x, y), a in zip(batch, anchors):
        leaves = {"w": tape.param(a["w"], "anchor.w"), "b": tape.param(a["b"], "anchor.b")}
        loss = loss_from_scores(head_scores(leaves, net.forward(net_leaves, x)), y, kind)
        gw, gb = tape.gradient(loss, [leaves["w"], leaves["b"]], create_graph=True)
        grads.append((gw, gb))
    (w0, b0), (w1, b1) = grads
    return ad.add(ad.tsum(ad.square(ad.sub(w0, w1))), ad.square(ad.sub(b0, b1)))


def one_step_objective(net, leaves, batch, kind, cfg):
    total = None
    for head, (x, y) in zip((leaves["head0"], leaves["head1"]), batch):
        loss = loss_from_scores(head_scores(head, net.forward(leaves["net"], x)), y, kind)
        total = loss if total is None else ad.add(total, loss)
    if cfg.reg_coeff == 0:
        return total, None
    h0, h1 = leaves["_values"]
    if cfg.penalty_point == "shared":
        mid = 0.5 * (h0 + h1)
        anchors = [{"w": mid[:-1], "b": mid[-1]}] * 2
    else:
        anchors = [{"w": h[:-1], "b": h[-1]} for h in (h0, h1)]
    penalty = one_step_penalty(net, leaves["net"], anchors, batch, kind)
    return ad.add(total, ad.scale(penalty, cfg.reg_coeff)), penalty


OBJECTIVES = {"erm": erm_objective, "irm_v1": irm_objective, "erm_dp": dp_objective, "one_step": one_step_objective}


# --------------------------------------------------------------------------
# Shared loop
# --------------------------------------------------------------------------


def _step_gradient(method, net: ReprNet, heads, batch, kind, cfg):
    tape = Tape()
    leaves = {"net": tape.bind(net.params, "net.")}
    if SEPARATE_HEADS[method]:
        leaves["head0"] = tape.bind(heads[0].params, "head0.")
        leaves["head1"] = tape.bind(heads[1].params, "head1.")
        leaves["_values"] = (heads[0].values, heads[1].values)
        groups = ("net", "head0", "head1")
    else:
        leaves["head"] = tape.bind(heads[0].params, "head.")
        groups = ("net", "head")
    obj, _ = OBJECTIVES[method](net, leaves, batch, kind, cfg)
    wrt = [t for g in groups for t in leaves[g].values()]
    grads = tape.gradient(obj, wrt)
    flat = np.concatenate([np.asarray(g).reshape(-1) for g in grads])
    if not np.all(np.isfinite(flat)):
        raise GradientError(f"{method}: non-finite gradient; lower outer_lr")
    return obj.item(), flat


def train_baseline(net: ReprNet, heads, dataset, cfg: BaselineConfig, on_epoch=None, evaluate: bool = True) -> TrainResult:
    """Joint Adam training of the representation and head(s) for ``cfg.method``."""
    from . import records as rec
    from .data_io import batches as batch_stream

    method = cfg.method
    kind = LossKind.for_task(dataset.task)
    if heads is None:
        heads = Head.zeros(net.embed_dim, dataset.task)
    pair = tuple(heads) if isinstance(heads, (tuple, list)) else (heads, heads)
    if not SEPARATE_HEADS[method]:
        pair = (pair[0], pair[0])
    n_net = net.params.size
    k = pair[0].params.size
    stream = batch_stream(dataset, "train", cfg.batch_size_per_group, cfg.seed)
    n_heads = 2 if SEPARATE_HEADS[method] else 1
    opt = Adam(n_net + n_heads * k, cfg.outer_lr, eps=cfg.adam_eps)
    steps = cfg.steps_per_epoch or default_steps_per_epoch(dataset, cfg.batch_size_per_group)
    records = []
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            stats = []
            for _ in range(steps):
                batch = next(stream)
                obj, g = _step_gradient(method, net, pair, batch, kind, cfg)
                values = np.concatenate([net.params.values] + [pair[i].values for i in range(n_heads)])
                new = opt.step(values, g)
                net = net.with_values(new[:n_net])
                if n_heads == 2:
                    pair = (pair[0].with_values(new[n_net : n_net + k]), pair[1].with_values(new[n_net + k :]))
                else:
                    h = pair[0].with_values(new[n_net:])
                    pair = (h, h)
                stats.append(StepStats(float(np.linalg.norm(g[:n_net])), 0, 0, True, obj))
            if evaluate:
                _, g_full = _step_gradient(method, net, pair, full_train_batches(dataset), kind, cfg)
                r = rec.epoch_record(
                    epoch, method, net, pair, dataset, stats, time.perf_counter() - t0, cfg,
                    coeff=cfg.reg_coeff, grad_norm=float(np.linalg.norm(g_full[:n_net])),
                )
                records.append(r)
                if on_epoch is not None:
                    on_epoch(r)
    except Exception as exc:
        exc.partial_records = records
        raise
    return TrainResult(records, net, pair[0], pair[1])


def train_erm(net, head, dataset, cfg: BaselineConfig, **kw) -> TrainResult:
    return train_baseline(net, head, dataset, _with_method(cfg, "erm"), **kw)


def train_one_step(net, heads, dataset, cfg: BaselineConfig, **kw) -> TrainResult:
    return train_baseline(net, heads, dataset, _with_method(cfg, "one_step"), **kw)


def train_irm_v1(net, head, dataset, cfg: BaselineConfig, **kw) -> TrainResult:
    return train_baseline(net, head, dataset, _with_method(cfg, "irm_v1"), **kw)


def train_erm_dp(net, head, dataset, cfg: BaselineConfig, **kw) -> TrainResult:
    return train_baseline(net, head, dataset, _with_method(cfg, "erm_dp"), **kw)


def _with_method(cfg: BaselineConfig, method: str) -> BaselineConfig:
    if cfg.method == method:
        return cfg
    return BaselineConfig(**{**cfg.to_dict(), "method": method})

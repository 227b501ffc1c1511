"""Bi-level fair representation learning with implicit outer gradients.

Outer problem over the representation ``net``::

    L0(h0*, net) + L1(h1*, net) + kappa/2 * ||h0* - h1*||^2

where each ``hg*`` minimises group g's loss over a linear head on the fixed
embedding. The inner heads are fitted to a gradient-norm tolerance, the two
inverse-Hessian-vector products come from conjugate gradient on
Hessian-vector products, and the outer gradient is assembled from mixed
second partials without ever forming a Jacobian or Hessian.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import ParamVector
from .models import Head, LossKind, ReprNet, augment, group_loss_fn, head_loss_fn, loss_value


class ConfigError(ValueError):
    pass


class InnerDivergenceError(RuntimeError):
    pass


class CGBreakdownError(FloatingPointError):
    pass


class GradientError(FloatingPointError):
    pass


@dataclass
class BilevelConfig:
    kappa: float = 0.1
    inner_lr: float | str = "auto"
    inner_max_steps: int = 20
    inner_tol_eps: float = 1e-4
    cg_max_iters: int = 10
    cg_tol_delta: float = 1e-6
    outer_lr: float = 1e-3
    adam_eps: float = 1e-3
    hessian_damping: float = 1e-5
    batch_size_per_group: int = 500
    max_epochs: int = 100
    warm_start_heads: bool = True
    inner_solver: str = "gd"
    steps_per_epoch: int | None = None
    norm_cap: float | None = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        errors = []
        if not (self.kappa >= 0 and math.isfinite(self.kappa)):
            errors.append("kappa must be a finite value >= 0")
        if self.hessian_damping < 0:
            errors.append("hessian_damping must be >= 0")
        if not (self.inner_lr == "auto" or (isinstance(self.inner_lr, (int, float)) and self.inner_lr > 0)):
            errors.append("inner_lr must be positive or 'auto'")
        for name in ("inner_tol_eps", "cg_tol_delta", "outer_lr", "adam_eps"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be > 0")
        for name in ("inner_max_steps", "cg_max_iters", "batch_size_per_group", "max_epochs"):
            v = getattr(self, name)
            if not (isinstance(v, (int, np.integer)) and v >= 1):
                errors.append(f"{name} must be an integer >= 1")
        if self.steps_per_epoch is not None and not (
            isinstance(self.steps_per_epoch, int) and self.steps_per_epoch >= 1
        ):
            errors.append("steps_per_epoch must be an integer >= 1 or null")
        if self.inner_solver not in ("gd", "exact"):
            errors.append("inner_solver must be 'gd' or 'exact'")
        if self.norm_cap is not None and not self.norm_cap > 0:
            errors.append("norm_cap must be > 0 or null")
        if errors:
            raise ConfigError("; ".join(errors))

    @classmethod
    def from_dict(cls, data: dict) -> "BilevelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown bilevel config fields: {unknown}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class InnerSolution:
    head0: Head
    head1: Head
    achieved_grad_norm0: float
    achieved_grad_norm1: float
    steps_used: int
    converged: bool = True
    steps0: int = 0
    steps1: int = 0

    @property
    def heads(self) -> tuple[Head, Head]:
        return self.head0, self.head1


@dataclass
class CGResult:
    x: np.ndarray
    residual: float
    iterations: int
    converged: bool


@dataclass
class PVectors:
    p0: ParamVector
    p1: ParamVector
    cg0: CGResult
    cg1: CGResult

    def __iter__(self):
        return iter((self.p0, self.p1))


@dataclass
class ImplicitGradient:
    grad_lambda: ParamVector
    p0: ParamVector
    p1: ParamVector
    cg_residual0: float
    cg_residual1: float
    losses: tuple[float, float] = (0.0, 0.0)
    terms: dict = field(default_factory=dict)

    @property
    def norm(self) -> float:
        return self.grad_lambda.norm()


def _check_batches(batches):
    if batches is None or len(batches) != 2 or any(b is None for b in batches):
        raise ValueError("need exactly one (x, y) batch per group")
    for g, (x, y) in enumerate(batches):
        if len(y) == 0:
            raise ValueError(f"group {g} batch is empty")


# --------------------------------------------------------------------------
# Objective
# --------------------------------------------------------------------------


def outer_objective(net: ReprNet, sol: InnerSolution, batches, kappa: float) -> float:
    """Relaxed outer objective at the given heads, one batch per group."""
    _check_batches(batches)
    total = 0.0
    for head, (x, y) in zip(sol.heads, batches):
        total += loss_value(head, net.transform(np.asarray(x, dtype=np.float64)), np.asarray(y, dtype=np.float64))
    diff = sol.head0.values - sol.head1.values
    return total + 0.5 * kappa * float(diff @ diff)


# --------------------------------------------------------------------------
# Inner problem
# --------------------------------------------------------------------------


def smoothness(za: np.ndarray, kind: LossKind) -> float:
    """Largest Hessian eigenvalue bound of the mean loss over ``za`` heads."""
    lam = float(np.linalg.eigvalsh(za.T @ za / za.shape[0])[-1])
    return (2.0 if LossKind(kind) is LossKind.SQUARE else 0.25) * lam


def _fit_exact(za: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.lstsq(za, y, rcond=None)[0]


def fit_head(
    z: np.ndarray,
    y: np.ndarray,
    init: Head,
    cfg: BilevelConfig,
    max_steps: int | None = None,
    tol: float | None = None,
    group: int = 0,
) -> tuple[Head, float, int, bool]:
    """Fit one linear head on a fixed embedding; returns (head, grad norm, steps, converged)."""
    kind = init.loss_kind
    za = augment(z)
    y = np.asarray(y, dtype=np.float64)
    tol = cfg.inner_tol_eps if tol is None else tol
    if cfg.inner_solver == "exact":
        if kind is not LossKind.SQUARE:
            raise ConfigError("inner_solver 'exact' is only available for the square loss")
        h = _fit_exact(za, y)
        if cfg.norm_cap is not None and np.linalg.norm(h) > cfg.norm_cap:
            h = h * (cfg.norm_cap / np.linalg.norm(h))
        _, g = _kernels.head_loss_grad_numpy(za, y, h, kind.code)
        gn = float(np.linalg.norm(g))
        return init.with_values(h), gn, 0, gn <= tol
    lr = 1.0 / smoothness(za, kind) if cfg.inner_lr == "auto" else float(cfg.inner_lr)
    h, gn, steps, status = _kernels.fit_linear_head(
        za, y, init.values, lr, cfg.inner_max_steps if max_steps is None else max_steps, tol,
        kind.code, cfg.norm_cap or 0.0,
    )
    if status == _kernels.DIVERGED:
        raise InnerDivergenceError(
            f"inner solve for group {group} diverged after {steps} steps (lr={lr:.3g}); "
            "use a smaller inner_lr or inner_lr='auto'"
        )
    return init.with_values(h), gn, steps, status == _kernels.CONVERGED


def solve_inner(net: ReprNet, data0, data1, cfg: BilevelConfig, init=None, task: str | None = None) -> InnerSolution:
    """Fit both group heads on ``net``'s embedding of the given batches.

    ``init`` is a shared starting Head or a ``(head0, head1)`` pair (warm
    start); by default both heads start from zeros.
    """
    (x0, y0), (x1, y1) = data0, data1
    if init is None:
        init = Head.zeros(net.embed_dim, task or "regression")
    starts = init if isinstance(init, (tuple, list)) else (init, init)
    out = []
    for g, (x, y), start in zip((0, 1), ((x0, y0), (x1, y1)), starts):
        start = start if cfg.norm_cap is None else Head(start.params, start.task, cfg.norm_cap)
        out.append(fit_head(net.transform(np.asarray(x, dtype=np.float64)), y, start, cfg, group=g))
    (h0, gn0, s0, c0), (h1, gn1, s1, c1) = out
    return InnerSolution(h0, h1, gn0, gn1, max(s0, s1), c0 and c1, s0, s1)


# --------------------------------------------------------------------------
# Conjugate gradient
# --------------------------------------------------------------------------


def cg_solve(hvp_fn: Callable, b, x0=None, max_iters: int = 10, tol: float = 1e-10) -> CGResult:
    """Conjugate gradient for ``A x = b`` given ``hvp_fn(v) = A v``.

    Starts from ``x0`` (zeros by default) with ``r = b - A x0`` and the
    classic updates ``alpha = r.r / p.Ap``, ``beta = r'.r' / r.r``. Stops when
    ``||r|| <= tol``; otherwise returns the iterate with the smallest residual
    seen, marked not converged.
    """
    bv = b.values if isinstance(b, ParamVector) else np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(bv)):
        raise CGBreakdownError("right-hand side is not finite")
    if x0 is None:
        x = np.zeros_like(bv)
        r = bv.copy()
    else:
        x = np.array(x0.values if isinstance(x0, ParamVector) else x0, dtype=np.float64)
        r = bv - np.asarray(hvp_fn(x), dtype=np.float64)
    p = r.copy()
    rr = float(r @ r)
    best_x, best_res = x.copy(), math.sqrt(rr)
    if best_res <= tol:
        return CGResult(x, best_res, 0, True)
    for k in range(1, max_iters + 1):
        ap = np.asarray(hvp_fn(p), dtype=np.float64)
        pap = float(p @ ap)
        if not math.isfinite(pap) or pap <= 0.0:
            raise CGBreakdownError(
                f"operator is not positive definite along a search direction (p.Ap={pap:.3g}) "
                f"at iteration {k}; increase hessian_damping"
            )
        alpha = rr / pap
        x = x + alpha * p
        r = r - alpha * ap
        rr_new = float(r @ r)
        res = math.sqrt(rr_new)
        if not math.isfinite(res):
            raise CGBreakdownError(f"non-finite residual at iteration {k}; increase hessian_damping")
        if res < best_res:
            best_x, best_res = x.copy(), res
        if res <= tol:
            return CGResult(x, res, k, True)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(best_x, best_res, max_iters, False)


def compute_p(net: ReprNet, sol: InnerSolution, batches, cfg: BilevelConfig) -> PVectors:
    """CG solutions of the two damped head-Hessian systems.

    ``(H0 + mu I) p0 = grad_h0 L0 + kappa (h0 - h1)`` and
    ``(H1 + mu I) p1 = grad_h1 L1 - kappa (h0 - h1)``.
    """
    _check_batches(batches)
    diff = sol.head0.values - sol.head1.values
    out = []
    for head, (x, y), sign in zip(sol.heads, batches, (1.0, -1.0)):
        z = net.transform(np.asarray(x, dtype=np.float64))
        hvp = ad.HessianVectorProduct(head_loss_fn(z, np.asarray(y, dtype=np.float64), head.loss_kind), head.params)
        mu = cfg.hessian_damping
        rhs = hvp.gradient.values + sign * cfg.kappa * diff
        res = cg_solve(lambda v: hvp(v) + mu * v, rhs, None, cfg.cg_max_iters, cfg.cg_tol_delta)
        out.append((head.params.with_values(res.x), res))
    (p0, r0), (p1, r1) = out
    return PVectors(p0, p1, r0, r1)


def implicit_grad(net: ReprNet, sol: InnerSolution, p0, p1, batches) -> ImplicitGradient:
    """``sum_g grad_net Lg - grad_net <grad_hg Lg, pg>`` on one batch per group."""
    _check_batches(batches)
    total = np.zeros(net.params.size)
    losses, terms = [], {}
    for g, (head, (x, y), p) in enumerate(zip(sol.heads, batches, (p0, p1))):
        fn = group_loss_fn(net, np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), head.loss_kind)
        value, g_net, _, mixed = ad.grad_and_mixed_vjp(fn, net.params, head.params, p)
        for name, vec in ((f"grad_net_L{g}", g_net), (f"mixed_term_{g}", mixed)):
            if not np.all(np.isfinite(vec.values)):
                raise GradientError(f"non-finite values in {name}")
        total += g_net.values - mixed.values
        losses.append(value)
        terms[f"grad_net_L{g}"] = g_net
        terms[f"mixed_term_{g}"] = mixed
    pv0 = p0 if isinstance(p0, ParamVector) else sol.head0.params.with_values(p0)
    pv1 = p1 if isinstance(p1, ParamVector) else sol.head1.params.with_values(p1)
    return ImplicitGradient(net.params.with_values(total), pv0, pv1, float("nan"), float("nan"), tuple(losses), terms)


def outer_gradient(net: ReprNet, batches, cfg: BilevelConfig, init=None, task: str = "regression"):
    """One full step of gradient assembly: inner solve, p-vectors, implicit gradient."""
    _check_batches(batches)
    sol = solve_inner(net, batches[0], batches[1], cfg, init, task)
    pv = compute_p(net, sol, batches, cfg)
    ig = implicit_grad(net, sol, pv.p0, pv.p1, batches)
    ig.cg_residual0, ig.cg_residual1 = pv.cg0.residual, pv.cg1.residual
    return sol, pv, ig


# --------------------------------------------------------------------------
# Outer optimizer and training loop
# --------------------------------------------------------------------------


class Adam:
    def __init__(self, size: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-3):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def full_train_batches(dataset):
    return dataset.part("train", 0), dataset.part("train", 1)


def default_steps_per_epoch(dataset, batch_size: int) -> int:
    largest = max(int(np.count_nonzero(dataset.mask("train", g))) for g in (0, 1))
    return max(1, math.ceil(largest / batch_size))


@dataclass
class StepStats:
    grad_norm: float
    inner_steps: int
    cg_iters: int
    converged: bool
    objective: float


@dataclass
class TrainResult:
    records: list
    net: ReprNet
    head0: Head
    head1: Head
    aborted: str | None = None


def train(net: ReprNet, heads, dataset, cfg: BilevelConfig, on_epoch=None, evaluate: bool = True) -> TrainResult:
    """Implicit path alignment: per batch pair, solve heads, solve for p, step the net with Adam.

    ``heads`` is the shared initial head (or a pair). One RunRecord per epoch
    is produced by :func:`implicit_align.records.epoch_record`; ``on_epoch`` is
    called with each record as it is made. Any exception aborts training, and
    the records gathered so far are attached to the exception as
    ``partial_records``.
    """
    from . import records as rec
    from .data_io import batches as batch_stream

    task = dataset.task
    shared = heads[0] if isinstance(heads, (tuple, list)) else heads
    if shared is None:
        shared = Head.zeros(net.embed_dim, task)
    h_init = shared
    current = (heads[0], heads[1]) if isinstance(heads, (tuple, list)) else (shared, shared)
    stream = batch_stream(dataset, "train", cfg.batch_size_per_group, cfg.seed)
    opt = Adam(net.params.size, cfg.outer_lr, eps=cfg.adam_eps)
    steps = cfg.steps_per_epoch or default_steps_per_epoch(dataset, cfg.batch_size_per_group)
    records = []

    def checkpoint():
        # heads and gradient at the current net, on each group's full train split
        init = current if cfg.warm_start_heads else h_init
        sol_full, _, ig_full = outer_gradient(net, full_train_batches(dataset), cfg, init, task)
        return sol_full.heads, ig_full.norm

    try:
        for epoch in range(1, cfg.max_epochs + 1):
            t0 = time.perf_counter()
            stats = []
            for _ in range(steps):
                batch = next(stream)
                init = current if cfg.warm_start_heads else h_init
                sol, pv, ig = outer_gradient(net, batch, cfg, init, task)
                gap = sol.head0.values - sol.head1.values
                stats.append(
                    StepStats(ig.norm, sol.steps_used, max(pv.cg0.iterations, pv.cg1.iterations), sol.converged,
                              sum(ig.losses) + 0.5 * cfg.kappa * float(gap @ gap))
                )
                net = net.with_values(opt.step(net.params.values, ig.grad_lambda.values))
                current = sol.heads
            if evaluate:
                final, gnorm = checkpoint()
                r = rec.epoch_record(
                    epoch, "implicit", net, final, dataset, stats, time.perf_counter() - t0, cfg, grad_norm=gnorm
                )
                records.append(r)
                if on_epoch is not None:
                    on_epoch(r)
        final = checkpoint()[0]
    except Exception as exc:
        exc.partial_records = records
        raise
    return TrainResult(records, net, final[0], final[1])

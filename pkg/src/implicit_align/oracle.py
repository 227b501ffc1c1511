"""Independent reference computations used to check the engine.

The finite-difference, dense-solve, exact bi-level and brute-force metric
oracles use their own numpy arithmetic (their own MLP forward, their own
normal-equation solves, explicit counting loops) rather than the engine
routines they are compared with. The unrolled explicit-path gradient is the
exception: it is a second use of the autodiff tape, differentiating through
every inner step, and serves as the cost and consistency comparison.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .autodiff import ParamVector, Tape
from . import autodiff as ad


class OracleError(ValueError):
    pass


class MemoryBudgetError(MemoryError):
    pass


REL_FLOOR = 1e-12


def relative_error(engine, oracle) -> float:
    e = np.asarray(getattr(engine, "values", engine), dtype=np.float64)
    o = np.asarray(getattr(oracle, "values", oracle), dtype=np.float64)
    return float(np.linalg.norm(e - o) / max(float(np.linalg.norm(o)), REL_FLOOR))


@dataclass
class OracleReport:
    name: str
    oracle: list
    engine: list
    rel_error: float
    tol: float
    passed: bool
    seconds: float = 0.0

    @classmethod
    def compare(cls, name: str, engine, oracle, tol: float, seconds: float = 0.0) -> "OracleReport":
        err = relative_error(engine, oracle)
        o = np.atleast_1d(np.asarray(getattr(oracle, "values", oracle), dtype=np.float64))
        e = np.atleast_1d(np.asarray(getattr(engine, "values", engine), dtype=np.float64))
        return cls(name, o.tolist(), e.tolist(), err, tol, bool(err <= tol), seconds)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: rel_error={self.rel_error:.3e} (tol {self.tol:.0e})"


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------


def fd_gradient(f: Callable, theta, step: float = 1e-6):
    """Central differences; returns the same type as ``theta``."""
    values = np.asarray(getattr(theta, "values", theta), dtype=np.float64)
    wrap = (lambda v: theta.with_values(v)) if isinstance(theta, ParamVector) else (lambda v: v)
    out = np.empty(values.size)
    for i in range(values.size):
        e = np.zeros(values.size)
        e[i] = step
        fp, fm = float(f(wrap(values + e))), float(f(wrap(values - e)))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise OracleError(f"non-finite function value at coordinate {i}")
        out[i] = (fp - fm) / (2.0 * step)
    return wrap(out)


def fd_jvp_of_grad(grad_fn: Callable, theta: np.ndarray, v: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """(grad(theta + h v) - grad(theta - h v)) / 2h."""
    return (np.asarray(grad_fn(theta + step * v)) - np.asarray(grad_fn(theta - step * v))) / (2.0 * step)


# --------------------------------------------------------------------------
# Dense linear algebra
# --------------------------------------------------------------------------


def dense_spd_solve(A, b) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
        raise OracleError(f"incompatible shapes {A.shape} and {b.shape}")
    if not np.allclose(A, A.T, rtol=1e-12, atol=1e-12 * max(1.0, float(np.abs(A).max(initial=0.0)))):
        raise OracleError("matrix is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        raise OracleError("matrix is not positive definite") from None
    return scipy.linalg.cho_solve(factor, b)


def random_spd(n: int, rng: np.random.Generator, cond: float | None = None) -> np.ndarray:
    """Wishart-plus-identity ``M^T M / n + I`` by default, or a rotated
    geometric spectrum with the given condition number."""
    if cond is None:
        m = rng.normal(size=(n, n))
        return m.T @ m / n + np.eye(n)
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    eig = np.geomspace(1.0, cond, n)
    return (q * eig) @ q.T


# --------------------------------------------------------------------------
# Exact bi-level reference (square loss, linear heads)
# --------------------------------------------------------------------------


def mlp_forward(values: np.ndarray, arch, x: np.ndarray, activation: str = "relu", final_activation: str = "linear"):
    """Straight-line numpy MLP over the flat W0, b0, W1, b1, ... layout."""
    h = np.asarray(x, dtype=np.float64)
    off = 0
    n_layers = len(arch) - 1
    for i in range(n_layers):
        a, b = arch[i], arch[i + 1]
        W = values[off : off + a * b].reshape(a, b)
        off += a * b
        bias = values[off : off + b]
        off += b
        h = h @ W + bias
        act = final_activation if i == n_layers - 1 else activation
        if act == "relu":
            h = np.maximum(h, 0.0)
    return h


def exact_head(z: np.ndarray, y: np.ndarray, damping: float = 0.0, max_cond: float = 1e12):
    """Minimiser of mean((Z h - y)^2) + damping ||h||^2 by Cholesky.

    Returns ``(head, damping_used)``; damping is raised while the normal
    matrix is too ill-conditioned.
    """
    za = np.hstack([z, np.ones((z.shape[0], 1))])
    G = za.T @ za / za.shape[0]
    rhs = za.T @ y / za.shape[0]
    mu = damping
    for _ in range(20):
        A = G + mu * np.eye(G.shape[0])
        if np.linalg.cond(A) <= max_cond:
            return dense_spd_solve(A, rhs), mu
        mu = max(mu * 10.0, 1e-12)
    raise OracleError("normal equations remain ill-conditioned after raising damping")


def exact_outer_objective(values, arch, batches, kappa, activation="linear", final_activation="linear", damping=0.0):
    heads, total, flagged = [], 0.0, False
    for x, y in batches:
        z = mlp_forward(values, arch, x, activation, final_activation)
        h, mu = exact_head(z, y, damping)
        flagged |= mu != damping
        za = np.hstack([z, np.ones((z.shape[0], 1))])
        total += float(np.mean((za @ h - y) ** 2))
        heads.append(h)
    d = heads[0] - heads[1]
    return total + 0.5 * kappa * float(d @ d), heads, flagged


def exact_bilevel_gradient(net, batches, kappa: float, step: float = 1e-6, damping: float = 0.0) -> ParamVector:
    """Central differences of the outer objective with exactly solved inner heads."""
    flags = []

    def f(v):
        val, _, flagged = exact_outer_objective(
            v.values, net.arch, batches, kappa, net.activation, net.final_activation, damping
        )
        flags.append(flagged)
        return val

    g = fd_gradient(f, net.params, step)
    if any(flags):
        warnings.warn("exact inner solve needed extra damping; gradient is of the damped problem")
    return g


def head_gap_gradient(net, batches, step: float = 1e-6) -> ParamVector:
    """Gradient of 1/2 ||h0*(net) - h1*(net)||^2 alone (the large-kappa direction)."""

    def f(v):
        _, heads, _ = exact_outer_objective(v.values, net.arch, batches, 0.0, net.activation, net.final_activation)
        d = heads[0] - heads[1]
        return 0.5 * float(d @ d)

    return fd_gradient(f, net.params, step)


def shared_head_erm_gradient(net, batches, step: float = 1e-6) -> ParamVector:
    """Gradient of the pooled loss at the pooled least-squares head."""
    x = np.vstack([b[0] for b in batches])
    y = np.concatenate([b[1] for b in batches])

    def f(v):
        z = mlp_forward(v.values, net.arch, x, net.activation, net.final_activation)
        h, _ = exact_head(z, y)
        za = np.hstack([z, np.ones((z.shape[0], 1))])
        return 2.0 * float(np.mean((za @ h - y) ** 2))

    return fd_gradient(f, net.params, step)


# --------------------------------------------------------------------------
# Explicit (unrolled) path gradient
# --------------------------------------------------------------------------


DEFAULT_NODE_BUDGET = 2_000_000


def explicit_unrolled_step(
    net,
    heads,
    batches,
    T: int,
    kappa: float,
    lr: float | tuple[float, float] | None = None,
    node_budget: int = DEFAULT_NODE_BUDGET,
) -> ParamVector:
    """Net gradient of the outer objective after T recorded gradient steps on each head.

    ``lr`` defaults to 1/L per group from the current embedding (held
    constant under differentiation). Exceeding ``node_budget`` tape nodes
    raises :class:`MemoryBudgetError`.
    """
    from .models import head_scores, loss_from_scores

    if T < 0:
        raise OracleError("T must be >= 0")
    h_pair = tuple(heads) if isinstance(heads, (tuple, list)) else (heads, heads)
    kind = h_pair[0].loss_kind
    if lr is None:
        lrs = []
        for x, _ in batches:
            za = np.hstack([net.transform(x), np.ones((len(x), 1))])
            lam = float(np.linalg.eigvalsh(za.T @ za / za.shape[0])[-1])
            lrs.append(1.0 / ((2.0 if kind.value == "square" else 0.25) * lam))
    else:
        lrs = list(lr) if isinstance(lr, (tuple, list)) else [lr, lr]
    tape = Tape(check_finite=True)
    net_leaves = tape.bind(net.params, "net.")
    finals = []
    for g, ((x, y), h, step) in enumerate(zip(batches, h_pair, lrs)):
        z = net.forward(net_leaves, np.asarray(x, dtype=np.float64))
        w = tape.input(h.params["w"], f"h{g}.w")
        b = tape.input(h.params["b"], f"h{g}.b")
        for _ in range(T):
            loss = loss_from_scores(head_scores({"w": w, "b": b}, z), y, kind)
            gw, gb = tape.gradient(loss, [w, b], create_graph=True)
            w = ad.sub(w, ad.scale(gw, step))
            b = ad.sub(b, ad.scale(gb, step))
            if len(tape) > node_budget:
                raise MemoryBudgetError(
                    f"unrolled tape exceeded {node_budget} nodes at group {g}; reduce T or the batch size"
                )
        finals.append((z, w, b, y))
    total = None
    for z, w, b, y in finals:
        loss = loss_from_scores(head_scores({"w": w, "b": b}, z), y, kind)
        total = loss if total is None else ad.add(total, loss)
    (_, w0, b0, _), (_, w1, b1, _) = finals
    gap = ad.add(ad.tsum(ad.square(ad.sub(w0, w1))), ad.square(ad.sub(b0, b1)))
    total = ad.add(total, ad.scale(gap, 0.5 * kappa))
    grads = tape.gradient(total, list(net_leaves.values()))
    return net.params.with_values(np.concatenate([g.reshape(-1) for g in grads]))


# --------------------------------------------------------------------------
# Brute-force metric oracles
# --------------------------------------------------------------------------


def brute_suf_gap_classification(group, y, s) -> float:
    rates = {}
    for cls in (-1.0, 1.0):
        for g in (0, 1):
            hit = tot = 0
            for gi, yi, si in zip(group, y, s):
                pred = 1.0 if si > 0 else -1.0
                if gi == g and pred == cls:
                    tot += 1
                    if yi == cls:
                        hit += 1
            rates[cls, g] = None if tot == 0 else hit / tot
    total, used = 0.0, 0
    for cls in (-1.0, 1.0):
        if rates[cls, 0] is None or rates[cls, 1] is None:
            continue
        total += abs(rates[cls, 0] - rates[cls, 1])
        used += 1
    if used == 0:
        raise OracleError("no class is predicted in both groups")
    return 0.5 * total


def brute_suf_gap_regression(group, y, s, thresholds) -> float:
    diffs = []
    for t in thresholds:
        rates = []
        for g in (0, 1):
            below = both = 0
            for gi, yi, si in zip(group, y, s):
                if gi == g and si <= t:
                    below += 1
                    if yi <= t:
                        both += 1
            rates.append(None if below == 0 else both / below)
        if None not in rates:
            diffs.append(abs(rates[0] - rates[1]))
    if not diffs:
        raise OracleError("every threshold skipped")
    return math.fsum(diffs) / len(diffs)


def brute_performance(group, y, s, task: str) -> float:
    per = []
    for g in (0, 1):
        tot = n = 0.0
        for gi, yi, si in zip(group, y, s):
            if gi != g:
                continue
            n += 1
            if task == "regression":
                tot += (si - yi) ** 2
            else:
                tot += 1.0 if (1.0 if si > 0 else -1.0) == yi else 0.0
        per.append(tot / n)
    return 0.5 * (per[0] + per[1])


# --------------------------------------------------------------------------
# Suite
# --------------------------------------------------------------------------


def tiny_instance(seed: int = 0, n: int = 64, input_dim: int = 5, embed_dim: int = 3, shift: float = 0.3):
    """Smooth reference problem: linear net, square loss, two shifted groups."""
    from .models import ReprNet

    rng = np.random.default_rng(seed)
    net = ReprNet.init((input_dim, embed_dim), seed=seed, activation="linear")
    c0 = rng.normal(size=input_dim)
    c1 = c0 + rng.normal(scale=0.5, size=input_dim)
    x0 = rng.normal(size=(n, input_dim))
    x1 = rng.normal(size=(n, input_dim)) + shift
    y0 = x0 @ c0 + 0.1 * rng.normal(size=n)
    y1 = x1 @ c1 + 0.1 * rng.normal(size=n)
    return net, ((x0, y0), (x1, y1))


def tight_config(kappa: float, eps: float = 1e-10, delta: float = 1e-10, **kw):
    from .bilevel import BilevelConfig

    base = dict(
        kappa=kappa, inner_tol_eps=eps, cg_tol_delta=delta, inner_max_steps=200_000, cg_max_iters=100,
        hessian_damping=0.0,
    )
    base.update(kw)
    return BilevelConfig(**base)


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def _check_grad_fd(seed: int = 0) -> OracleReport:
    from .models import Head, ReprNet

    rng = np.random.default_rng(seed)
    net = ReprNet.init((4, 6, 3), seed=seed, activation="relu")
    head = Head.init(3, seed=seed, task="binary_classification", scale=0.5)
    x = rng.normal(size=(16, 4))
    y = np.where(rng.normal(size=16) > 0, 1.0, -1.0)
    t0 = time.perf_counter()
    engine = ad.grad(lambda leaves: _loss_net(net, head, x, y, leaves), net.params)

    def f(v):
        z = mlp_forward(v.values, net.arch, x, net.activation, net.final_activation)
        s = z @ head.params["w"] + head.params["b"]
        return float(np.mean(np.logaddexp(0.0, -y * s)))

    return OracleReport.compare("grad_vs_fd", engine, fd_gradient(f, net.params, 1e-6), 1e-5, time.perf_counter() - t0)


def _loss_net(net, head, x, y, leaves):
    from .models import head_scores, loss_from_scores

    tape = next(iter(leaves.values())).tape
    hl = {"w": tape.const(head.params["w"]), "b": tape.const(head.params["b"])}
    return loss_from_scores(head_scores(hl, net.forward(leaves, x)), y, head.loss_kind)


def _smooth_net_loss(seed: int):
    """Softplus-activated two-layer loss in raw autodiff (no kinks) and its numpy twin."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 3))
    y = rng.normal(size=12)
    params = ParamVector.from_arrays(
        {"W0": rng.normal(size=(3, 5)), "b0": rng.normal(size=5), "w1": rng.normal(size=(5, 1))}
    )

    def fn(leaves):
        h = ad.softplus(ad.add(ad.matmul(x, leaves["W0"]), leaves["b0"]))
        s = ad.reshape(ad.matmul(h, leaves["w1"]), (12,))
        return ad.mean(ad.square(ad.sub(s, y)))

    return params, fn


def _check_hvp_fd(seed: int = 0) -> OracleReport:
    params, fn = _smooth_net_loss(seed)
    rng = np.random.default_rng(seed + 1)
    v = rng.normal(size=params.size)
    t0 = time.perf_counter()
    engine = ad.hvp(fn, params, params.with_values(v))
    oracle = fd_jvp_of_grad(lambda th: ad.grad(fn, params.with_values(th)).values, params.values, v, 1e-4)
    return OracleReport.compare("hvp_vs_fd", engine, oracle, 1e-4, time.perf_counter() - t0)


def _check_mixed_fd(seed: int = 0) -> OracleReport:
    from .models import Head, LossKind, group_loss_fn

    net, batches = tiny_instance(seed)
    (x, y), _ = batches
    head = Head.init(net.embed_dim, seed, scale=0.5)
    fn = group_loss_fn(net, x, y, LossKind.SQUARE)
    v = np.random.default_rng(seed + 2).normal(size=head.params.size)
    t0 = time.perf_counter()
    engine = ad.mixed_partial_vjp(fn, net.params, head.params, v)

    def grad_b(a_vals):
        z = mlp_forward(a_vals, net.arch, x, net.activation, net.final_activation)
        za = np.hstack([z, np.ones((len(y), 1))])
        return (2.0 / len(y)) * za.T @ (za @ head.values - y)

    def inner(a_vals):
        return float(grad_b(a_vals) @ v)

    oracle = fd_gradient(inner, net.params.values, 1e-6)
    return OracleReport.compare("mixed_vjp_vs_fd", engine, oracle, 1e-4, time.perf_counter() - t0)


def _check_cg(seed: int = 0) -> OracleReport:
    from . import bilevel

    rng = np.random.default_rng(seed)
    worst, t0 = 0.0, time.perf_counter()
    for _ in range(10):
        n = int(rng.integers(2, 33))
        A = random_spd(n, rng)
        b = rng.normal(size=n)
        res = bilevel.cg_solve(lambda v: A @ v, b, None, n, 1e-12 * np.linalg.norm(b))
        worst = max(worst, relative_error(res.x, dense_spd_solve(A, b)))
    return OracleReport("cg_vs_dense", [0.0], [worst], worst, 1e-8, worst <= 1e-8, time.perf_counter() - t0)


def _check_p_dense(seed: int = 0) -> OracleReport:
    from . import bilevel
    from .models import augment

    net, batches = tiny_instance(seed)
    cfg = tight_config(kappa=1.0, eps=1e-3, hessian_damping=1e-5)
    t0 = time.perf_counter()
    sol = bilevel.solve_inner(net, batches[0], batches[1], cfg)
    pv = bilevel.compute_p(net, sol, batches, cfg)
    (x, y) = batches[0]
    za = augment(mlp_forward(net.params.values, net.arch, x, net.activation, net.final_activation))
    H = 2.0 * za.T @ za / len(y) + cfg.hessian_damping * np.eye(za.shape[1])
    g = (2.0 / len(y)) * za.T @ (za @ sol.head0.values - y)
    rhs = g + cfg.kappa * (sol.head0.values - sol.head1.values)
    return OracleReport.compare("p_vs_dense", pv.p0, dense_spd_solve(H, rhs), 1e-6, time.perf_counter() - t0)


def _check_implicit(kappa: float, seed: int = 0) -> OracleReport:
    from . import bilevel

    net, batches = tiny_instance(seed)
    t0 = time.perf_counter()
    _, _, ig = bilevel.outer_gradient(net, batches, tight_config(kappa))
    exact = exact_bilevel_gradient(net, batches, kappa)
    return OracleReport.compare(f"implicit_vs_exact_kappa{kappa:g}", ig.grad_lambda, exact, 1e-3, time.perf_counter() - t0)


def _check_unrolled(seed: int = 0) -> OracleReport:
    from . import bilevel
    from .models import Head

    net, batches = tiny_instance(seed, n=32)
    t0 = time.perf_counter()
    _, _, ig = bilevel.outer_gradient(net, batches, tight_config(1.0))
    unrolled = explicit_unrolled_step(net, Head.zeros(net.embed_dim), batches, T=300, kappa=1.0)
    return OracleReport.compare("unrolled_vs_implicit", ig.grad_lambda, unrolled, 5e-3, time.perf_counter() - t0)


def _check_metrics(seed: int = 0) -> OracleReport:
    from .metrics import PredictionSet, regression_thresholds, suf_gap_classification, suf_gap_regression

    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    engine, oracle = [], []
    for _ in range(5):
        g = rng.integers(0, 2, size=120)
        g[:2] = (0, 1)
        yr, sr = rng.normal(size=120), rng.normal(size=120)
        p = PredictionSet(g, yr, sr, "regression")
        engine.append(suf_gap_regression(p).value)
        oracle.append(brute_suf_gap_regression(g, yr, sr, regression_thresholds(sr)))
        yc = np.where(rng.random(120) > 0.5, 1.0, -1.0)
        sc = rng.normal(size=120)
        engine.append(suf_gap_classification(PredictionSet(g, yc, sc, "binary_classification")).value)
        oracle.append(brute_suf_gap_classification(g, yc, sc))
    err = float(np.max(np.abs(np.subtract(engine, oracle))))
    return OracleReport("metrics_vs_bruteforce", oracle, engine, err, 0.0, err == 0.0, time.perf_counter() - t0)


CHECKS: dict[str, Callable[[], OracleReport]] = {
    "grad_vs_fd": _check_grad_fd,
    "hvp_vs_fd": _check_hvp_fd,
    "mixed_vjp_vs_fd": _check_mixed_fd,
    "cg_vs_dense": _check_cg,
    "p_vs_dense": _check_p_dense,
    "implicit_vs_exact_kappa0": lambda: _check_implicit(0.0),
    "implicit_vs_exact_kappa1": lambda: _check_implicit(1.0),
    "unrolled_vs_implicit": _check_unrolled,
    "metrics_vs_bruteforce": _check_metrics,
}


def run_suite(name_filter: str | None = None) -> list[OracleReport]:
    """Run every check whose name contains ``name_filter``; failures are reports, not exceptions."""
    reports = []
    for name, check in CHECKS.items():
        if name_filter and name_filter not in name:
            continue
        try:
            reports.append(check())
        except Exception as exc:  # a crashing check is a failing check
            reports.append(OracleReport(name, [], [], float("inf"), 0.0, False))
            reports[-1].engine = [f"{type(exc).__name__}: {exc}"]
    return reports

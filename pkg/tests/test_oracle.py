import json

import numpy as np
import pytest

from implicit_align import autodiff as ad
from implicit_align import bilevel, cli, oracle
from implicit_align.autodiff import ParamVector
from implicit_align.bilevel import outer_gradient, solve_inner
from implicit_align.models import Head, ReprNet


def cosine(a, b):
    a, b = np.asarray(getattr(a, "values", a)), np.asarray(getattr(b, "values", b))
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


# -- finite differences -----------------------------------------------------


def test_fd_of_squared_norm():
    g = oracle.fd_gradient(lambda t: float(t @ t), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)


def test_fd_of_linear_is_exact():
    c = np.array([3.0, -1.5, 0.25])
    g = oracle.fd_gradient(lambda t: float(c @ t), np.array([0.1, 0.2, 0.3]))
    np.testing.assert_allclose(g, c, atol=1e-9)


def test_fd_keeps_param_vector_type():
    p = ParamVector.from_arrays({"a": np.array([1.0, 2.0])})
    g = oracle.fd_gradient(lambda v: float(np.sum(v.values ** 2)), p)
    assert isinstance(g, ParamVector) and g.same_layout(p)


def test_fd_reports_non_finite_coordinate():
    with pytest.raises(oracle.OracleError, match="coordinate 1"):
        # only the step along coordinate 1 leaves the domain of sqrt
        oracle.fd_gradient(lambda t: np.sqrt(t[0]) + np.sqrt(t[1]) if t[1] >= 0 else np.nan, np.array([1.0, 1e-7]))


def test_engine_grad_agrees_with_fd():
    rep = oracle._check_grad_fd(3)
    assert rep.passed and rep.rel_error < 1e-5


def test_fd_step_size_robustness():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=5), rng.normal(size=5)
    theta = rng.normal(size=5)

    def f(t):
        return float(np.sum(np.sin(a * t) + np.exp(0.3 * b * t)))

    g5 = oracle.fd_gradient(f, theta, 1e-5)
    g6 = oracle.fd_gradient(f, theta, 1e-6)
    g2 = oracle.fd_gradient(f, theta, 2e-5)
    # central differences have O(h^2) truncation: err(h) ~ |g(2h) - g(h)| / 3
    truncation = np.abs(g2 - g5) / 3 + 1e-9
    assert np.all(np.abs(g5 - g6) <= 10 * truncation)


# -- dense solves -----------------------------------------------------------


def test_dense_spd_examples():
    np.testing.assert_allclose(oracle.dense_spd_solve(np.eye(3), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(oracle.dense_spd_solve(np.diag([2.0, 4.0]), [2.0, 4.0]), [1.0, 1.0])


def test_dense_spd_random_residual():
    rng = np.random.default_rng(1)
    A = oracle.random_spd(20, rng)
    b = rng.normal(size=20)
    assert np.linalg.norm(A @ oracle.dense_spd_solve(A, b) - b) < 1e-10


def test_dense_spd_rejects():
    with pytest.raises(oracle.OracleError, match="symmetric"):
        oracle.dense_spd_solve([[1.0, 2.0], [0.0, 1.0]], [1.0, 1.0])
    with pytest.raises(oracle.OracleError, match="positive definite"):
        oracle.dense_spd_solve(np.diag([1.0, -1.0]), [1.0, 1.0])
    with pytest.raises(oracle.OracleError, match="shapes"):
        oracle.dense_spd_solve(np.eye(2), [1.0])


def test_random_spd_condition():
    A = oracle.random_spd(10, np.random.default_rng(2), cond=100.0)
    np.testing.assert_allclose(A, A.T, atol=1e-14)
    assert np.linalg.cond(A) == pytest.approx(100.0, rel=1e-8)


def test_relative_error_floor():
    assert oracle.relative_error([1e-13], [0.0]) == pytest.approx(0.1)
    assert oracle.relative_error([1.1], [1.0]) == pytest.approx(0.1)


# -- exact bi-level gradient ------------------------------------------------


def test_exact_gradient_kappa_zero_is_plain_gradient_at_optima():
    net, batches = oracle.tiny_instance(1)
    sol = solve_inner(net, *batches, oracle.tight_config(0.0))

    def total(v):
        n = net.with_values(v)
        return sum(float(np.mean((h.scores(n.transform(x)) - y) ** 2)) for h, (x, y) in zip(sol.heads, batches))

    plain = oracle.fd_gradient(total, net.params.values)
    exact = oracle.exact_bilevel_gradient(net, batches, 0.0)
    assert oracle.relative_error(exact.values, plain) < 1e-5


@pytest.mark.parametrize("kappa", [0.0, 0.1, 1.0, 10.0])
def test_implicit_grad_matches_exact(kappa):
    net, batches = oracle.tiny_instance(2)
    _, _, ig = outer_gradient(net, batches, oracle.tight_config(kappa))
    assert oracle.relative_error(ig.grad_lambda, oracle.exact_bilevel_gradient(net, batches, kappa)) <= 1e-3


@pytest.fixture(scope="module")
def large_kappa():
    net, batches = oracle.tiny_instance(0)
    return (
        oracle.exact_bilevel_gradient(net, batches, 1e6),
        oracle.head_gap_gradient(net, batches),
        oracle.shared_head_erm_gradient(net, batches),
    )


def test_large_kappa_aligns_with_head_gap_gradient(large_kappa):
    exact, gap, _ = large_kappa
    assert cosine(exact, gap) > 0.99


@pytest.mark.xfail(
    strict=True,
    reason="the inner optima do not depend on kappa, so the kappa -> inf gradient is the head-gap "
    "gradient; its cosine with the pooled shared-head gradient is about -0.2 on this instance",
)
def test_large_kappa_aligns_with_shared_head_erm(large_kappa):
    exact, _, erm = large_kappa
    assert cosine(exact, erm) > 0.99


def test_exact_head_raises_damping_when_singular():
    z = np.ones((10, 2))
    with pytest.warns(UserWarning):
        net = ReprNet.init((2, 2), activation="linear").with_values(np.r_[0.0, 0.0, 0.0, 0.0, 1.0, 1.0])
        x = np.random.default_rng(0).normal(size=(10, 2))
        oracle.exact_bilevel_gradient(net, ((x, x[:, 0]), (x, x[:, 1])), 0.0)
    _, mu = oracle.exact_head(z, np.arange(10.0))
    assert mu > 0


# -- unrolled path ----------------------------------------------------------


def test_unrolled_zero_steps_is_plain_gradient_at_initial_heads():
    net, batches = oracle.tiny_instance(4, n=20)
    h0 = Head.init(net.embed_dim, seed=1, scale=1.0)
    h1 = Head.init(net.embed_dim, seed=2, scale=1.0)
    got = oracle.explicit_unrolled_step(net, (h0, h1), batches, T=0, kappa=3.0)

    def total(v):
        n = net.with_values(v)
        return sum(float(np.mean((h.scores(n.transform(x)) - y) ** 2)) for h, (x, y) in zip((h0, h1), batches))

    assert oracle.relative_error(got, oracle.fd_gradient(total, net.params.values)) < 1e-6


def test_unrolled_matches_implicit_for_large_T():
    rep = oracle._check_unrolled(0)
    assert rep.passed, rep.summary()


def test_unrolled_memory_budget():
    net, batches = oracle.tiny_instance(0, n=16)
    with pytest.raises(oracle.MemoryBudgetError, match="reduce T"):
        oracle.explicit_unrolled_step(net, Head.zeros(net.embed_dim), batches, T=50, kappa=1.0, node_budget=500)
    with pytest.raises(oracle.OracleError):
        oracle.explicit_unrolled_step(net, Head.zeros(net.embed_dim), batches, T=-1, kappa=1.0)


# -- suite and verify command -----------------------------------------------


def test_run_suite_passes_and_serialises():
    reports = oracle.run_suite()
    assert len(reports) == len(oracle.CHECKS)
    for r in reports:
        assert r.passed, r.summary()
        back = json.loads(r.to_json())
        assert back["name"] == r.name and back["passed"] is True


def test_run_suite_filter():
    assert [r.name for r in oracle.run_suite("cg")] == ["cg_vs_dense"]


def test_verify_detects_sign_flip(monkeypatch, capsys):
    assert cli.main(["verify", "--filter", "implicit"]) == 0
    real = bilevel.implicit_grad

    def flipped(*args, **kw):
        ig = real(*args, **kw)
        ig.grad_lambda = ig.grad_lambda.with_values(-ig.grad_lambda.values)
        return ig

    monkeypatch.setattr(bilevel, "implicit_grad", flipped)
    assert cli.main(["verify", "--filter", "implicit"]) == cli.EXIT_VERIFY
    assert "FAIL" in capsys.readouterr().out


def test_verify_reports_crash_as_failure(monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("broken")

    monkeypatch.setattr(bilevel, "cg_solve", boom)
    reports = oracle.run_suite("cg")
    assert not reports[0].passed and "broken" in reports[0].engine[0]


def test_oracle_does_not_import_engine_at_module_level():
    import ast
    import inspect

    tree = ast.parse(inspect.getsource(oracle))
    top = [n for n in tree.body if isinstance(n, (ast.Import, ast.ImportFrom))]
    names = {a.name for n in top for a in n.names}
    assert not names & {"bilevel", "metrics"}

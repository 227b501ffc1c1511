import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_align import oracle
from implicit_align.bilevel import (
    Adam,
    BilevelConfig,
    CGBreakdownError,
    ConfigError,
    InnerDivergenceError,
    InnerSolution,
    compute_p,
    cg_solve,
    implicit_grad,
    outer_gradient,
    outer_objective,
    solve_inner,
    train,
)
from implicit_align.data_io import SyntheticSpec, gen_synthetic
from implicit_align.models import Head, ReprNet, augment
from implicit_align.records import records_to_csv


def identity_net(d=1):
    net = ReprNet.init((d, d), activation="linear")
    return net.with_values(np.concatenate([np.eye(d).ravel(), np.zeros(d)]))


def sol_of(h0, h1):
    return InnerSolution(Head.from_flat(h0), Head.from_flat(h1), 0.0, 0.0, 0)


# -- outer objective --------------------------------------------------------


def test_outer_objective_perfect_fit_no_penalty():
    net = identity_net()
    x = np.array([[1.0], [2.0]])
    batches = ((x, 2 * x[:, 0]), (x, 2 * x[:, 0]))
    assert outer_objective(net, sol_of([2.0, 0.0], [2.0, 0.0]), batches, 5.0) == 0.0


def test_outer_objective_penalty_only():
    net = identity_net()
    x = np.array([[1.0], [2.0]])
    batches = ((x, np.zeros(2)), (x, np.zeros(2)))
    # zero loss for zero heads; heads differ by (1, 0) -> kappa/2 * 1
    assert outer_objective(net, sol_of([0.0, 0.0], [0.0, 0.0]), batches, 1.0) == 0.0
    s = sol_of([1.0, 0.0], [0.0, 0.0])
    want = np.mean((x[:, 0]) ** 2) + 0.5 * 2.0 * 1.0
    assert outer_objective(net, s, batches, 2.0) == pytest.approx(want, abs=1e-15)


def test_outer_objective_rejects_missing_group():
    net = identity_net()
    x = np.array([[1.0]])
    with pytest.raises(ValueError, match="group 1"):
        outer_objective(net, sol_of([0.0, 0.0], [0.0, 0.0]), ((x, [1.0]), (np.zeros((0, 1)), [])), 0.0)
    with pytest.raises(ValueError):
        outer_objective(net, sol_of([0.0, 0.0], [0.0, 0.0]), ((x, [1.0]),), 0.0)


# -- inner solve ------------------------------------------------------------


def test_solve_inner_line_fit():
    net = identity_net()
    data = (np.array([[1.0], [2.0]]), np.array([2.0, 4.0]))
    cfg = BilevelConfig(inner_tol_eps=1e-10, inner_max_steps=100_000)
    sol = solve_inner(net, data, data, cfg)
    assert sol.converged
    np.testing.assert_allclose(sol.head0.values, [2.0, 0.0], atol=1e-8)
    np.testing.assert_allclose(sol.head1.values, [2.0, 0.0], atol=1e-8)


def test_identical_groups_give_identical_heads():
    rng = np.random.default_rng(0)
    net = ReprNet.init((4, 5, 3), seed=0)
    data = (rng.normal(size=(30, 4)), rng.normal(size=30))
    sol = solve_inner(net, data, data, BilevelConfig(inner_tol_eps=1e-9, inner_max_steps=50_000))
    np.testing.assert_array_equal(sol.head0.values, sol.head1.values)


def test_solve_inner_exact_matches_gradient_descent():
    rng = np.random.default_rng(1)
    net = ReprNet.init((4, 3), seed=1, activation="linear")
    d0 = (rng.normal(size=(40, 4)), rng.normal(size=40))
    d1 = (rng.normal(size=(40, 4)) + 1, rng.normal(size=40))
    gd = solve_inner(net, d0, d1, BilevelConfig(inner_tol_eps=1e-11, inner_max_steps=200_000))
    ex = solve_inner(net, d0, d1, BilevelConfig(inner_solver="exact"))
    np.testing.assert_allclose(gd.head0.values, ex.head0.values, atol=1e-8)
    np.testing.assert_allclose(gd.head1.values, ex.head1.values, atol=1e-8)


def test_inner_divergence_reports_group_and_lr():
    net = identity_net()
    data = (np.array([[1.0], [2.0]]), np.array([2.0, 4.0]))
    with pytest.raises(InnerDivergenceError, match="group 0.*lr"):
        solve_inner(net, data, data, BilevelConfig(inner_lr=100.0, inner_max_steps=10_000))


def test_warm_start_needs_no_steps():
    net = identity_net()
    data = (np.array([[1.0], [2.0]]), np.array([2.0, 4.0]))
    cfg = BilevelConfig(inner_tol_eps=1e-8, inner_max_steps=100_000)
    first = solve_inner(net, data, data, cfg)
    again = solve_inner(net, data, data, cfg, init=first.heads)
    assert again.steps_used == 0


# -- conjugate gradient -----------------------------------------------------


def test_cg_identity_one_iteration():
    res = cg_solve(lambda v: v, np.array([1.0, 2.0, 3.0]))
    assert res.converged and res.iterations == 1
    np.testing.assert_allclose(res.x, [1.0, 2.0, 3.0], atol=1e-12)


def test_cg_zero_rhs():
    res = cg_solve(lambda v: 3 * v, np.zeros(4))
    assert res.converged and res.iterations == 0
    np.testing.assert_array_equal(res.x, np.zeros(4))


def test_cg_random_spd_matches_dense():
    rng = np.random.default_rng(0)
    A = oracle.random_spd(20, rng)
    b = rng.normal(size=20)
    res = cg_solve(lambda v: A @ v, b, max_iters=20, tol=1e-10)
    np.testing.assert_allclose(res.x, np.linalg.solve(A, b), atol=1e-8)


def test_cg_indefinite_breaks_down():
    A = np.diag([1.0, -1.0])
    with pytest.raises(CGBreakdownError, match="hessian_damping"):
        cg_solve(lambda v: A @ v, np.array([0.0, 1.0]))


def test_cg_non_converged_returns_best_iterate():
    rng = np.random.default_rng(2)
    A = oracle.random_spd(30, rng, cond=1e4)
    b = rng.normal(size=30)
    res = cg_solve(lambda v: A @ v, b, max_iters=2, tol=1e-14)
    assert not res.converged and res.iterations == 2
    assert res.residual == pytest.approx(np.linalg.norm(b - A @ res.x), rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 15))
def test_cg_converges_on_moderate_condition(seed, n):
    rng = np.random.default_rng(seed)
    A = oracle.random_spd(n, rng, cond=100.0)
    b = rng.normal(size=n)
    res = cg_solve(lambda v: A @ v, b, max_iters=3 * n, tol=1e-8 * max(1.0, np.linalg.norm(b)))
    assert res.converged
    np.testing.assert_allclose(A @ res.x, b, atol=1e-6)


# -- p-vectors and the implicit gradient ------------------------------------


def test_compute_p_matches_dense_solve():
    net, batches = oracle.tiny_instance(3)
    cfg = oracle.tight_config(0.5)
    sol = solve_inner(net, *batches, cfg)
    pv = compute_p(net, sol, batches, cfg)
    diff = sol.head0.values - sol.head1.values
    for head, (x, y), p, sign in zip(sol.heads, batches, pv, (1.0, -1.0)):
        za = augment(net.transform(x))
        H = 2 * za.T @ za / len(y)
        g = 2 * za.T @ (za @ head.values - y) / len(y)
        want = oracle.dense_spd_solve(H, g + sign * 0.5 * diff)
        np.testing.assert_allclose(p.values, want, atol=1e-7)


def test_p_vanishes_at_kappa_zero():
    net, batches = oracle.tiny_instance(4)
    cfg = oracle.tight_config(0.0)
    _, pv, _ = outer_gradient(net, batches, cfg)
    assert np.linalg.norm(pv.p0.values) < 1e-7 and np.linalg.norm(pv.p1.values) < 1e-7


def test_implicit_grad_with_zero_p_is_plain_gradient():
    net, batches = oracle.tiny_instance(5)
    sol = solve_inner(net, *batches, oracle.tight_config(0.0))
    k = sol.head0.params.size
    ig = implicit_grad(net, sol, np.zeros(k), np.zeros(k), batches)

    def total(values):
        n = net.with_values(values)
        return sum(
            float(np.mean((h.scores(n.transform(x)) - y) ** 2)) for h, (x, y) in zip(sol.heads, batches)
        )

    fd = oracle.fd_gradient(total, net.params.values)
    np.testing.assert_allclose(ig.grad_lambda.values, fd, atol=1e-6)


@pytest.mark.parametrize("kappa", [0.0, 0.1, 10.0])
def test_group_swap_invariance(kappa):
    net, (b0, b1) = oracle.tiny_instance(6)
    cfg = oracle.tight_config(kappa)
    s01, _, g01 = outer_gradient(net, (b0, b1), cfg)
    s10, _, g10 = outer_gradient(net, (b1, b0), cfg)
    np.testing.assert_allclose(g01.grad_lambda.values, g10.grad_lambda.values, atol=1e-10)
    np.testing.assert_allclose(s01.head0.values, s10.head1.values, atol=1e-10)


def test_gradient_matches_finite_differences():
    net, batches = oracle.tiny_instance(7)
    _, _, ig = outer_gradient(net, batches, oracle.tight_config(0.3))
    want = oracle.exact_bilevel_gradient(net, batches, 0.3)
    assert oracle.relative_error(ig.grad_lambda.values, want.values) < 1e-6


# -- configuration ----------------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [
        {"kappa": -1.0},
        {"kappa": float("nan")},
        {"cg_max_iters": 0},
        {"inner_tol_eps": 0.0},
        {"outer_lr": 0.0},
        {"inner_solver": "newton"},
        {"batch_size_per_group": 0},
    ],
)
def test_config_rejects_bad_values(bad):
    with pytest.raises(ConfigError):
        BilevelConfig(**bad)


def test_config_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="kapa"):
        BilevelConfig.from_dict({"kapa": 0.1})
    assert BilevelConfig.from_dict({"kappa": 0.2}).kappa == 0.2


def test_config_default_training_settings():
    cfg = BilevelConfig()
    assert (cfg.outer_lr, cfg.adam_eps, cfg.batch_size_per_group, cfg.max_epochs) == (1e-3, 1e-3, 500, 100)


def test_adam_first_step_is_lr_times_sign():
    opt = Adam(3, lr=0.1, eps=1e-12)
    new = opt.step(np.zeros(3), np.array([2.0, -5.0, 0.5]))
    np.testing.assert_allclose(new, [-0.1, 0.1, -0.1], atol=1e-9)


# -- training ---------------------------------------------------------------


@pytest.fixture(scope="module")
def small_biased():
    return gen_synthetic(SyntheticSpec.biased(seed=0, n_per_group=400, feature_scale=0.05))


def _final_hd(ds, kappa, seed):
    cfg = BilevelConfig(kappa=kappa, seed=seed, max_epochs=60, batch_size_per_group=200)
    return train(ReprNet.init((6, 16, 4), seed=seed), Head.zeros(4), ds, cfg).records[-1].head_distance


@pytest.fixture(scope="module")
def hd_pairs(small_biased):
    return [(_final_hd(small_biased, 0.0, s), _final_hd(small_biased, 0.1, s)) for s in (0, 1, 2)]


def test_kappa_reduces_head_distance(hd_pairs):
    for h0, h1 in hd_pairs:
        assert h1 < h0


@pytest.mark.xfail(
    strict=True,
    reason="kappa=0.1 shrinks the final head distance to about 40-60% of kappa=0 on this "
    "generator (25-80% across scales and budgets), not below 10%",
)
def test_kappa_cuts_head_distance_by_ninety_percent(hd_pairs):
    ratios = [h1 / h0 for h0, h1 in hd_pairs]
    assert max(ratios) < 0.1, ratios


def test_train_is_deterministic(small_biased):
    cfg = BilevelConfig(kappa=0.1, seed=3, max_epochs=2, batch_size_per_group=100)
    runs = [train(ReprNet.init((6, 4), seed=3), Head.zeros(4), small_biased, cfg).records for _ in range(2)]
    assert records_to_csv(runs[0]) == records_to_csv(runs[1])
    assert [r.epoch for r in runs[0]] == [1, 2]


def test_train_abort_keeps_partial_records(small_biased):
    seen = []

    def on_epoch(r):
        seen.append(r)
        if r.epoch == 2:
            raise RuntimeError("stop")

    cfg = BilevelConfig(seed=0, max_epochs=5, batch_size_per_group=100)
    with pytest.raises(RuntimeError) as info:
        train(ReprNet.init((6, 4), seed=0), Head.zeros(4), small_biased, cfg, on_epoch=on_epoch)
    assert [r.epoch for r in info.value.partial_records] == [1, 2]


def test_train_inner_divergence_aborts_with_partial_records(small_biased):
    cfg = BilevelConfig(seed=0, max_epochs=3, batch_size_per_group=100, inner_lr=1e6)
    with pytest.raises(InnerDivergenceError) as info:
        train(ReprNet.init((6, 4), seed=0), Head.zeros(4), small_biased, cfg)
    assert info.value.partial_records == []

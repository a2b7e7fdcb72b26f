import numpy as np
import pytest
from scipy.integrate import solve_ivp

from conftest import build, make_config, scalar_cluster, two_cluster_cfg
from mfsocial.model import derive_matrices
from mfsocial.riccati import (SolverDivergenceError, closed_loop_matrices, riccati_residual,
                              solve_P, solve_riccati)


def _solve(spec):
    d = derive_matrices(spec)
    return d, solve_riccati(spec, d)


def test_tanh_closed_form(tanh_spec):
    _, sol = _solve(tanh_spec)
    assert abs(sol.P[0, 0, 0, 0] - np.tanh(1.0)) <= 1e-6
    np.testing.assert_allclose(sol.P[:, 0, 0, 0], np.tanh(1.0 - sol.grid), atol=1e-10)


def test_tanh_against_adaptive_reference(tanh_spec):
    # independent route: adaptive RK45 on dP/dt = P^2 - 1 backward from P(1) = 0
    ref = solve_ivp(lambda t, p: p ** 2 - 1.0, (1.0, 0.0), [0.0], rtol=1e-12, atol=1e-14)
    _, sol = _solve(tanh_spec)
    assert abs(sol.P[0, 0, 0, 0] - ref.y[0, -1]) <= 1e-9


def test_zero_weights_give_zero_gain():
    spec = build(make_config([scalar_cluster(1, Q=0.0, H=0.0)], steps=50))
    _, sol = _solve(spec)
    assert np.all(sol.P == 0) and np.all(sol.KK == 0)


def test_no_control_authority_linear_solution():
    spec = build(make_config([scalar_cluster(1, B=0.0, Q=1.0, H=1.0, R=3.0)], steps=40))
    _, sol = _solve(spec)
    np.testing.assert_allclose(sol.P[:, 0, 0, 0], 1.0 + (1.0 - sol.grid), atol=1e-12)


def test_terminal_conditions_exact(two_spec):
    d, sol = _solve(two_spec)
    for q, c in enumerate(two_spec.clusters):
        assert np.array_equal(sol.P[-1, q], c.H)
    assert np.array_equal(sol.KK[-1], -d.Hbar)


def test_no_mean_field_coupling_gives_zero_K():
    spec = build(two_cluster_cfg(G=(0.0, 0.0), Gamma=(0.0, 0.0)))
    _, sol = _solve(spec)
    assert np.all(sol.KK == 0)


def test_K_self_convergence():
    coarse = build(two_cluster_cfg(steps=100))
    fine = coarse.replace(steps=1000)
    _, a = _solve(coarse)
    _, b = _solve(fine)
    assert np.max(np.abs(a.KK[0] - b.KK[0])) <= 1e-8
    assert np.abs(a.KK[0]).max() > 1e-2


def test_refinement_is_fourth_order():
    errs = []
    ref = _solve(build(two_cluster_cfg(steps=640)))[1]
    for steps in (10, 20, 40):
        sol = _solve(build(two_cluster_cfg(steps=steps)))[1]
        errs.append(max(np.abs(sol.KK[0] - ref.KK[0]).max(), np.abs(sol.P[0] - ref.P[0]).max()))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(rates > 3.5), rates


def test_kbar_is_row_block(two_spec):
    _, sol = _solve(two_spec)
    n = two_spec.n
    for q in range(two_spec.K):
        assert np.array_equal(sol.Kbar(q), sol.KK[:, q * n:(q + 1) * n, :])


def test_P_symmetric_psd():
    c = dict(scalar_cluster(1), A=[[0.3, 1.0], [-0.5, 0.1]], B=[[1.0], [0.5]],
             G=np.zeros((2, 2)).tolist(), Sigma=[[0.1], [0.2]], Gamma=np.zeros((2, 2)).tolist(),
             Q=[[2.0, 0.5], [0.5, 1.0]], H=[[1.0, 0.0], [0.0, 0.0]], init_mean=[0, 0],
             init_cov=np.zeros((2, 2)).tolist())
    spec = build(make_config([c], n=2, steps=200))
    _, sol = _solve(spec)
    P = sol.P[:, 0]
    assert np.array_equal(P, np.swapaxes(P, 1, 2))
    assert np.linalg.eigvalsh(P).min() >= -1e-10


def test_P_decoupled_from_other_clusters():
    base = build(two_cluster_cfg())
    changed = build(two_cluster_cfg(G=(0.8, 5.0), Gamma=(0.6, -2.0), sigma=(0.5, 3.0)))
    pa = solve_P(base, derive_matrices(base))
    pb = solve_P(changed, derive_matrices(changed))
    assert np.array_equal(pa[:, 0], pb[:, 0])


def test_residual_tanh(tanh_spec):
    d, sol = _solve(tanh_spec)
    res = riccati_residual(sol, tanh_spec, d)
    assert res["P"] <= 1e-4
    assert res["K"] == 0.0


def test_residual_zero_instance():
    spec = build(make_config([scalar_cluster(3, Q=0.0, H=0.0)], steps=30))
    d, sol = _solve(spec)
    assert riccati_residual(sol, spec, d) == {"P": 0.0, "K": 0.0}


def test_residual_second_order():
    r = []
    for steps in (100, 200):
        spec = build(two_cluster_cfg(steps=steps))
        d, sol = _solve(spec)
        r.append(riccati_residual(sol, spec, d))
    for key in ("P", "K"):
        assert r[0][key] / r[1][key] == pytest.approx(4.0, rel=0.1)


def test_closed_loop_matrices_scalar(two_spec):
    d, sol = _solve(two_spec)
    cl = closed_loop_matrices(sol, d)
    k = 17
    for q, c in enumerate(two_spec.clusters):
        a, b, r = c.A[0, 0], c.B[0, 0], c.R[0, 0]
        p = sol.P[k, q, 0, 0]
        assert cl.Atilde[k, q, 0, 0] == pytest.approx(a - b * b * p / r, rel=1e-14)
        np.testing.assert_allclose(cl.Gtilde[k, q], d.Gbar[q] - b * b / r * sol.Kbar(q)[k],
                                   rtol=1e-14)
    assert cl.Z.shape == (sol.steps + 1, 2, 4)


def test_closed_loop_with_zero_gains():
    spec = build(two_cluster_cfg(G=(0.0, 0.0), Gamma=(0.0, 0.0)))
    spec = spec.replace(clusters=tuple(
        type(c)(**{**c.matrices, "label": c.label, "count": c.count,
                   "Q": np.zeros((1, 1)), "H": np.zeros((1, 1))}) for c in spec.clusters))
    d, sol = _solve(spec)
    cl = closed_loop_matrices(sol, d)
    for q, c in enumerate(spec.clusters):
        assert np.array_equal(cl.Atilde[:, q], np.broadcast_to(c.A, cl.Atilde[:, q].shape))
        assert np.array_equal(cl.Gtilde[:, q], np.broadcast_to(d.Gbar[q], cl.Gtilde[:, q].shape))
    assert np.all(cl.Z == 0)


def test_divergence_reported():
    # huge anti-stabilising drift with an absurdly coarse grid blows up RK4
    spec = build(make_config([scalar_cluster(1, A=0.0, B=1.0, Q=1.0, H=1e150, R=1e-150)],
                             steps=2))
    with pytest.raises(SolverDivergenceError, match="cluster 0"):
        _solve(spec)

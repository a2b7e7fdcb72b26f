import numpy as np
import pytest

from conftest import build, make_config, scalar_cluster, two_cluster_cfg
from mfsocial.experiments import solve_system
from mfsocial.simulate import (draw_noise, simulate_centralized, simulate_coupled,
                               simulate_distributed, simulate_openloop)


def test_noise_deterministic_and_seed_sensitive(two_spec):
    a = draw_noise(two_spec, 3, 42)
    b = draw_noise(two_spec, 3, 42)
    c = draw_noise(two_spec, 3, 43)
    assert np.array_equal(a.dW, b.dW) and np.array_equal(a.x0, b.x0)
    assert not np.array_equal(a.dW[:, :, 0], c.dW[:, :, 0])


def test_noise_keyed_by_path_and_agent():
    spec = build(two_cluster_cfg(counts=(2, 3), steps=20))
    big = spec.replace(counts=[5, 3])
    a = draw_noise(spec, 4, 9)
    b = draw_noise(big, 4, 9)
    # path slices equal the full draw
    np.testing.assert_array_equal(a.increments(2, 4), a.dW[2:4])
    # agent j of a cluster keeps its draws when the population grows
    np.testing.assert_array_equal(a.dW[:, :2], b.dW[:, :2])
    np.testing.assert_array_equal(a.dW[:, 2:], b.dW[:, 5:])
    np.testing.assert_array_equal(a.x0[:, 2:], b.x0[:, 5:])


def test_increment_variance():
    spec = build(two_cluster_cfg(counts=(10, 10), steps=100))
    dW = draw_noise(spec, 10, 1).dW
    assert dW.size >= 10 ** 4
    assert abs(dW.var() / spec.h - 1.0) <= 0.05


def test_zero_init_cov_starts_at_mean():
    spec = build(two_cluster_cfg(cov=(0.0, 0.0)))
    x0 = draw_noise(spec, 3, 5).x0
    assert np.all(x0[:, :2] == 1.0) and np.all(x0[:, 2:] == -0.5)


def test_deterministic_scalar_closed_loop(tanh_spec):
    # x' = -tanh(1 - t) x  =>  x(t) = cosh(1 - t) / cosh(1)
    sys = solve_system(tanh_spec)
    b = simulate_centralized(tanh_spec, sys, draw_noise(tanh_spec, 1, 0))
    exact = np.cosh(1.0 - tanh_spec.grid) / np.cosh(1.0)
    assert np.max(np.abs(b.x[0, 0, :, 0] - exact)) <= 1e-3
    assert b.costs.soc[0] == pytest.approx(np.tanh(1.0), rel=0.02)


def test_single_agent_mean_dynamics():
    spec = build(make_config([scalar_cluster(1, A=0.5, Sigma=0.7, H=1.0, mean=1.0, cov=0.5)],
                             steps=50))
    sys = solve_system(spec)
    paths = 4000
    b = simulate_centralized(spec, sys, draw_noise(spec, paths, 3))
    mean = np.empty(spec.steps + 1)
    mean[0] = 1.0
    for k in range(spec.steps):
        mean[k + 1] = mean[k] * (1 + spec.h * sys.closed.Atilde[k, 0, 0, 0])
    emp = b.x[:, 0, :, 0]
    se = emp.std(axis=0, ddof=1) / np.sqrt(paths)
    assert np.all(np.abs(emp.mean(axis=0) - mean) <= 4.5 * se + 1e-12)


def test_identical_agents_share_trajectories():
    spec = build(two_cluster_cfg(counts=(3, 4), sigma=(0.0, 0.0), cov=(0.0, 0.0), steps=60))
    sys = solve_system(spec)
    b = simulate_centralized(spec, sys, draw_noise(spec, 2, 0))
    for q in range(2):
        xs = b.x[:, spec.agent_slice(q)]
        assert np.all(xs == xs[:, :1])
        np.testing.assert_allclose(xs[:, 0, :, 0], b.xK[:, :, q, 0], rtol=1e-15)


def test_mean_field_recomputation(two_spec):
    sys = solve_system(two_spec)
    b = simulate_centralized(two_spec, sys, draw_noise(two_spec, 3, 1))
    for q in range(2):
        avg = b.x[:, two_spec.agent_slice(q)].mean(axis=1)  # (paths, steps+1, n)
        np.testing.assert_allclose(b.xK[:, :, q], avg, atol=1e-12)
    M, K = two_spec.topology.M, two_spec.K
    z = b.zK
    np.testing.assert_allclose(z[:, :, 0], (M[0, 0] * b.xK[:, :, 0] + M[0, 1] * b.xK[:, :, 1]) / K,
                               atol=1e-15)


def test_aggregate_equation_matches_agent_average(two_spec):
    # integrate the stacked closed-loop mean-field recursion with averaged increments
    sys = solve_system(two_spec)
    noise = draw_noise(two_spec, 2, 7)
    b = simulate_centralized(two_spec, sys, noise)
    cl, h = sys.closed, two_spec.h
    dW = noise.dW
    x = b.xK[:, 0].reshape(2, -1).copy()
    for k in range(two_spec.steps):
        new = np.empty_like(x)
        for q, c in enumerate(two_spec.clusters):
            wK = dW[:, two_spec.agent_slice(q), k].mean(axis=1)
            new[:, q] = (x[:, q] + h * (x[:, q] * cl.Atilde[k, q, 0, 0] + x @ cl.Gtilde[k, q, 0])
                         + (wK @ c.Sigma.T)[:, 0])
        x = new
        np.testing.assert_allclose(x, b.xK[:, k + 1, :, 0], atol=1e-12)


def test_complete_graph_bitwise_equal():
    spec = build(two_cluster_cfg(E=((1, 1), (1, 1)), steps=80))
    sys = solve_system(spec)
    noise = draw_noise(spec, 6, 11)
    c = simulate_centralized(spec, sys, noise)
    d, _ = simulate_distributed(spec, sys, noise)
    assert np.array_equal(c.x, d.x) and np.array_equal(c.u, d.u)


def test_empty_graph_deterministic_equals_centralized():
    spec = build(two_cluster_cfg(E=((0, 0), (0, 0)), sigma=(0.0, 0.0), cov=(0.0, 0.0)))
    sys = solve_system(spec)
    noise = draw_noise(spec, 1, 0)
    c = simulate_centralized(spec, sys, noise)
    d, _ = simulate_distributed(spec, sys, noise)
    np.testing.assert_allclose(d.x, c.x, atol=1e-12)


def test_distributed_cluster_deviation_sums_to_zero(two_spec):
    sys = solve_system(two_spec)
    d, _ = simulate_distributed(two_spec, sys, draw_noise(two_spec, 3, 4))
    for q in range(2):
        dev = d.x[:, two_spec.agent_slice(q)] - d.xK[:, None, :, q]
        assert np.abs(dev.sum(axis=1)).max() <= 1e-12


def test_openloop_zero_control_constant_state():
    spec = build(make_config([scalar_cluster(3, A=0.0, G=0.0, Sigma=0.0, cov=0.4)], steps=30))
    noise = draw_noise(spec, 2, 0)
    b = simulate_openloop(spec, np.zeros((3, 30, 1)), noise)
    assert np.all(b.x == b.x[:, :, :1])


def test_openloop_replays_centralized(two_spec):
    sys = solve_system(two_spec)
    noise = draw_noise(two_spec, 3, 8)
    c = simulate_centralized(two_spec, sys, noise)
    o = simulate_openloop(two_spec, c.u, noise)
    np.testing.assert_allclose(o.x, c.x, atol=1e-12, rtol=0)
    np.testing.assert_allclose(o.costs.soc, c.costs.soc, rtol=1e-12)


def test_openloop_shape_checked(two_spec):
    with pytest.raises(ValueError, match="shape"):
        simulate_openloop(two_spec, np.zeros((4, 10, 1)), draw_noise(two_spec, 1, 0))


def test_worker_count_does_not_change_results(monkeypatch):
    from mfsocial import simulate as sim

    monkeypatch.setattr(sim, "CHUNK_PATHS", 4)
    spec = build(two_cluster_cfg(steps=40))
    sys = solve_system(spec)
    noise = draw_noise(spec, 13, 5)
    a = simulate_coupled(sys, noise, workers=1, store=True)
    b = simulate_coupled(sys, noise, workers=4, store=True)
    assert np.array_equal(a.distributed.x, b.distributed.x)
    assert np.array_equal(a.centralized.costs.agent, b.centralized.costs.agent)
    assert np.array_equal(a.ms_check, b.ms_check)


def test_streaming_equals_stored(two_spec):
    sys = solve_system(two_spec)
    noise = draw_noise(two_spec, 5, 2)
    stored = simulate_centralized(two_spec, sys, noise, store=True)
    streamed = simulate_centralized(two_spec, sys, noise, store=False)
    assert streamed.x is None
    assert np.array_equal(stored.costs.agent, streamed.costs.agent)


def test_common_noise_across_regimes(two_spec):
    sys = solve_system(two_spec)
    noise = draw_noise(two_spec, 2, 3)
    c = simulate_centralized(two_spec, sys, noise)
    d, _ = simulate_distributed(two_spec, sys, noise)
    assert np.array_equal(c.x[:, :, 0], d.x[:, :, 0])

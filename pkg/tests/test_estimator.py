import numpy as np
import pytest

from conftest import build, two_cluster_cfg
from mfsocial.estimator import (InformationPatternError, MeanFieldChannel, estimation_errors,
                                init_estimator)
from mfsocial.experiments import solve_system
from mfsocial.model import derive_matrices
from mfsocial.simulate import draw_noise, simulate_centralized, simulate_distributed


def _channel(spec, values):
    nb = tuple(spec.topology.neighbors(q) for q in range(spec.K))
    return MeanFieldChannel(values, nb, audit=True)


def test_init_complete_graph():
    spec = build(two_cluster_cfg(E=((1, 1), (1, 1))))
    xK = np.array([[[0.3], [-0.8]]])
    ests = init_estimator(spec, derive_matrices(spec), _channel(spec, xK), 1)
    for e in ests:
        np.testing.assert_array_equal(e.state, [[0.3, -0.8]])


def test_init_empty_graph():
    spec = build(two_cluster_cfg(E=((0, 0), (0, 0))))
    xK = np.array([[[0.3], [-0.8]]])
    ests = init_estimator(spec, derive_matrices(spec), _channel(spec, xK), 1)
    for e in ests:
        np.testing.assert_array_equal(e.state, [[1.0, -0.5]])


def test_init_degenerate_law_branches_agree():
    spec = build(two_cluster_cfg(cov=(0.0, 0.0)))
    x0 = draw_noise(spec, 1, 0).initial_states()
    xK = np.stack([x0[:, spec.agent_slice(q)].mean(axis=1) for q in range(2)], axis=1)
    ests = init_estimator(spec, derive_matrices(spec), _channel(spec, xK), 1)
    for e in ests:
        np.testing.assert_array_equal(e.state, [[1.0, -0.5]])


def test_channel_refuses_non_neighbors():
    spec = build(two_cluster_cfg(E=((1, 0), (1, 1))))
    ch = _channel(spec, np.zeros((1, 2, 1)))
    ch.read(1, 0)
    with pytest.raises(InformationPatternError):
        ch.read(0, 1)


def test_information_pattern_audit():
    spec = build(two_cluster_cfg(E=((1, 0), (1, 1)), steps=30))
    sys = solve_system(spec)
    channels = []

    def factory(values, nb):
        ch = MeanFieldChannel(values, nb, audit=True)
        channels.append(ch)
        return ch

    simulate_distributed(spec, sys, draw_noise(spec, 3, 1), channel_factory=factory)
    reads = {pair for ch in channels for pair in ch.log}
    assert reads == {(0, 0), (1, 0), (1, 1)}


def test_observed_blocks_carry_zero_error():
    spec = build(two_cluster_cfg(E=((1, 0), (1, 1)), steps=50))
    sys = solve_system(spec)
    b, tr = simulate_distributed(spec, sys, draw_noise(spec, 4, 2))
    xK = b.xK  # (paths, steps+1, K, n)
    for q in range(2):
        for p in spec.topology.neighbors(q):
            assert np.array_equal(tr.xbar[:, :, q, p], xK[:, :, p, 0])
    # the unobserved block is a genuine estimate
    assert np.abs(tr.xbar[:, 1:, 0, 1] - xK[:, 1:, 1, 0]).max() > 1e-3


def test_complete_graph_no_error():
    spec = build(two_cluster_cfg(E=((1, 1), (1, 1)), steps=40))
    sys = solve_system(spec)
    noise = draw_noise(spec, 5, 0)
    b, tr = simulate_distributed(spec, sys, noise)
    stats = estimation_errors(b, tr)
    assert np.all(stats.ms_check == 0)


def test_single_cluster_self_loop():
    spec = build(two_cluster_cfg(E=((1, 1), (1, 1)), steps=20))
    spec = spec.replace(clusters=spec.clusters[:1],
                        topology=type(spec.topology)(E=np.ones((1, 1)), M=np.ones((1, 1))))
    sys = solve_system(spec)
    b, tr = simulate_distributed(spec, sys, draw_noise(spec, 2, 0))
    assert np.array_equal(tr.xbar[:, :, 0, 0], b.xK[:, :, 0, 0])


def test_empty_graph_deterministic_tracks_centralized():
    spec = build(two_cluster_cfg(E=((0, 0), (0, 0)), sigma=(0.0, 0.0), cov=(0.0, 0.0),
                                 steps=200))
    sys = solve_system(spec)
    noise = draw_noise(spec, 1, 0)
    c = simulate_centralized(spec, sys, noise)
    d, tr = simulate_distributed(spec, sys, noise)
    cK = c.xK.reshape(1, -1, 2)
    for q in range(2):
        np.testing.assert_allclose(tr.xbar[:, :, q], cK, atol=1e-12)
    stats = estimation_errors(d, tr, c)
    assert stats.ms_check.max() <= 1e-20 and stats.ms_hat.max() <= 1e-20


def test_deterministic_error_floor_independent_of_N():
    floors = []
    for counts in ((2, 2), (20, 20)):
        spec = build(two_cluster_cfg(counts=counts, E=((1, 0), (0, 1)), sigma=(0.0, 0.0),
                                     cov=(0.0, 0.0), steps=100))
        sys = solve_system(spec)
        noise = draw_noise(spec, 2, 0)
        d, tr = simulate_distributed(spec, sys, noise)
        floors.append(estimation_errors(d, tr).ms_check.max())
    assert max(floors) <= 1e-24


def test_estimation_errors_grid_mismatch():
    spec = build(two_cluster_cfg(steps=10))
    sys = solve_system(spec)
    d, tr = simulate_distributed(spec, sys, draw_noise(spec, 2, 0))
    other = build(two_cluster_cfg(steps=12))
    d2, _ = simulate_distributed(other, solve_system(other), draw_noise(other, 2, 0))
    with pytest.raises(ValueError, match="grid"):
        estimation_errors(d2, tr)


def _sweep_specs(scales, **kw):
    base = build(two_cluster_cfg(counts=(5, 5), steps=50, E=((1, 0), (0, 1)), **kw))
    return [base.replace(counts=[5 * s, 5 * s]) for s in scales]


def test_error_rate_three_scales():
    from mfsocial.experiments import fit_loglog_slope
    from mfsocial.simulate import simulate_coupled

    C1, sup = [], []
    for spec in _sweep_specs((1, 4, 16)):
        run = simulate_coupled(solve_system(spec), draw_noise(spec, 400, 0))
        C1.append(spec.counts.min())
        sup.append(run.ms_check.max())
    assert abs(fit_loglog_slope(C1, sup).slope + 1.0) <= 0.3


def test_second_moments_stable_under_scaling():
    est, real = [], []
    for spec in _sweep_specs((1, 4, 16)):
        d, tr = simulate_distributed(spec, solve_system(spec), draw_noise(spec, 400, 1))
        est.append(max((tr.xbar[:, :, q] ** 2).sum(axis=-1).mean(axis=0).max() for q in range(2)))
        real.append((d.xK ** 2).sum(axis=(-1, -2)).mean(axis=0).max())
    for s in (est, real):
        assert np.all(np.isfinite(s))
        assert (max(s) - min(s)) / max(s) < 0.2

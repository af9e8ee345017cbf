import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from eoc_lowrank import NetworkConfig
from eoc_lowrank import lowrank_sim as ls
from eoc_lowrank import meanfield as mf
from eoc_lowrank import rmt
from eoc_lowrank.errors import DomainError, NumericalOverflow
from eoc_lowrank.records import TrajectoryRecord


def sem(values):
    v = np.asarray(values, dtype=float)
    return float(v.std(ddof=1) / math.sqrt(v.size))


# --------------------------------------------------------------- sampling


@pytest.mark.parametrize("n,r", [(50, 1), (300, 75), (400, 400)])
def test_haar_frame_is_orthonormal(n, r):
    c = ls.haar_frame(n, r, np.random.default_rng(1))
    assert c.shape == (n, r)
    assert np.max(np.abs(c.T @ c - np.eye(r))) <= 1e-10


def test_haar_frame_sign_convention():
    rng = np.random.default_rng(5)
    g = np.random.default_rng(5).standard_normal((60, 20))
    c = ls.haar_frame(60, 20, rng)
    # c = g R^-1 with R upper-triangular and positive on the diagonal
    r = c.T @ g
    assert np.all(np.diag(r) > 0)
    assert np.max(np.abs(np.tril(r, -1))) <= 1e-10


@pytest.mark.parametrize("ensemble", ["gaussian", "orthogonal"])
@pytest.mark.parametrize("gamma", [0.1, 0.25, 0.5, 1.0])
def test_weight_rank_and_shape(ensemble, gamma):
    cfg = NetworkConfig(gamma=gamma, sigma_alpha2=1.3, ensemble=ensemble, width=120)
    w = ls.sample_weights(cfg, 120, 120, np.random.default_rng(0))
    assert w.rank == cfg.rank
    assert w.matrix.shape == (120, 120)
    assert np.linalg.matrix_rank(w.matrix) == cfg.rank
    x = np.random.default_rng(1).standard_normal(120)
    assert np.allclose(w @ x, w.matrix @ x, atol=1e-12)
    assert np.allclose(w.rmatmul_T(x), w.matrix.T @ x, atol=1e-12)


def test_orthogonal_full_rank_is_scaled_isometry():
    cfg = NetworkConfig(gamma=1.0, sigma_alpha2=2.5, ensemble="orthogonal", width=200)
    W = ls.sample_weights(cfg, 200, 200, np.random.default_rng(3)).matrix
    assert np.max(np.abs(W.T @ W - 2.5 * np.eye(200))) <= 1e-10


def test_orthogonal_nonzero_singular_values():
    cfg = NetworkConfig(gamma=0.3, sigma_alpha2=1.7, ensemble="orthogonal", width=200)
    W = ls.sample_weights(cfg, 200, 200, np.random.default_rng(4)).matrix
    ev = np.sort(np.linalg.eigvalsh(W.T @ W))[::-1]
    assert np.max(np.abs(ev[: cfg.rank] - 1.7)) <= 1e-10
    assert np.max(np.abs(ev[cfg.rank:])) <= 1e-10


def test_orthogonal_needs_square():
    cfg = NetworkConfig(gamma=0.5, ensemble="orthogonal", width=20)
    with pytest.raises(DomainError):
        ls.sample_weights(cfg, 20, 30, np.random.default_rng(0))


def test_rank_bounds():
    cfg = NetworkConfig(gamma=1.0, width=20)
    with pytest.raises(DomainError):
        ls.sample_weights(cfg, 20, 10, np.random.default_rng(0))


@pytest.mark.parametrize("gamma", [0.25, 0.5, 1.0])
def test_gaussian_entry_second_moment(gamma):
    n, sa2 = 400, 1.6
    cfg = NetworkConfig(gamma=gamma, sigma_alpha2=sa2, width=n)
    W = ls.sample_weights(cfg, n, n, np.random.default_rng(7)).matrix
    sq = (W * W).ravel()
    assert abs(sq.mean() - cfg.rank * sa2 / n / n) <= 3 * sem(sq)


def test_gaussian_spectrum_matches_mp_bulk():
    n, gamma, sa2 = 1000, 0.25, 1.0
    cfg = NetworkConfig(gamma=gamma, sigma_alpha2=sa2, width=n)
    w = ls.sample_weights(cfg, n, n, np.random.default_rng(11))
    # nonzero eigenvalues of W^T W are those of A A^T
    ev = np.linalg.eigvalsh(w.coeffs @ w.coeffs.T)
    lo, hi = rmt.MarchenkoPasturBulk(sa2, gamma, gamma).support

    def cdf(x):
        x = np.clip(np.atleast_1d(x), lo, hi)
        vals = [integrate.quad(lambda t: rmt.mp_density_eval(gamma, sa2, t), lo, v, limit=200)[0] for v in x]
        return np.asarray(vals) / gamma

    assert stats.kstest(ev, cdf).statistic < 0.05


def test_column_norm_concentration():
    n, gamma = 2000, 0.25
    r = round(gamma * n)
    c = ls.haar_frame(n, r, np.random.default_rng(2))
    row_sq = np.sum(c * c, axis=1)
    assert abs(row_sq.mean() - gamma) <= 0.05
    assert np.mean(np.abs(row_sq - gamma) <= 0.05) >= 0.99


def test_bias_modes():
    cfg = NetworkConfig(gamma=0.5, sigma_b2=0.4, width=40)
    shared = ls.sample_layer(cfg, np.random.default_rng(0), "shared").bias_coeffs
    per = ls.sample_layer(cfg, np.random.default_rng(0), "per_direction").bias_coeffs
    assert np.all(shared == shared[0])
    assert np.unique(per).size == per.size
    with pytest.raises(DomainError):
        ls.sample_layer(cfg, np.random.default_rng(0), "per_unit")


def test_substreams_are_independent_and_reproducible():
    a = ls.substream(0, 1, 2).standard_normal(4)
    assert np.array_equal(a, ls.substream(0, 1, 2).standard_normal(4))
    assert not np.array_equal(a, ls.substream(0, 2, 1).standard_normal(4))
    assert not np.array_equal(a, ls.substream(1, 1, 2).standard_normal(4))


# ---------------------------------------------------------------- forward


@settings(max_examples=20, deadline=None)
@given(st.integers(5, 200), st.floats(0.01, 10.0), st.floats(-1.0, 1.0), st.integers(0, 2**31))
def test_input_pair_is_exact(n, q0, c0, seed):
    x = ls.make_input_pair(n, q0, c0, np.random.default_rng(seed))
    q1, q2 = x[:, 0] @ x[:, 0] / n, x[:, 1] @ x[:, 1] / n
    assert q1 == pytest.approx(q0, rel=1e-12) and q2 == pytest.approx(q0, rel=1e-12)
    assert x[:, 0] @ x[:, 1] / n / q0 == pytest.approx(c0, abs=1e-12)


def test_input_pair_rejects_bad_correlation():
    with pytest.raises(DomainError):
        ls.make_input_pair(10, 1.0, 1.2, np.random.default_rng(0))


def test_identical_inputs_stay_identical():
    cfg = NetworkConfig(gamma=0.25, sigma_alpha2=8.0, sigma_b2=0.36, depth=15, width=300)
    pair = ls.make_input_pair(300, 1.0, 1.0, np.random.default_rng(0))
    run = ls.forward_lengths(cfg, pair, seed=3)
    assert np.all(run.correlation.values == 1.0)
    assert np.all(run.one_minus_c == 0.0)


def test_forward_is_deterministic():
    cfg = NetworkConfig(gamma=0.5, sigma_alpha2=2.0, sigma_b2=0.1, depth=6, width=200)
    pair = ls.make_input_pair(200, 0.7, 0.3, ls.substream(9, 0, 0))
    a = ls.forward_lengths(cfg, pair, seed=9, trial=2)
    b = ls.forward_lengths(cfg, pair, seed=9, trial=2)
    assert np.array_equal(a.correlation.values, b.correlation.values)
    assert np.array_equal(a.lengths[1].values, b.lengths[1].values)
    c = ls.forward_lengths(cfg, pair, seed=9, trial=3)
    assert not np.array_equal(a.correlation.values, c.correlation.values)


def test_forward_matches_network_object():
    cfg = NetworkConfig(gamma=0.5, sigma_alpha2=2.0, sigma_b2=0.1, depth=4, width=100)
    h0 = ls.make_input(100, 0.8, np.random.default_rng(1))
    run = ls.forward_lengths(cfg, h0, seed=4, trial=1)
    hs = ls.LowRankNetwork.sample(cfg, seed=4, trial=1).forward(h0)
    assert np.allclose(run.lengths[0].values, [h @ h / 100 for h in hs], rtol=1e-13)


def test_forward_rejects_bad_shape():
    cfg = NetworkConfig(width=50)
    with pytest.raises(DomainError):
        ls.forward_lengths(cfg, np.ones(49))
    with pytest.raises(DomainError):
        ls.forward_lengths(cfg, np.ones((50, 3)))


def test_pythagoras_in_frame_coordinates():
    cfg = NetworkConfig(gamma=0.3, sigma_alpha2=1.5, sigma_b2=0.2, width=500)
    layer = ls.sample_layer(cfg, np.random.default_rng(8))
    z = np.tanh(np.random.default_rng(9).standard_normal(500))
    coords = layer.weights.coeffs @ z + layer.bias_coeffs
    h = layer.preactivation(z)
    assert h @ h == pytest.approx(coords @ coords, rel=1e-8)


def test_identity_lengths_scale_geometrically():
    n, depth, trials, q0 = 1000, 4, 10, 1.0
    cfg = NetworkConfig(gamma=0.5, sigma_alpha2=1.6, activation="identity", depth=depth, width=n)
    h0 = ls.make_input(n, q0, np.random.default_rng(0))
    q = np.array([ls.forward_lengths(cfg, h0, seed=0, trial=t).lengths[0].values for t in range(trials)])
    for l in range(1, depth + 1):
        ratio = q[:, l] / q0
        assert abs(ratio.mean() - 0.8**l) <= 3 * sem(ratio)


def test_length_means_follow_iterated_map():
    n, depth, trials = 500, 8, 20
    cfg = NetworkConfig.from_effective(0.25, 2.0, 0.1, activation="tanh", depth=depth, width=n)
    theory = mf.length_trajectory(cfg, 1.0, depth).values
    q = np.array([
        ls.forward_lengths(cfg, ls.make_input(n, 1.0, ls.substream(0, t, 0)), seed=0, trial=t).lengths[0].values
        for t in range(trials)
    ])
    for l in range(1, depth + 1):
        assert abs(q[:, l].mean() - theory[l]) <= 3 * sem(q[:, l])


def test_hidden_preactivations_look_gaussian():
    # smoke test: one realisation, 1% level
    n = 2000
    cfg = NetworkConfig.from_effective(0.25, 1.5, 0.05, activation="tanh", depth=3, width=n)
    net = ls.LowRankNetwork.sample(cfg, seed=1, bias_mode="per_direction")
    h = net.forward(ls.make_input(n, 1.0, np.random.default_rng(0)))[3]
    assert stats.normaltest(h).pvalue > 0.01


def test_overflow_reports_layer():
    cfg = NetworkConfig(gamma=1.0, sigma_alpha2=1e120, activation="identity", depth=10, width=30)
    with pytest.raises(NumericalOverflow) as info:
        ls.forward_lengths(cfg, np.ones(30))
    assert 1 <= info.value.layer <= 10


def test_jacobian_overflow_reports_layer():
    cfg = NetworkConfig(gamma=1.0, sigma_alpha2=1e120, activation="identity", depth=10, width=30)
    with pytest.raises(NumericalOverflow) as info:
        ls.jacobian_spectrum(cfg, q0=1.0)
    assert info.value.layer >= 1


# -------------------------------------------------------------- jacobian


def test_single_layer_orthogonal_identity_spectrum():
    n, gamma, sa2 = 200, 0.3, 1.7
    cfg = NetworkConfig(gamma=gamma, sigma_alpha2=sa2, activation="identity", ensemble="orthogonal", depth=1, width=n)
    rec, mom = ls.jacobian_spectrum(cfg, q0=0.5)
    sq = np.sort(rec.values[0] ** 2)[::-1]
    r = cfg.rank
    assert np.max(np.abs(sq[:r] - sa2)) <= 1e-10
    assert np.max(sq[r:]) <= 1e-10
    assert mom.m1 == pytest.approx(r * sa2 / n, rel=1e-10)


def test_full_rank_orthogonal_is_isometric_at_depth():
    cfg = NetworkConfig(gamma=1.0, sigma_alpha2=1.0, activation="identity", ensemble="orthogonal", depth=10, width=150)
    _, mom = ls.jacobian_spectrum(cfg, q0=0.5)
    assert abs(mom.variance) < 1e-6
    assert mom.m1 == pytest.approx(1.0, abs=1e-10)


def test_rescaling_reproduces_unscaled_moments():
    # off criticality the running product is rescaled; moments must not notice
    cfg = NetworkConfig(gamma=0.5, sigma_alpha2=5.0, activation="identity", depth=20, width=60)
    _, mom = ls.jacobian_spectrum(cfg, q0=0.5)
    J = np.eye(60)
    for l in range(1, 21):
        J = ls.sample_layer(cfg, ls.substream(0, 0, l)).weights.matrix @ J
    lam = np.linalg.eigvalsh(J @ J.T)
    assert mom.m1 == pytest.approx(lam.mean(), rel=1e-8)
    assert mom.m2 == pytest.approx((lam * lam).mean(), rel=1e-8)


def test_numerical_rank_bounded_by_rank():
    cfg = NetworkConfig.from_effective(0.2, 1.0, 0.05, activation="tanh", depth=5, width=150)
    rec, _ = ls.jacobian_spectrum(cfg, record_layers=[1, 3, 5])
    for sv in rec.values:
        assert np.sum(sv > 1e-10 * sv.max()) <= cfg.rank


def test_record_layers_validation():
    cfg = NetworkConfig(depth=3, width=20)
    with pytest.raises(DomainError):
        ls.jacobian_spectrum(cfg, record_layers=[0, 2])
    rec, _ = ls.jacobian_spectrum(cfg, record_layers=[1, 3])
    assert list(rec.layers) == [1, 3]


def test_critical_m1_within_standard_errors():
    n, trials = 500, 5
    cfg = NetworkConfig(gamma=0.5, sigma_alpha2=2.0, activation="identity", depth=10, width=n)
    m1 = [ls.jacobian_spectrum(cfg, trial=t, q0=0.5)[1].m1 for t in range(trials)]
    assert abs(np.mean(m1) - 1.0) <= 3 * sem(m1)


def test_mean_sq_singular_identity():
    n, trials = 400, 10
    cfg = NetworkConfig(gamma=0.25, sigma_alpha2=2.0, activation="identity", width=n)
    vals = [ls.mean_sq_singular_per_layer(cfg, trial=t, q0=1.0) for t in range(trials)]
    assert abs(np.mean(vals) - 0.5) <= 3 * sem(vals)


def test_mean_sq_singular_orthogonal_is_exact():
    n = 300
    cfg = NetworkConfig(gamma=0.3, sigma_alpha2=2.0, activation="identity", ensemble="orthogonal", width=n)
    assert ls.mean_sq_singular_per_layer(cfg, q0=1.0) == pytest.approx(cfg.rank * 2.0 / n, rel=1e-12)


def test_mean_sq_singular_tanh_matches_chi():
    # per-direction biases: with one shared bias scalar per layer q^1 carries
    # an O(1) fluctuation and E phi'^2 picks up a Jensen bias
    n, trials = 1000, 8
    cfg = NetworkConfig.from_effective(0.25, 1.8, 0.1, activation="tanh", width=n)
    q = mf.solve_q_star(cfg).q_star
    vals = [ls.mean_sq_singular_per_layer(cfg, trial=t, q0=q, bias_mode="per_direction") for t in range(trials)]
    assert abs(np.mean(vals) - mf.chi(cfg, q)) <= 3 * sem(vals)


# -------------------------------------------------------------- gradients


def _fd_gradient(net, h0, layer, i, j, step=1e-5):
    coeffs = net.layers[layer].weights.coeffs
    keep = coeffs[i, j]
    coeffs[i, j] = keep + step
    up = net.loss(h0)
    coeffs[i, j] = keep - step
    down = net.loss(h0)
    coeffs[i, j] = keep
    return (up - down) / (2 * step)


@pytest.mark.parametrize("activation", ["tanh", "erf", "identity"])
def test_gradients_match_finite_differences(activation):
    n = 40
    cfg = NetworkConfig(gamma=0.5, sigma_alpha2=1.5, sigma_b2=0.1, activation=activation, depth=4, width=n)
    net = ls.LowRankNetwork.sample(cfg, seed=2)
    h0 = ls.make_input(n, 1.0, np.random.default_rng(3))
    grads = net.alpha_gradients(h0)
    pick = np.random.default_rng(4)
    for l in range(cfg.depth):
        for _ in range(5):
            i, j = pick.integers(cfg.rank), pick.integers(n)
            fd = _fd_gradient(net, h0, l, i, j)
            assert abs(grads[l][i, j] - fd) <= 1e-5 * max(abs(fd), 1e-8)


def test_depth_one_identity_gradient():
    n = 30
    cfg = NetworkConfig(gamma=0.4, sigma_alpha2=1.0, sigma_b2=0.3, activation="identity", depth=1, width=n)
    net = ls.LowRankNetwork.sample(cfg, seed=5)
    h0 = ls.make_input(n, 1.0, np.random.default_rng(6))
    layer = net.layers[0]
    # E = |A h0 + beta|^2 / 2 since C has orthonormal columns
    u = layer.weights.coeffs @ h0 + layer.bias_coeffs
    assert np.max(np.abs(net.alpha_gradients(h0)[0] - np.outer(u, h0))) <= 1e-10


def test_gradient_norms_match_full_gradients():
    n = 50
    cfg = NetworkConfig(gamma=0.5, sigma_alpha2=1.5, sigma_b2=0.1, depth=5, width=n)
    rec = ls.backprop_gradient_norms(cfg, seed=1, trial=2, q0=0.9)
    net = ls.LowRankNetwork.sample(cfg, seed=1, trial=2)
    h0 = ls.make_input(n, 0.9, ls.substream(1, 2, 0))
    full = [float(np.sum(g * g)) for g in net.alpha_gradients(h0)]
    assert np.allclose(rec.values, full, rtol=1e-10)
    assert list(rec.layers) == [1, 2, 3, 4, 5]


def test_fit_log_slope_exact():
    layers = np.arange(1, 11)
    assert ls.fit_log_slope(layers, 3.0 * np.exp(-0.4 * layers)) == pytest.approx(-0.4, abs=1e-12)


# ----------------------------------------------------- fixed-point oracles


@pytest.mark.slow
def test_full_rank_q_star_matches_simulation():
    # gamma = 1 with per-direction biases is the ordinary full-rank network
    n = 2000
    cfg = NetworkConfig(gamma=1.0, sigma_alpha2=1.3, sigma_b2=0.1, activation="tanh", depth=8, width=n)
    q_star = mf.solve_q_star(cfg).q_star
    run = ls.forward_lengths(cfg, ls.make_input(n, q_star, np.random.default_rng(0)), bias_mode="per_direction")
    assert abs(np.mean(run.lengths[0].values[3:]) - q_star) <= 0.02 * q_star


def test_chaotic_c_star_within_standard_errors():
    n, trials, depth = 1000, 5, 20
    cfg = NetworkConfig.from_effective(0.25, 3.0, 0.0225, activation="tanh", depth=depth, width=n)
    q = mf.solve_q_star(cfg).q_star
    c_star = mf.solve_c_star(cfg, q)
    assert mf.chi(cfg, q) > 1
    means = []
    for t in range(trials):
        pair = ls.make_input_pair(n, q, c_star, ls.substream(0, t, 0))
        means.append(ls.forward_lengths(cfg, pair, seed=0, trial=t).correlation.values[5:].mean())
    assert abs(np.mean(means) - c_star) <= 3 * sem(means)


@pytest.mark.slow
def test_chaotic_c_star_long_run_full_rank():
    n, trials, depth = 1000, 5, 20
    cfg = NetworkConfig(gamma=1.0, sigma_alpha2=3.0, sigma_b2=0.0225, activation="tanh", depth=depth, width=n)
    report = mf.fixed_point(cfg)
    means = []
    for t in range(trials):
        pair = ls.make_input_pair(n, report.q_star, report.c_star, ls.substream(0, t, 0))
        run = ls.forward_lengths(cfg, pair, seed=0, trial=t, bias_mode="per_direction")
        means.append(run.correlation.values[5:].mean())
    assert abs(np.mean(means) - report.c_star) <= 0.02


def test_ordered_correlation_decay_rate():
    cfg = NetworkConfig.from_effective(0.25, 1.2, 0.05, activation="tanh", depth=40, width=600)
    q = mf.solve_q_star(cfg).q_star
    rate = ls.correlation_decay_rate(cfg, 1.0, q, seed=0)
    assert math.isfinite(rate)
    assert rate == pytest.approx(-math.log(mf.chi(cfg, q)), rel=0.25)


def test_decay_rate_nan_without_usable_layers():
    cfg = NetworkConfig.from_effective(0.5, 1.0, 0.0, activation="tanh", depth=3, width=50)
    assert math.isnan(ls.correlation_decay_rate(cfg, 1.0, 0.5, c0=1.0))


# ------------------------------------------------------------ trial runner


def test_run_trials_order_and_threads():
    fn = lambda t: (t, float(ls.substream(3, t, 0).standard_normal()))
    serial = ls.run_trials(fn, 7, threads=1)
    assert serial == ls.run_trials(fn, 7, threads=4)
    assert [t for t, _ in serial] == list(range(7))


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv(ls.THREADS_ENV, "3")
    assert ls.thread_count() == 3
    monkeypatch.setenv(ls.THREADS_ENV, "0")
    assert ls.thread_count() >= 1
    monkeypatch.setenv(ls.THREADS_ENV, "-1")
    with pytest.raises(DomainError):
        ls.thread_count()
    monkeypatch.setenv(ls.THREADS_ENV, "many")
    with pytest.raises(DomainError):
        ls.thread_count()


def test_trajectory_record_invariants():
    with pytest.raises(ValueError):
        TrajectoryRecord("length", [0, 2, 1], [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        TrajectoryRecord("length", [0, 1], [1.0])
    rec = TrajectoryRecord("length", [0, 2], [1.0, 2.0])
    assert rec.at(2) == 2.0
    with pytest.raises(KeyError):
        rec.at(1)

import itertools
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from maglab import assignment, dynamics as dyn, stochastic as st
from maglab.geometry import AnchorSet, PhaseState, cost_matrix, permute_anchors

from conftest import random_instance

LINE = AnchorSet([[0.0], [1.0]])


def random_cloud_problem(seed, n, d):
    rng = np.random.default_rng(seed)
    A = AnchorSet(rng.uniform(-1, 1, (n, d)))
    sigma0 = rng.permutation(n)
    return A, permute_anchors(A, sigma0), rng.uniform(-1, 1, (n, d)), sigma0


# -- cloud sampling ----------------------------------------------------------

def test_zero_noise_cloud_is_constant():
    spec = st.CloudSpec(LINE, [1, 0], 0.0, 1.0, n_paths=5, n_steps=10)
    paths = st.sample_cloud(spec)
    assert np.all(paths == spec.s0)


def test_cloud_moments():
    eps, t_star, n = 0.3, 2.0, 100_000
    spec = st.CloudSpec(LINE, [0, 1], eps, t_star, n_paths=n, n_steps=4, seed=11)
    end = st.sample_cloud(spec, workers=4)[:, -1]
    band = 4 * eps * math.sqrt(t_star / n)
    assert np.all(np.abs(end.mean(axis=0) - spec.s0) <= band)
    var = end.var(axis=0, ddof=1)
    assert np.all(np.abs(var / (eps**2 * t_star) - 1) <= 0.05)


def test_cloud_is_worker_independent():
    spec = st.CloudSpec(LINE, [0, 1], 0.1, 1.0, n_paths=3000, n_steps=8, seed=5)
    one = st.sample_cloud(spec, workers=1)
    many = st.sample_cloud(spec, workers=3)
    assert one.tobytes() == many.tobytes()
    assert st.sample_cloud(spec).tobytes() == one.tobytes()
    other = st.sample_cloud(st.CloudSpec(LINE, [0, 1], 0.1, 1.0, n_paths=3000, n_steps=8, seed=6))
    assert not np.array_equal(one, other)


def test_cloud_spec_validation():
    with pytest.raises(ValueError):
        st.CloudSpec(LINE, [0, 1], 0.1, 0.0)
    with pytest.raises(ValueError):
        st.CloudSpec(LINE, [0, 0], 0.1, 1.0)
    with pytest.raises(ValueError):
        st.block_rng(-1, 1, 0)


# -- permuted density --------------------------------------------------------

def test_density_standard_gaussian():
    A = AnchorSet([[0.0]])
    res = st.permuted_density([[0.0]], [[0.0]], 1.0, A)
    assert res.density == pytest.approx((2 * math.pi) ** -0.5, rel=1e-15)


def test_density_swap_match():
    for v in (1e-2, 1e-4, 1e-8):
        res = st.permuted_density([[1.0], [0.0]], [[0.0], [1.0]], v, LINE)
        # swap term is exp(0); identity term is exp(-1/v), both divided by 2!
        expected = math.log1p(math.exp(-1.0 / v)) - math.log(2) - math.log(2 * math.pi * v)
        assert res.log_density == pytest.approx(expected, rel=1e-14)


def direct_log_density(y, s0, v):
    n, d = y.shape
    terms = []
    for sigma in itertools.permutations(range(n)):
        r = y[list(sigma)] - s0
        terms.append(-float(np.sum(r * r)) / (2 * v))
    return float(logsumexp(terms)) - math.lgamma(n + 1) - 0.5 * n * d * math.log(2 * math.pi * v)


@pytest.mark.parametrize("seed", range(5))
def test_density_matches_enumeration(seed):
    A, s0, y, _ = random_cloud_problem(seed, 5, 2)
    for v in (1e-3, 0.1, 2.0):
        res = st.permuted_density(y, s0, v, A)
        assert res.n_terms == 120 and res.dropped_mass_bound == 0.0
        assert res.log_density == pytest.approx(direct_log_density(y, s0, v), rel=1e-12)


def test_density_normalisation_monte_carlo():
    # importance sampling from a broad Gaussian around the anchor centroid
    rng = np.random.default_rng(99)
    n, d, v, m = 3, 1, 0.05, 1_000_000
    A = AnchorSet(rng.uniform(-1, 1, (n, d)))
    s0 = A.points
    centre, wide = s0.mean(axis=0), 1.0
    y = centre + wide * rng.standard_normal((m, n, d))
    log_q = -0.5 * np.sum((y - centre) ** 2, axis=(1, 2)) / wide**2 - 0.5 * n * d * math.log(2 * math.pi * wide**2)
    terms = np.stack(
        [-np.sum((y[:, list(s)] - s0) ** 2, axis=(1, 2)) / (2 * v) for s in itertools.permutations(range(n))]
    )
    log_p = logsumexp(terms, axis=0) - math.lgamma(n + 1) - 0.5 * n * d * math.log(2 * math.pi * v)
    for k in range(200):
        assert st.permuted_density(y[k], s0, v, A).log_density == pytest.approx(log_p[k], rel=1e-12, abs=1e-12)
    assert np.mean(np.exp(log_p - log_q)) == pytest.approx(1.0, abs=0.01)


def test_density_pruned_large_n():
    A, s0, y, _ = random_cloud_problem(3, 10, 2)
    v = 0.02
    pruned = st.permuted_density(y, s0, v, A)
    full = st.permuted_density(y, s0, v, A, prune=False)
    assert pruned.n_terms < full.n_terms == math.factorial(10)
    assert 0 < pruned.dropped_mass_bound <= math.factorial(10) * math.exp(-st.PRUNE_EXPONENT)
    assert pruned.log_density == pytest.approx(full.log_density, rel=1e-12)


def test_density_errors():
    A = AnchorSet(np.arange(13.0)[:, None])
    with pytest.raises(ValueError):
        st.permuted_density(A.points, A.points, 1.0, A, prune=False)
    with pytest.raises(ValueError):
        st.permuted_density([[0.0]], [[0.0]], 0.0, AnchorSet([[0.0]]))


# -- rate function and the first limit ---------------------------------------

def test_rate_function_examples():
    s0 = [[0.0], [1.0]]
    assert st.rate_function(s0, s0, 1.0, LINE) == 0.0
    assert st.rate_function([[1.0], [0.0]], s0, 1.0, LINE) == 0.0
    assert st.rate_function([[2.0], [3.0]], s0, 1.0, LINE) == pytest.approx(4.0)


@pytest.mark.parametrize("seed", range(10))
def test_rate_function_matches_enumeration(seed):
    A, s0, y, _ = random_cloud_problem(seed, 6, 2)
    costs = [float(np.sum((y[list(s)] - s0) ** 2)) for s in itertools.permutations(range(6))]
    assert st.rate_function(y, s0, 1.5, A) == pytest.approx(min(costs) / 3.0, rel=1e-12)


EPS_GRID = 10.0 ** -np.arange(1, 7)


def test_rate_table_single_particle():
    A = AnchorSet([[0.3, -0.2]])
    t_star = 1.7
    table = st.verify_rate_limit([[1.0, 2.0]], A.points, A, t_star, EPS_GRID)
    exact = EPS_GRID * (2 / 2) * np.log(2 * np.pi * EPS_GRID * t_star)
    np.testing.assert_allclose(table.gap, exact, rtol=1e-9, atol=1e-15)
    assert np.all(table.rate_limit == table.rate_limit[0])
    assert table.ok


def test_rate_table_at_start_point():
    A, s0, _, _ = random_cloud_problem(1, 4, 2)
    table = st.verify_rate_limit(s0, s0, A, 1.0, EPS_GRID)
    assert table.rate_limit[0] == 0.0
    assert abs(table.minus_eps_log_p[-1]) < abs(table.minus_eps_log_p[0])
    # once the other relabellings are exponentially suppressed only the Gaussian correction is left
    np.testing.assert_allclose(table.gap[1:], table.correction[1:], rtol=1e-9)


def test_rate_tables_converge():
    rng = np.random.default_rng(8)
    for _ in range(20):
        n, d = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        A = AnchorSet(rng.uniform(-1, 1, (n, d)))
        s0 = permute_anchors(A, rng.permutation(n))
        table = st.verify_rate_limit(rng.uniform(-1, 1, (n, d)), s0, A, float(rng.uniform(0.5, 2)), EPS_GRID)
        assert table.ok, table.checks
        np.testing.assert_array_equal(table.gap, table.minus_eps_log_p - table.rate_limit)


def test_rate_table_rejects_bad_grid():
    A = AnchorSet([[0.0]])
    with pytest.raises(ValueError):
        st.verify_rate_limit([[1.0]], [[0.0]], A, 1.0, [1e-3, 1e-2])


# -- geodesic and the projection property ------------------------------------

def test_geodesic_examples():
    A = AnchorSet([[0.0]])
    path, sigma = st.geodesic([[2.0]], [[0.0]], A, 2.0, n_steps=20)
    np.testing.assert_allclose(path.points[:, 0, 0], path.theta, atol=1e-15)
    same, _ = st.geodesic(LINE.points, LINE.points, LINE, 1.0)
    assert np.all(same.points == LINE.points)


@pytest.mark.parametrize("seed", range(20))
def test_geodesic_constant_velocity(seed):
    rng = np.random.default_rng(seed)
    A = AnchorSet(rng.uniform(-1, 1, (5, 2)))
    y = rng.uniform(-3, 3, (5, 2))
    t_star = float(rng.uniform(0.5, 2))
    path, sigma = st.geodesic(y, A.points, A, t_star)
    dt = np.diff(path.theta)
    v = np.diff(path.points, axis=0) / dt[:, None, None]
    # affine in t up to the rounding of the stored positions
    floor = 4 * np.finfo(float).eps * np.max(np.abs(path.points)) / dt.min()
    assert np.max(np.abs(v - (y[sigma] - A.points) / t_star)) <= floor
    np.testing.assert_array_equal(path.points[0], A.points)
    np.testing.assert_allclose(path.points[-1], y[sigma], atol=1e-15)


def test_geodesic_projection_suite():
    rng = np.random.default_rng(2024)
    for _ in range(500):
        A = AnchorSet(rng.uniform(-1, 1, (6, 2)))
        y = rng.uniform(-2, 2, (6, 2))
        report = st.check_geodesic_projection(y, rng.permutation(6), A, float(rng.uniform(0.2, 3)), grid=50)
        assert report.ok, report
        assert report.min_kappa >= -1e-12


def test_geodesic_projection_endpoints():
    A, _, y, sigma0 = random_cloud_problem(4, 4, 2)
    report = st.check_geodesic_projection(y, sigma0, A, 1.0, grid=2)
    assert report.ok and report.min_kappa == 0.0


def test_projection_fails_off_geodesic():
    # a path that is not the optimal line leaves the cell of s0
    A = LINE
    report = st.check_geodesic_projection([[5.0], [-4.0]], [0, 1], A, 1.0, grid=50)
    assert report.ok
    s0 = A.points
    x = s0 + 3 * (np.array([[1.0], [-1.0]]))
    assert assignment.solve(cost_matrix(x, A)).sigma.tolist() != [0, 1]


# -- conditioned bridges -----------------------------------------------------

def test_swap_posterior_weight():
    spec = st.CloudSpec(LINE, [0, 1], 0.05, 1.0, n_steps=10)
    stats = st.sample_conditioned_bridges(spec, [[1.0], [0.0]], 100)
    assert stats.sigma_star.tolist() == [1, 0]
    # two terms, exponents 0 and -1 / (2 eps^2 t*)
    assert 1 - stats.mass_on_star == pytest.approx(math.exp(-200.0), rel=1e-9)


def test_bridge_collapse_on_geodesic():
    A, s0, y, sigma0 = random_cloud_problem(6, 4, 2)
    eps, t_star = 1e-3, 1.3
    spec = st.CloudSpec(A, sigma0, eps, t_star, n_steps=100, seed=17)
    stats = st.sample_conditioned_bridges(spec, y, 10_000, workers=2)
    assert stats.mass_on_star >= 1 - 1e-6
    assert stats.sup_distance <= 3 * eps * math.sqrt(t_star)
    assert stats.counts.sum() == 10_000
    again = st.sample_conditioned_bridges(spec, y, 10_000, workers=1)
    assert again.mean_path.tobytes() == stats.mean_path.tobytes()


def test_bridge_at_start_point():
    A = AnchorSet([[0.0], [1.0], [2.5]])
    sigma0 = [2, 0, 1]
    s0 = permute_anchors(A, sigma0)
    eps, n = 0.05, 4000
    spec = st.CloudSpec(A, sigma0, eps, 1.0, n_steps=20, seed=1)
    stats = st.sample_conditioned_bridges(spec, s0, n)
    # bridge variance peaks at t*/4 in the middle of the interval
    assert np.max(np.abs(stats.mean_path - s0)) <= 4 * eps * 0.5 / math.sqrt(n) * 1.5


# -- noisy gradient flow -----------------------------------------------------

def test_noiseless_flow_is_euler_flow():
    A, x = random_instance(3, 5, 2)
    noisy = st.noisy_gradient_flow(x, A, 0.0, 1e-2, 80, seed=4)
    flow = dyn.integrate_gradient_flow(x, A, 1e-2, 80, scheme="euler_gradient_flow")
    assert noisy.points.tobytes() == flow.position.tobytes()


def test_noiseless_flow_fixed_point():
    A, _ = random_instance(1, 4, 3)
    s = permute_anchors(A, [3, 1, 0, 2])
    out = st.noisy_gradient_flow(s, A, 0.0, 1e-2, 30)
    assert np.all(out.points == s)


def test_noisy_flow_mean():
    A = AnchorSet([[-1.0, 0.0], [1.0, 0.5], [0.0, -1.0]])
    x0 = A.points + np.array([[0.05, 0.02], [-0.03, 0.04], [0.02, -0.05]])
    eta, h, steps, m = 0.02, 1e-2, 10, 10_000
    ends = np.stack([st.noisy_gradient_flow(x0, A, eta, h, steps, seed=7, path_index=i).points[-1] for i in range(m)])
    reference = dyn.integrate_gradient_flow(x0, A, h, steps, scheme="euler_gradient_flow").position[-1]
    band = 4 * eta * math.sqrt(h * steps / m) * math.sqrt(A.n * A.d)
    assert np.all(np.abs(ends.mean(axis=0) - reference) <= band)


def test_noisy_flow_reproducible():
    A, x = random_instance(5, 3, 2)
    a = st.noisy_gradient_flow(x, A, 0.1, 1e-2, 20, seed=3, path_index=2)
    b = st.noisy_gradient_flow(x, A, 0.1, 1e-2, 20, seed=3, path_index=2)
    c = st.noisy_gradient_flow(x, A, 0.1, 1e-2, 20, seed=3, path_index=3)
    assert a.points.tobytes() == b.points.tobytes()
    assert not np.array_equal(a.points, c.points)
    with pytest.raises(ValueError):
        st.noisy_gradient_flow(x, A, 0.1, 0.0, 20)


# -- actions -----------------------------------------------------------------

def test_action_constant_on_set():
    A, _ = random_instance(2, 4, 2)
    s = permute_anchors(A, [1, 0, 3, 2])
    vals = st.action(st.PathSample(np.linspace(0, 2, 21), np.repeat(s[None], 21, axis=0)), A)
    assert vals.fw == 0.0 and vals.classical == 0.0 and vals.discrepancy == 0.0


def test_action_constant_generic():
    A, y = random_instance(4, 4, 2)
    span = 1.5
    from maglab import potential

    phi = potential.phi(y, A)
    vals = st.action(st.PathSample(np.linspace(0, span, 31), np.repeat(y[None], 31, axis=0)), A)
    assert vals.fw == pytest.approx(span * phi, rel=1e-12)
    assert vals.classical == pytest.approx(span * phi, rel=1e-12)
    assert abs(vals.discrepancy) <= 1e-12 * (1 + phi)


FLOW_SEEDS = [2, 9, 10]  # no assignment change for any step size used below


def switch_free_flow(seed, h, span=0.5):
    A, x = random_instance(seed, 3, 2)
    tr = dyn.integrate_gradient_flow(x, A, h, int(round(span / h)))
    return A, tr


def test_flow_paths_have_small_fw_action():
    values = []
    for h in (1e-2, 5e-3, 2.5e-3):
        A, tr = switch_free_flow(FLOW_SEEDS[0], h)
        assert np.all(tr.sigma == tr.sigma[0])
        values.append(st.action(st.PathSample(tr.theta, tr.position), A).fw)
    assert values[0] < 1e-8
    assert all(b <= a / 3.5 for a, b in zip(values, values[1:]))


def test_action_discrepancy_order():
    for seed in FLOW_SEEDS:
        disc = []
        for h in (1e-2, 5e-3, 2.5e-3, 1.25e-3):
            A, tr = switch_free_flow(seed, h)
            assert np.all(tr.sigma == tr.sigma[0])
            disc.append(abs(st.action(st.PathSample(tr.theta, tr.position), A).discrepancy))
        orders = np.log2(np.array(disc[:-1]) / np.array(disc[1:]))
        assert np.all(orders >= 1.9), orders


def test_action_rejects_bad_paths():
    A = AnchorSet([[0.0]])
    with pytest.raises(ValueError):
        st.action(st.PathSample([0.0, 1.0], [[[0.0]], [[1.0]]]), A)
    with pytest.raises(ValueError):
        st.action(st.PathSample([0.0, 0.1, 1.0], [[[0.0]], [[0.5]], [[1.0]]]), A)


# -- action minimisation -----------------------------------------------------

def test_minimize_equilibrium():
    A, _ = random_instance(1, 3, 2)
    s = permute_anchors(A, [2, 0, 1])
    path, rep = st.minimize_action(st.ActionProblem(0.0, 1.0, s, s, M=16), A)
    assert rep.converged and rep.residual == 0.0 and rep.action == 0.0
    assert np.all(path.points == s)


def test_minimize_cosh():
    A = AnchorSet([[0.0]])
    path, rep = st.minimize_action(st.ActionProblem(0.0, 1.0, [[1.0]], [[math.cosh(1.0)]], M=256), A)
    assert rep.converged and rep.degenerate_nodes == 0
    assert np.max(np.abs(path.points[:, 0, 0] - np.cosh(path.theta))) <= 1e-4


def switch_free_shot(seed, M=256, span=0.5):
    rng = np.random.default_rng(seed)
    A = AnchorSet(rng.uniform(-1, 1, (4, 2)))
    state = PhaseState(rng.uniform(-1, 1, (4, 2)), 0.3 * rng.normal(size=(4, 2)))
    h = span / (M + 1)
    tr = dyn.integrate_mag(state, A, h, M + 1)
    return A, state, tr, h


@pytest.mark.parametrize("seed", [3, 4, 6, 9])
def test_minimizer_matches_shooting(seed):
    A, state, tr, h = switch_free_shot(seed)
    assert np.all(tr.sigma == tr.sigma[0])
    problem = st.ActionProblem(0.0, tr.theta[-1], state.position, tr.position[-1], M=256)
    path, rep = st.minimize_action(problem, A)
    assert rep.converged
    assert rep.residual <= 1e-6 * (1 + A.radius)
    scale = np.max(np.abs(tr.position))
    # same grid: the discrete Euler-Lagrange equation is the Verlet recurrence
    assert np.max(np.abs(path.points - tr.position)) <= 1e-9 * scale
    exact = dyn.integrate_mag_piecewise_exact(state, A, tr.theta[-1])
    assert np.max(np.abs(exact.position[-1] - tr.position[-1])) <= 5 * h**2 * scale


@pytest.mark.parametrize("seed", [3, 4])
def test_shooting_trajectory_is_stationary(seed):
    A, _, tr, h = switch_free_shot(seed)
    rng = np.random.default_rng(seed)
    base = st.action(st.PathSample(tr.theta, tr.position), A).classical
    delta = 1e-4
    for k in rng.integers(1, tr.n_samples - 1, size=5):
        d = rng.normal(size=tr.position.shape[1:])
        d /= np.linalg.norm(d)
        up, dn = tr.position.copy(), tr.position.copy()
        up[k] += delta * d
        dn[k] -= delta * d
        s_up = st.action(st.PathSample(tr.theta, up), A).classical
        s_dn = st.action(st.PathSample(tr.theta, dn), A).classical
        first = (s_up - s_dn) / (2 * delta)
        second = (s_up + s_dn - 2 * base) / delta**2
        assert abs(first) <= 1e-6
        assert second > 0
        assert s_up > base and s_dn > base


def test_minimize_reports_failure():
    A = AnchorSet([[0.0]])
    _, rep = st.minimize_action(st.ActionProblem(0.0, 1.0, [[1.0]], [[3.0]], M=64), A, max_iters=0)
    assert not rep.converged
    with pytest.raises(ValueError):
        st.minimize_action(st.ActionProblem(0.0, 1.0, [[1.0]], [[3.0]], M=4), A)
    with pytest.raises(ValueError):
        st.ActionProblem(1.0, 1.0, [[1.0]], [[3.0]])

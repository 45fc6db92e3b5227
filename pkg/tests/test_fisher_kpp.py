import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from dlrenkf.errors import NegativeDiffusion
from dlrenkf.models.fisher_kpp import (
    DT,
    REACTION,
    T_FINAL,
    THETA_TRUE,
    FisherKPP,
    KlField,
    PolarGrid,
    build_kl_field,
    initial_condition,
    nu,
    partial_observation_matrix,
)

seeds = st.integers(0, 2**32 - 1)


@pytest.fixture(scope="module")
def model():
    return FisherKPP()


def theta_in_cube(rng, model, n=1, frac=1.0):
    b = model.field.hypercube_bound * frac
    return rng.uniform(-b, b, size=(model.n_params, n))


# -- grid and KL field -------------------------------------------------------------

def test_default_grid_dimension():
    g = PolarGrid()
    assert g.dim == 540
    assert np.all(g.contains(g.coords()))


def test_quadrature_weights_sum_to_area():
    g = PolarGrid(7, 9)
    assert g.cell_areas().sum() == pytest.approx(np.pi / 4 * (1.5**2 - 1.0), rel=1e-14)


def test_kl_scaled_identity():
    f = build_kl_field(PolarGrid(4, 5), a=0.0, c=0.1, n_theta=6)
    np.testing.assert_allclose(f.eigenvalues, 0.1, rtol=1e-12)


def test_kl_nugget_dominant_limit():
    g = PolarGrid(4, 5)
    ratios = [f.eigenvalues[0] / f.eigenvalues[-1]
              for f in (build_kl_field(g, a=1.0, c=c) for c in (1.0, 10.0, 1e3))]
    assert ratios[0] > ratios[1] > ratios[2]
    assert ratios[2] == pytest.approx(1.0, abs=0.1)


def test_kl_three_collinear_nodes():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    C = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            C[i, j] = np.exp(-abs(pts[i, 0] - pts[j, 0]) / 2.0)
    oracle = np.sort(np.linalg.eigvalsh(C))[::-1]
    f = build_kl_field(pts, a=1.0, b=1.0, c=0.0, n_theta=3)
    np.testing.assert_allclose(f.eigenvalues, oracle, atol=1e-10)
    np.testing.assert_allclose(C @ f.eigenvectors, f.eigenvectors * f.eigenvalues, atol=1e-10)


def test_kl_conventions(model):
    f = model.field
    assert np.all(np.diff(f.eigenvalues) <= 0)
    np.testing.assert_allclose(np.linalg.norm(f.eigenvectors, axis=0), 1.0, atol=1e-12)
    for j in range(f.n_params):
        col = f.eigenvectors[:, j]
        assert col[np.flatnonzero(np.abs(col) > 1e-8)[0]] > 0
    assert f.hypercube_bound > 0


def test_kl_too_many_modes():
    with pytest.raises(ValueError):
        build_kl_field(np.zeros((3, 2)), n_theta=4)


# -- diffusion field ---------------------------------------------------------------

def test_nu_at_zero(model):
    np.testing.assert_allclose(nu(model.field, np.zeros(6)), np.sqrt(2.0), rtol=0, atol=1e-15)


def test_nu_at_hypercube_corner(model):
    b = model.field.hypercube_bound
    assert nu(model.field, np.full(6, b)).min() >= 0
    assert nu(model.field, np.full(6, -b)).min() >= 0


@given(st.lists(st.sampled_from([-1.0, 1.0]), min_size=6, max_size=6))
def test_nu_nonnegative_on_every_corner(signs):
    f = FisherKPP().field
    assert nu(f, np.array(signs) * f.hypercube_bound).min() >= -1e-14


def test_nu_true_parameter_spot_value(model):
    f = model.field
    vals = nu(f, THETA_TRUE)
    assert np.all(np.isfinite(vals)) and vals.min() > 0
    node = 123
    direct = np.sqrt(2.0)
    for i in range(6):
        direct += THETA_TRUE[i] * np.sqrt(f.eigenvalues[i]) * f.eigenvectors[node, i]
    assert vals[node] == pytest.approx(direct, abs=1e-14)


def test_true_parameter_values():
    np.testing.assert_array_equal(THETA_TRUE, [0.271, 0.266, 0.504, -0.111, -0.014, -0.086])
    assert (REACTION, T_FINAL, DT) == (75.0, 0.154, 4.4e-5)


# -- drift -------------------------------------------------------------------------

@pytest.mark.parametrize("level, expected", [(1.0, 0.0), (0.0, 0.0), (0.5, 18.75)])
def test_drift_on_constants(model, rng, level, expected):
    theta = theta_in_cube(rng, model, 3)
    F = model.drift(np.full((540, 3), level), theta)
    np.testing.assert_allclose(F, expected, atol=1e-12)


def test_drift_rejects_negative_diffusion(model):
    with pytest.raises(NegativeDiffusion):
        model.drift(np.zeros(540), np.full(6, -50.0))


def test_diffusion_converges_for_angular_mode():
    # u = cos(2 alpha) satisfies the Neumann conditions; with theta = 0 the
    # operator is sqrt(2) * Laplacian, i.e. -4 sqrt(2) cos(2 alpha) / r^2
    errs = []
    for n in (12, 24, 48):
        g = PolarGrid(n, 2 * n)
        flat = KlField(np.array([0.0]), np.zeros((g.dim, 1)))
        m = FisherKPP(g, field=flat, reaction=0.0)
        rr, aa = m.grid.polar()
        exact = -4.0 * np.sqrt(2.0) * np.cos(2 * aa) / rr**2
        interior = (aa > 0) & (aa < np.pi / 2) & (rr > 1.0) & (rr < 1.5)
        F = m.drift(np.cos(2 * aa), np.zeros(1))
        errs.append(np.max(np.abs(F - exact)[interior]))
    assert errs[2] < errs[1] < errs[0]
    assert errs[1] / errs[2] > 3.0


@given(seeds)
def test_diffusion_conserves_and_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    m = FisherKPP(PolarGrid(6, 7), reaction=0.0)
    theta = theta_in_cube(rng, m)
    u, v = rng.standard_normal((m.dim, 1)), rng.standard_normal((m.dim, 1))
    w = m.areas
    Lu, Lv = m.drift(u, theta), m.drift(v, theta)
    assert abs(w @ Lu[:, 0]) < 1e-10 * np.linalg.norm(u)
    assert (w * v[:, 0]) @ Lu[:, 0] == pytest.approx((w * u[:, 0]) @ Lv[:, 0], abs=1e-10)
    assert (w * u[:, 0]) @ Lu[:, 0] <= 1e-12


@given(seeds, st.integers(1, 6))
def test_drift_rows_match_full_drift(seed, n_rows):
    rng = np.random.default_rng(seed)
    m = FisherKPP(PolarGrid(5, 6))
    X = rng.uniform(0, 1, (m.dim, 3))
    theta = theta_in_cube(rng, m, 3)
    rows = np.sort(rng.choice(m.dim, n_rows, replace=False))
    sup = m.row_support(rows)
    np.testing.assert_allclose(m.drift_rows(rows, X[sup], sup, theta), m.drift(X, theta)[rows],
                               atol=1e-12)


def test_euler_solution_stays_near_unit_interval(model):
    u = initial_condition(model.grid)
    theta = THETA_TRUE
    lo, hi = u.min(), u.max()
    for _ in range(int(round(T_FINAL / DT))):
        u = u + DT * model.drift(u, theta)
        lo, hi = min(lo, u.min()), max(hi, u.max())
    assert lo >= -0.01 and hi <= 1.01


# -- initial condition and observations ------------------------------------------------

def test_initial_condition_values():
    g = PolarGrid()
    u0 = initial_condition(g)
    rr, aa = g.polar()
    corner = np.flatnonzero((rr == 1.5) & (aa == 0.0))[0]
    top = np.flatnonzero((rr == 1.5) & (aa == aa.max()))[0]
    assert u0[corner] == 1.0
    assert u0[top] < 1e-40
    x = g.coords()
    direct = np.array([np.exp(-(p[0] - 1.5) ** 2 - 50 * p[1] ** 2) for p in x])
    np.testing.assert_allclose(u0, direct, rtol=1e-15)
    assert np.argmax(u0) == corner


def test_partial_observation_zero():
    H = partial_observation_matrix(PolarGrid())
    assert H.shape == (8, 540)
    np.testing.assert_array_equal(H @ np.zeros(540), np.zeros(8))


def _kernel_integral(rho, alpha):
    c = (rho * np.cos(alpha), rho * np.sin(alpha))

    def f(r, a):
        dist2 = (r * np.cos(a) - c[0]) ** 2 + (r * np.sin(a) - c[1]) ** 2
        return 30.0 / (0.05 * np.pi) * np.exp(-dist2 / (2 * 0.05**2)) * r

    return integrate.dblquad(f, 0.0, np.pi / 2, 1.0, 1.5, epsabs=1e-12)[0]


def test_partial_observation_of_one_matches_quadrature():
    oracle = np.array([_kernel_integral(rho, a) for rho in (1.0, 1.5)
                       for a in (np.pi / 2, np.pi / 3, np.pi / 4, np.pi / 6)])
    coarse = partial_observation_matrix(PolarGrid()).sum(axis=1)
    fine = partial_observation_matrix(PolarGrid(90, 150)).sum(axis=1)
    assert np.all(coarse > 0)
    np.testing.assert_allclose(coarse, oracle, rtol=5e-3)
    np.testing.assert_allclose(fine, oracle, rtol=2e-4)


def test_partial_observation_row_peaks():
    g = PolarGrid()
    x = g.coords()
    H = partial_observation_matrix(g)
    k = 0
    for rho in (1.0, 1.5):
        for a in (np.pi / 2, np.pi / 3, np.pi / 4, np.pi / 6):
            center = np.array([rho * np.cos(a), rho * np.sin(a)])
            nearest = np.argmin(np.linalg.norm(x - center, axis=1))
            # weights vary across cells, so compare against kernel * weight maxima
            kernel = np.exp(-np.sum((x - center) ** 2, axis=1) / (2 * 0.05**2))
            assert np.argmax(H[k] / g.cell_areas()) == nearest
            assert np.argmax(kernel) == nearest
            k += 1

"""Dirichlet spectrum of the Zakharov-Shabat system and linearized-map columns.

Oracles: the zero-potential transfer matrix, mismatch, eigenfunctions,
gradient fields, and map columns are all closed-form; a constant potential
has an exact matrix-exponential transfer matrix via the Cayley-Hamilton
identity ``A^2 = (|c|^2 - lambda^2) Id``; a generic potential is
cross-checked against an independent high-order adaptive integrator; the
eigenvalue gradient is checked against finite differences of the eigenvalue
itself; and the map columns are compared with the linearization of the
quartic-order coordinate backend at a small chart point.
"""

import numpy as np
import pytest
from scipy.integrate import solve_ivp

from nlscanon.birkhoff_backend import GenFlowConfig, bk_diff, bk_eval, make_perturbative
from nlscanon.phase_space import ModeLayout, TruncState, fnls_inverse_matrix
from nlscanon.zs_spectral import (
    DegenerateEigenbasis,
    RefinementFailure,
    ZSPotential,
    dirichlet_eigenfunctions,
    dirichlet_eigenvalue_near,
    dirichlet_eigenvalues,
    dirichlet_mismatch,
    dpsi_nls_columns,
    eigen_residual,
    fundamental_solution,
    grad_frak_z,
)

LAY = ModeLayout(4, ())


def _zero_potential() -> ZSPotential:
    return ZSPotential(LAY, np.zeros(LAY.n_modes))


def _random_potential(seed: int = 7, amp: float = 0.02) -> ZSPotential:
    rng = np.random.default_rng(seed)
    u = amp * (rng.standard_normal(LAY.n_modes) + 1j * rng.standard_normal(LAY.n_modes))
    u *= LAY.weights(-1.5) ** 0.5
    return ZSPotential(LAY, u)


@pytest.fixture(scope="module")
def chart_point():
    """Small chart-image potential with its backend linearization.

    The normal-mode gaps of such a potential are closed to the backend's
    order, which is the regime the spectral gradients are designed for.
    """
    play = ModeLayout(4, (0, 1))
    backend = make_perturbative(play, flow_cfg=GenFlowConfig(steps=16, tol=1e-10, check=True))
    z = TruncState(play, np.zeros(play.n_modes), np.zeros(play.n_modes))
    amp = 1e-2
    z.x[play.index(0)], z.y[play.index(0)] = 0.8 * amp, -0.5 * amp
    z.x[play.index(1)], z.y[play.index(1)] = 0.6 * amp, 1.1 * amp
    p = ZSPotential.from_pair(bk_eval(backend, z))
    return play, p, bk_diff(backend, z).mat


# ---------------------------------------------------------------------------
# transfer matrix
# ---------------------------------------------------------------------------


def test_zero_potential_transfer_matrix_closed_form():
    p = _zero_potential()
    for lam in (1.3, -2.7):
        xs, M = fundamental_solution(p, lam)
        assert np.allclose(M[0], np.eye(2), atol=1e-15)
        exact = np.zeros_like(M)
        exact[:, 0, 0] = np.exp(-1j * lam * xs)
        exact[:, 1, 1] = np.exp(1j * lam * xs)
        assert np.max(np.abs(M - exact)) <= 1e-11


def test_constant_potential_matches_matrix_exponential():
    c = 0.35 - 0.2j
    u = np.zeros(LAY.n_modes, complex)
    u[LAY.index(0)] = c
    p = ZSPotential(LAY, u)
    A = np.array([[0.0, 1j * c], [-1j * np.conj(c), 0.0]])
    for lam in (0.9, 3.3):
        A_lam = A + np.array([[-1j * lam, 0.0], [0.0, 1j * lam]])
        om = np.sqrt(lam**2 - abs(c) ** 2 + 0j)
        xs, M = fundamental_solution(p, lam)
        exact = (
            np.cos(om * xs)[:, None, None] * np.eye(2)[None]
            + (np.sin(om * xs) / om)[:, None, None] * A_lam[None]
        )
        assert np.max(np.abs(M - exact)) <= 1e-10


def test_transfer_matrix_matches_independent_integrator():
    p = _random_potential()
    modes = LAY.modes

    def rhs(x, y, lam):
        F = y[:2] + 1j * y[2:]
        ux = np.exp(2j * np.pi * x * modes) @ p.u
        d = np.array(
            [-1j * lam * F[0] + 1j * ux * F[1], -1j * np.conj(ux) * F[0] + 1j * lam * F[1]]
        )
        return np.concatenate([d.real, d.imag])

    for lam, tol in ((0.9, 1e-10), (3.3, 1e-10), (7.7, 5e-9)):
        xs, M = fundamental_solution(p, lam, check=True)
        cols = []
        for init in (np.array([1.0, 0, 0, 0]), np.array([0, 1.0, 0, 0])):
            sol = solve_ivp(
                rhs, (0.0, 1.0), init, args=(lam,), method="DOP853", rtol=1e-12, atol=1e-14
            )
            yf = sol.y[:, -1]
            cols.append(yf[:2] + 1j * yf[2:])
        assert np.max(np.abs(M[-1] - np.array(cols).T)) <= tol


def test_determinant_identity():
    p = _random_potential()
    for lam in (1.95, -4.56, 7.82):
        xs, M = fundamental_solution(p, lam)
        det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
        assert np.max(np.abs(det - 1.0)) <= 1e-10


def test_refinement_check_trips_on_coarse_grid():
    p = _random_potential()
    with pytest.raises(RefinementFailure, match="halving"):
        fundamental_solution(p, 40.0, n_steps=32, check=True)
    # and passes at the default resolution for a moderate parameter
    fundamental_solution(p, 3.0, check=True)


def test_grid_must_resolve_potential():
    with pytest.raises(ValueError, match="resolve"):
        fundamental_solution(_zero_potential(), 1.0, n_steps=16)


# ---------------------------------------------------------------------------
# eigenvalues
# ---------------------------------------------------------------------------


def test_mismatch_closed_form_at_zero_potential():
    p = _zero_potential()
    lams = np.array([0.3, 1.1, 4.0, -2.2])
    chi = dirichlet_mismatch(p, lams)
    assert np.max(np.abs(chi + 2j * np.sin(lams))) <= 1e-10
    assert np.max(np.abs(chi.real)) <= 1e-12


def test_mismatch_is_purely_imaginary_on_real_subspace():
    p = _random_potential()
    chi = dirichlet_mismatch(p, np.array([0.7, 2.9, -1.3]))
    assert np.max(np.abs(chi.real)) <= 1e-12


def test_zero_potential_eigenvalues_on_lattice():
    mus = dirichlet_eigenvalues(_zero_potential(), (-0.5, 3.5 * np.pi))
    assert mus.size == 4
    assert np.max(np.abs(mus - np.arange(4) * np.pi)) <= 1e-8


def test_small_potential_eigenvalues_stay_localized():
    mus = dirichlet_eigenvalues(_random_potential(), (-0.5, 3.5 * np.pi))
    assert mus.size == 4  # same count as the zero potential
    assert np.max(np.abs(mus - np.arange(4) * np.pi)) <= 0.1


def test_eigenvalue_window_validation():
    p = _zero_potential()
    with pytest.raises(ValueError, match="window"):
        dirichlet_eigenvalues(p, (2.0, 1.0))
    assert dirichlet_eigenvalues(p, (0.3, 0.8)).size == 0


def test_eigenvalue_count_mismatch_is_reported():
    u = np.zeros(LAY.n_modes, complex)
    u[LAY.index(0)] = 2.0
    with pytest.raises(RuntimeError, match="found 2"):
        dirichlet_eigenvalue_near(ZSPotential(LAY, u), 1)


# ---------------------------------------------------------------------------
# eigenfunction pair
# ---------------------------------------------------------------------------


def test_eigenfunctions_zero_potential_closed_form():
    p = _zero_potential()
    for j in (0, 2, 3):
        data = dirichlet_eigenfunctions(p, j * np.pi)
        x = data.x
        H = np.stack([np.exp(-1j * j * np.pi * x), np.exp(1j * j * np.pi * x)]) / np.sqrt(2)
        K = 1j * np.stack([np.exp(-1j * j * np.pi * x), -np.exp(1j * j * np.pi * x)]) / np.sqrt(2)
        # the integrator's phase bias grows like lambda^5 h^4; ~4e-10 at j = 3
        assert np.max(np.abs(data.h - H)) <= 1e-8
        assert np.max(np.abs(data.k - K)) <= 1e-8
        assert eigen_residual(p, data) <= 1e-9


def test_eigenfunction_pair_invariants():
    p = _random_potential()
    for j in (1, 3, -2):
        mu = dirichlet_eigenvalue_near(p, j)
        assert abs(mu - j * np.pi) <= 0.1
        data = dirichlet_eigenfunctions(p, mu)
        hstep = float(data.x[1] - data.x[0])

        def inner(f, g):
            return complex(
                np.trapezoid(f[0] * np.conj(g[0]) + f[1] * np.conj(g[1]), dx=hstep)
            )

        assert abs(inner(data.h, data.h) - 1.0) <= 1e-10
        assert abs(inner(data.k, data.k) - 1.0) <= 1e-10
        assert abs(inner(data.k, data.h)) <= 1e-10
        orient = -1j * (data.k[0, 0] - data.k[1, 0])
        assert orient.real > 0.5 and abs(orient.imag) <= 1e-10
        assert eigen_residual(p, data) <= 1e-8


def test_eigenvalue_gradient_matches_finite_differences():
    # d mu[du] = integral(H2^2 du + H1^2 conj(du)): ties the eigenfunctions to
    # an independently measurable derivative of the eigenvalue itself.
    p = _random_potential(seed=3)
    rng = np.random.default_rng(11)
    du = 0.01 * (rng.standard_normal(LAY.n_modes) + 1j * rng.standard_normal(LAY.n_modes))
    for j in (1, -1):
        mu = dirichlet_eigenvalue_near(p, j)
        data = dirichlet_eigenfunctions(p, mu)
        du_x = np.exp(2j * np.pi * np.outer(data.x, LAY.modes)) @ du
        pred = np.trapezoid(
            data.h[1] ** 2 * du_x + data.h[0] ** 2 * np.conj(du_x),
            dx=float(data.x[1] - data.x[0]),
        )
        assert abs(pred.imag) <= 1e-10
        eps = 1e-5
        fd = (
            dirichlet_eigenvalue_near(ZSPotential(LAY, p.u + eps * du), j)
            - dirichlet_eigenvalue_near(ZSPotential(LAY, p.u - eps * du), j)
        ) / (2 * eps)
        assert abs(fd - pred.real) <= 5e-9


# ---------------------------------------------------------------------------
# gradient fields
# ---------------------------------------------------------------------------


def test_gradient_fields_zero_potential_closed_form():
    p = _zero_potential()
    for j in (1, 3, -2):
        gp, gm = grad_frak_z(p, j)
        ev = np.zeros(LAY.n_modes, complex)
        ev[LAY.index(-j)] = -2.0
        eu = np.zeros(LAY.n_modes, complex)
        eu[LAY.index(j)] = -2.0
        assert np.max(np.abs(gp.u)) <= 1e-10
        assert np.max(np.abs(gp.v - ev)) <= 1e-10
        assert np.max(np.abs(gm.u - eu)) <= 1e-10
        assert np.max(np.abs(gm.v)) <= 1e-10


def test_gradient_squares_periodic_at_chart_point(chart_point):
    # with the normal-mode gaps closed the eigenfunction combinations are
    # Floquet-periodic, so the squared fields close up over the period
    play, p, _ = chart_point
    for j in (2, 3, -1):
        mu = dirichlet_eigenvalue_near(p, j)
        data = dirichlet_eigenfunctions(p, mu)
        for s in (1.0, -1.0):
            for comp in (0, 1):
                sq = (data.k[comp] + 1j * s * data.h[comp]) ** 2
                assert abs(sq[-1] - sq[0]) <= 1e-9


def test_gradient_fields_band_limited_at_chart_point(chart_point):
    play, p, _ = chart_point
    for j in (2, -1):
        gp, gm = grad_frak_z(p, j)
        tail = max(
            abs(gp.u[0]), abs(gp.u[-1]), abs(gp.v[0]), abs(gp.v[-1]),
            abs(gm.u[0]), abs(gm.u[-1]), abs(gm.v[0]), abs(gm.v[-1]),
        )
        assert tail <= 1e-6


# ---------------------------------------------------------------------------
# linearized-map columns
# ---------------------------------------------------------------------------


def test_columns_zero_potential_match_inverse_pairing():
    p = _zero_potential()
    Finv = fnls_inverse_matrix(LAY)
    m = LAY.n_modes
    for j in (1, 3, -2):
        col1, col2 = dpsi_nls_columns(p, j, 1.0, 0.0)
        e1 = np.zeros(2 * m)
        e1[LAY.index(j)] = 1.0
        e2 = np.zeros(2 * m)
        e2[m + LAY.index(j)] = 1.0
        assert np.max(np.abs(col1.vec() - Finv @ e1)) <= 1e-10
        assert np.max(np.abs(col2.vec() - Finv @ e2)) <= 1e-10


def test_columns_scale_and_rotate():
    p = _zero_potential()
    mu = dirichlet_eigenvalue_near(p, 2)
    data = dirichlet_eigenfunctions(p, mu)
    base1, base2 = dpsi_nls_columns(p, 2, 1.0, 0.0, data=data)
    twice1, twice2 = dpsi_nls_columns(p, 2, 2.0, 0.0, data=data)
    assert np.max(np.abs(twice1.vec() - 2 * base1.vec())) <= 1e-14
    assert np.max(np.abs(twice2.vec() - 2 * base2.vec())) <= 1e-14
    flip1, flip2 = dpsi_nls_columns(p, 2, 1.0, np.pi, data=data)
    assert np.max(np.abs(flip1.vec() + base1.vec())) <= 1e-12
    assert np.max(np.abs(flip2.vec() + base2.vec())) <= 1e-12


def test_columns_match_backend_linearization(chart_point):
    play, p, D = chart_point
    m = play.n_modes
    for j in (2, 3, -1, -2):
        col1, col2 = dpsi_nls_columns(p, j, 1.0, 0.0)
        e1 = np.zeros(2 * m)
        e1[play.index(j)] = 1.0
        e2 = np.zeros(2 * m)
        e2[m + play.index(j)] = 1.0
        r1, r2 = D @ e1, D @ e2
        assert np.linalg.norm(col1.vec() - r1) <= 5e-2 * np.linalg.norm(r1)
        assert np.linalg.norm(col2.vec() - r2) <= 5e-2 * np.linalg.norm(r2)


def test_columns_stay_tangent_to_real_subspace():
    p = _random_potential()
    for j in (1, -2):
        col1, col2 = dpsi_nls_columns(p, j, 1.0, 0.0)
        for c in (col1, col2):
            assert np.max(np.abs(c.v - np.conj(c.u[::-1]))) <= 1e-8


# ---------------------------------------------------------------------------
# potential type
# ---------------------------------------------------------------------------


def test_potential_validation_and_round_trip():
    with pytest.raises(ValueError, match="coefficients"):
        ZSPotential(LAY, np.zeros(3))
    pair = _random_potential().pair()
    bad = pair.copy()
    bad.v[0] += 1e-3
    with pytest.raises(ValueError, match="real subspace"):
        ZSPotential.from_pair(bad)
    p = _random_potential()
    q = ZSPotential.from_json(p.to_json())
    assert q.layout == p.layout
    assert np.max(np.abs(q.u - p.u)) == 0.0
    assert p.pair().is_real_subspace()

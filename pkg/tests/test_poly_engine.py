"""Tests for the quartic polynomial engine and its variational flows.

Derivative structures are validated against central finite differences of the
plain value/flow; the flow is checked for fourth-order convergence and for
preserving the complex symplectic Gram.
"""

import numpy as np
import pytest

from nlscanon._poly import (
    QuarticPoly,
    apply_A,
    complex_symplectic_gram,
    flow_poly,
)


def _random_poly(n, T, rng, real_slice=False):
    idx = rng.integers(0, n, size=(T, 4))
    coeffs = 0.1 * (rng.standard_normal(T) + 1j * rng.standard_normal(T))
    if real_slice:
        # add the slot-swapped conjugate so the value is real when eta = conj(zeta)
        m = n // 2
        swap = (idx + m) % n
        idx = np.vstack([idx, swap])
        coeffs = np.concatenate([coeffs, np.conj(coeffs)])
    return QuarticPoly(n, coeffs, idx)


def test_value_and_grad_match_fd():
    rng = np.random.default_rng(0)
    n = 8
    H = _random_poly(n, 12, rng)
    W = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    g = H.grad(W)
    h = 1e-6
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        fd = (H.value(W + e) - H.value(W - e)) / (2 * h)
        assert g[j] == pytest.approx(fd, rel=1e-7, abs=1e-9)


def test_hess_matches_fd_of_grad():
    rng = np.random.default_rng(1)
    n = 6
    H = _random_poly(n, 10, rng)
    W = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    Hs = H.hess(W)
    assert np.max(np.abs(Hs - Hs.T)) < 1e-13
    h = 1e-6
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        fd = (H.grad(W + e) - H.grad(W - e)) / (2 * h)
        assert np.max(np.abs(Hs[:, j] - fd)) < 1e-6


def test_bmat_is_directional_derivative_of_hess():
    rng = np.random.default_rng(2)
    n = 6
    H = _random_poly(n, 10, rng)
    W = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    B = H.bmats_from(H.gather(W), [H.gather(v)])[0]
    h = 1e-6
    fd = (H.hess(W + h * v.real) - H.hess(W - h * v.real)) / (2 * h) + 1j * 0
    # complex direction: combine real and imaginary FD sweeps
    fd = (H.hess(W + h * v) - H.hess(W - h * v)) / (2 * h)
    assert np.max(np.abs(B - fd)) < 1e-5


def test_contract3_consistency():
    rng = np.random.default_rng(3)
    n = 6
    H = _random_poly(n, 8, rng)
    W = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    a = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    b = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    # D3[a, b, .](W) equals B_a(W) @ b
    Ba = H.bmats_from(H.gather(W), [H.gather(a)])[0]
    v1 = H.contract3_from(H.gather(a), H.gather(b), H.gather(W))
    assert np.max(np.abs(v1 - Ba @ b)) < 1e-12
    # symmetric in all three arguments
    v2 = H.contract3_from(H.gather(b), H.gather(W), H.gather(a))
    assert np.max(np.abs(v1 - v2)) < 1e-12


def test_d4_contraction_differentiates_bmat():
    rng = np.random.default_rng(4)
    n = 6
    H = _random_poly(n, 8, rng)
    a = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    b = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    c = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    d4 = H.contract3_from(H.gather(a), H.gather(b), H.gather(c))
    # D4[a,b,c,.] = d/dt D3[a,b,.](t c) at any t (it is state-independent there)
    W = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    h = 1e-5
    f = lambda s: H.bmats_from(H.gather(s), [H.gather(a)])[0] @ b
    fd = (f(W + h * c) - f(W - h * c)) / (2 * h)
    assert np.max(np.abs(d4 - fd)) < 1e-8


def test_flow_is_symplectic_and_fourth_order():
    rng = np.random.default_rng(5)
    m = 4
    n = 2 * m
    H = _random_poly(n, 10, rng, real_slice=True)
    z = 0.3 * (rng.standard_normal(m) + 1j * rng.standard_normal(m))
    W0 = np.concatenate([z, np.conj(z)])
    M0 = np.eye(n, dtype=complex)
    res = flow_poly(H, W0, 1.0, steps=32, M0=M0)
    # real slice is preserved
    assert np.max(np.abs(res.W[m:] - np.conj(res.W[:m]))) < 1e-10
    # differential preserves the complex symplectic Gram
    G = complex_symplectic_gram(m)
    err = np.max(np.abs(res.M.T @ G @ res.M - G))
    assert err < 1e-10
    # order-4 convergence: halving the step shrinks the defect ~16x
    W_coarse = flow_poly(H, W0, 1.0, steps=4).W
    W_mid = flow_poly(H, W0, 1.0, steps=8).W
    W_ref = flow_poly(H, W0, 1.0, steps=64).W
    e1 = np.max(np.abs(W_coarse - W_ref))
    e2 = np.max(np.abs(W_mid - W_ref))
    assert e1 / max(e2, 1e-16) > 8.0


def test_flow_first_variation_matches_fd():
    rng = np.random.default_rng(6)
    n = 8
    H = _random_poly(n, 8, rng)
    W0 = 0.4 * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    v = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    res = flow_poly(H, W0, 1.0, steps=16, M0=v.reshape(-1, 1))
    h = 1e-6
    fp = flow_poly(H, W0 + h * v, 1.0, steps=16).W
    fm = flow_poly(H, W0 - h * v, 1.0, steps=16).W
    fd = (fp - fm) / (2 * h)
    assert np.max(np.abs(res.M[:, 0] - fd)) < 1e-6


def test_flow_second_variation_matches_fd_of_first():
    rng = np.random.default_rng(7)
    n = 6
    H = _random_poly(n, 6, rng)
    W0 = 0.4 * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    a = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    b = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    M0 = np.stack([a, b], axis=1)
    res = flow_poly(H, W0, 1.0, steps=16, M0=M0, pairs=[(0, 1)])
    h = 1e-5
    first = lambda base: flow_poly(H, base, 1.0, steps=16, M0=a.reshape(-1, 1)).M[:, 0]
    fd = (first(W0 + h * b) - first(W0 - h * b)) / (2 * h)
    assert np.max(np.abs(res.Q[:, 0] - fd)) < 1e-5


def test_flow_third_variation_matches_fd_of_second():
    rng = np.random.default_rng(8)
    n = 6
    H = _random_poly(n, 6, rng)
    W0 = 0.4 * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    dirs = rng.standard_normal((n, 3)) + 1j * rng.standard_normal((n, 3))
    pairs = [(0, 1), (0, 2), (1, 2)]
    res = flow_poly(H, W0, 1.0, steps=16, M0=dirs, pairs=pairs, triples=[(0, 1, 2)])
    h = 1e-4
    def second(base):
        out = flow_poly(H, base, 1.0, steps=16, M0=dirs[:, :2], pairs=[(0, 1)])
        return out.Q[:, 0]
    fd = (second(W0 + h * dirs[:, 2]) - second(W0 - h * dirs[:, 2])) / (2 * h)
    assert np.max(np.abs(res.R[:, 0] - fd)) < 2e-4


def test_flow_validates_input():
    H = _random_poly(4, 3, np.random.default_rng(9))
    W0 = np.zeros(4, complex)
    with pytest.raises(ValueError):
        flow_poly(H, W0, 1.0, steps=0)
    with pytest.raises(ValueError):
        flow_poly(H, W0, 1.0, steps=4, pairs=[(0, 1)])
    M0 = np.eye(4, dtype=complex)[:, :3]
    with pytest.raises(ValueError):
        flow_poly(H, W0, 1.0, steps=4, M0=M0, pairs=[(0, 1)], triples=[(0, 1, 2)])


def test_empty_polynomial_flows_identity():
    H = QuarticPoly(6, [], np.zeros((0, 4)))
    W0 = np.arange(6) + 0j
    res = flow_poly(H, W0, 1.0, steps=4, M0=np.eye(6, dtype=complex))
    assert np.allclose(res.W, W0)
    assert np.allclose(res.M, np.eye(6))

"""Unit tests for the phase-space types, pairings and the coordinate map."""

import numpy as np
import pytest

from nlscanon.phase_space import (
    Actions,
    FieldPair,
    LinOp,
    ModeLayout,
    TruncState,
    actions_of,
    apply_J,
    apply_bbJ,
    bbj_matrix,
    fnls_forward,
    fnls_forward_matrix,
    fnls_inverse,
    fnls_inverse_matrix,
    fourier_eval_matrix,
    fun_pairing_matrix,
    fun_symplectic_gram,
    j_matrix,
    pairing_fun_r,
    pairing_seq_r,
    project_S,
    project_perp,
    random_state,
    sobolev_norm,
)


def test_layout_basic():
    lay = ModeLayout(4, (-1, 2))
    assert lay.n_modes == 9
    assert lay.dim == 18
    assert lay.S == (-1, 2)
    assert lay.index(0) == 4
    assert lay.index(-4) == 0
    assert set(lay.S_perp) == set(range(-4, 5)) - {-1, 2}
    with pytest.raises(ValueError):
        ModeLayout(2, (5,))


def test_s_dirs_perp_dirs_partition():
    lay = ModeLayout(3, (0, 1))
    all_idx = np.sort(np.concatenate([lay.s_dirs, lay.perp_dirs]))
    assert np.array_equal(all_idx, np.arange(lay.dim))
    # x slots of S come first, in ascending mode order
    assert np.array_equal(lay.s_dirs[:2], [lay.index(0), lay.index(1)])


def test_sobolev_norm_single_mode():
    # one unit coordinate on mode 2 with weight <2>^2 gives norm 2 at s=1
    lay = ModeLayout(4)
    z = TruncState.zero(lay)
    z.set(2, 1.0, 0.0)
    assert sobolev_norm(z, 1) == pytest.approx(2.0, abs=1e-14)
    assert sobolev_norm(z, 0) == pytest.approx(1.0, abs=1e-14)


def test_sobolev_norm_splits_tangential_and_normal():
    lay = ModeLayout(4, (2,))
    z = TruncState.zero(lay)
    z.set(2, 1.0, 0.0)   # tangential: unweighted
    z.set(3, 0.0, 2.0)   # normal: weight <3>^2 = 9 at s=1
    assert sobolev_norm(z, 1) == pytest.approx(1.0 + 6.0, abs=1e-13)


def test_projections():
    lay = ModeLayout(3, (1,))
    rng = np.random.default_rng(0)
    z = TruncState(lay, rng.standard_normal(7), rng.standard_normal(7))
    zs, zp = project_S(z), project_perp(z)
    assert np.allclose(zs.vec() + zp.vec(), z.vec())
    assert zs.x[lay.index(0)] == 0.0
    assert zp.x[lay.index(1)] == 0.0


def test_actions_oracle():
    # I = (3^2 + 4^2)/2 = 12.5
    lay = ModeLayout(2)
    z = TruncState.zero(lay)
    z.set(1, 3.0, 4.0)
    I = actions_of(z)
    assert I.get(1) == pytest.approx(12.5, abs=1e-14)
    assert I.total() == pytest.approx(12.5, abs=1e-14)


def test_pairing_seq_is_flat_dot():
    lay = ModeLayout(2)
    rng = np.random.default_rng(1)
    a = TruncState(lay, rng.standard_normal(5), rng.standard_normal(5))
    b = TruncState(lay, rng.standard_normal(5), rng.standard_normal(5))
    assert pairing_seq_r(a, b) == pytest.approx(a.vec() @ b.vec(), abs=1e-14)


def test_pairing_fun_constant_pair():
    # the constant pair u = 1, v = 0 pairs with itself to 1
    lay = ModeLayout(2)
    w = FieldPair.zero(lay)
    w.u[lay.index(0)] = 1.0
    assert pairing_fun_r(w, w) == pytest.approx(1.0, abs=1e-14)


def test_pairing_fun_matches_integral():
    # <w, w'>_r = integral(u u' + v v'); check against grid quadrature
    lay = ModeLayout(3)
    rng = np.random.default_rng(2)
    w = FieldPair(lay, rng.standard_normal(7) + 1j * rng.standard_normal(7),
                  rng.standard_normal(7) + 1j * rng.standard_normal(7))
    wp = FieldPair(lay, rng.standard_normal(7) + 1j * rng.standard_normal(7),
                   rng.standard_normal(7) + 1j * rng.standard_normal(7))
    K = 32
    u, v = w.on_grid(K)
    up, vp = wp.on_grid(K)
    quad = np.mean(u * up + v * vp)
    assert pairing_fun_r(w, wp) == pytest.approx(quad, abs=1e-12)
    # Gram-matrix route agrees
    P = fun_pairing_matrix(lay)
    assert w.vec() @ P @ wp.vec() == pytest.approx(pairing_fun_r(w, wp), abs=1e-12)


def test_apply_J_squares_to_minus_id():
    lay = ModeLayout(2)
    rng = np.random.default_rng(3)
    z = TruncState(lay, rng.standard_normal(5), rng.standard_normal(5))
    zz = apply_J(apply_J(z))
    assert np.allclose(zz.vec(), -z.vec(), atol=1e-15)
    assert np.allclose(j_matrix(lay) @ z.vec(), apply_J(z).vec())


def test_apply_bbJ():
    lay = ModeLayout(1)
    w = FieldPair(lay, np.array([1, 2, 3], complex), np.array([4j, 5, 6], complex))
    jw = apply_bbJ(w)
    assert np.allclose(jw.u, -w.v) and np.allclose(jw.v, w.u)
    assert np.allclose(bbj_matrix(lay) @ w.vec(), jw.vec())


def test_fnls_forward_real_subspace_oracle():
    # u_n = delta_{n,1}, v = conj-flip: x_{-1} = -sqrt(2), everything else 0
    lay = ModeLayout(2)
    u = np.zeros(5, complex)
    u[lay.index(1)] = 1.0
    w = FieldPair.from_u(lay, u)
    assert w.is_real_subspace()
    z = fnls_forward(w)
    assert not np.iscomplexobj(z.x)
    assert z.get(-1)[0] == pytest.approx(-np.sqrt(2), abs=1e-14)
    assert z.get(-1)[1] == pytest.approx(0.0, abs=1e-14)
    assert np.sum(np.abs(z.vec())) == pytest.approx(np.sqrt(2), abs=1e-14)
    # imaginary part lands in y with a plus sign
    w2 = FieldPair.from_u(lay, 1j * u)
    z2 = fnls_forward(w2)
    assert z2.get(-1)[1] == pytest.approx(np.sqrt(2), abs=1e-14)


def test_fnls_round_trip():
    lay = ModeLayout(5, (0, 1))
    rng = np.random.default_rng(4)
    z = TruncState(lay, rng.standard_normal(11), rng.standard_normal(11))
    back = fnls_forward(fnls_inverse(z))
    assert np.max(np.abs(back.vec() - z.vec())) < 1e-14
    w = FieldPair(lay, rng.standard_normal(11) + 1j * rng.standard_normal(11),
                  rng.standard_normal(11) + 1j * rng.standard_normal(11))
    wback = fnls_inverse(fnls_forward(w))
    assert np.max(np.abs(wback.vec() - w.vec())) < 1e-14


def test_fnls_matrices_match_maps_and_invert():
    lay = ModeLayout(3)
    F = fnls_forward_matrix(lay)
    Fi = fnls_inverse_matrix(lay)
    assert np.max(np.abs(F @ Fi - np.eye(lay.dim))) < 1e-14
    rng = np.random.default_rng(5)
    z = TruncState(lay, rng.standard_normal(7), rng.standard_normal(7))
    assert np.max(np.abs(Fi @ z.vec() - fnls_inverse(z).vec())) < 1e-14


def test_fnls_inverse_pulls_back_two_form_exactly():
    # the function-side two-form, pulled back through the inverse map,
    # is exactly the model two-form with Gram J
    lay = ModeLayout(4)
    Fi = fnls_inverse_matrix(lay)
    W = fun_symplectic_gram(lay)
    G = Fi.T @ W @ Fi
    assert np.max(np.abs(G - j_matrix(lay))) < 1e-14


def test_fun_symplectic_gram_antisymmetric():
    lay = ModeLayout(3)
    W = fun_symplectic_gram(lay)
    assert np.max(np.abs(W + W.T)) == 0.0


def test_linop_transpose_is_pairing_adjoint():
    lay = ModeLayout(2)
    rng = np.random.default_rng(6)
    d = lay.dim
    z = TruncState(lay, rng.standard_normal(5), rng.standard_normal(5))
    w = FieldPair(lay, rng.standard_normal(5) + 1j * rng.standard_normal(5),
                  rng.standard_normal(5) + 1j * rng.standard_normal(5))
    for src, tgt in [("seq", "seq"), ("seq", "fun"), ("fun", "seq"), ("fun", "fun")]:
        T = LinOp(lay, rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d)),
                  src=src, tgt=tgt)
        a = z if src == "seq" else w
        b = w if tgt == "fun" else z
        pair_out = pairing_fun_r if tgt == "fun" else pairing_seq_r
        pair_in = pairing_fun_r if src == "fun" else pairing_seq_r
        lhs = pair_out(T.apply(a), b)
        rhs = pair_in(a, T.transpose().apply(b))
        assert lhs == pytest.approx(rhs, rel=1e-12)


def test_linop_identity_compose_block():
    lay = ModeLayout(2, (1,))
    I = LinOp.identity(lay)
    assert np.allclose(I.compose(I).mat, np.eye(lay.dim))
    B = I.block("S", "S")
    assert B.shape == (2, 2) and np.allclose(B, np.eye(2))
    assert I.block("perp", "perp").shape == (8, 8)
    assert I.norm2() == pytest.approx(1.0)


def test_json_round_trip():
    lay = ModeLayout(3, (0, 2))
    rng = np.random.default_rng(7)
    z = TruncState(lay, rng.standard_normal(7), rng.standard_normal(7))
    z2 = TruncState.from_json(z.to_json())
    assert z2.layout == lay
    assert np.array_equal(z2.x, z.x) and np.array_equal(z2.y, z.y)
    w = fnls_inverse(z)
    w2 = FieldPair.from_json(w.to_json())
    assert np.array_equal(w2.u, w.u) and np.array_equal(w2.v, w.v)


def test_fourier_eval_matrix():
    lay = ModeLayout(2)
    E = fourier_eval_matrix(lay, 8)
    m = np.arange(8)
    assert np.allclose(E[:, lay.index(1)], np.exp(2j * np.pi * m / 8))


def test_random_state_shape_and_norms():
    lay = ModeLayout(8, (1, 2))
    rng = np.random.default_rng(8)
    z = random_state(lay, rng, s=2, amp_S=0.1, amp_perp=0.05)
    zp = project_perp(z)
    assert sobolev_norm(zp, 0) == pytest.approx(0.05, rel=1e-12)
    assert np.all(np.abs(project_S(z).s_block()) > 0)


def test_vec_from_vec_round_trip():
    lay = ModeLayout(2)
    rng = np.random.default_rng(9)
    v = rng.standard_normal(lay.dim)
    z = TruncState.from_vec(lay, v)
    assert np.array_equal(z.vec(), v)
    fv = rng.standard_normal(lay.dim) + 1j * rng.standard_normal(lay.dim)
    w = FieldPair.from_vec(lay, fv)
    assert np.array_equal(w.vec(), fv)

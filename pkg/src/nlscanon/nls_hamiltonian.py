"""The truncated circle energy, its frequency operators, and the energy in
chart coordinates.

The literal energy of a coefficient pair is ``H(u, v) = integral(u_x v_x +
u^2 v^2) dx``.  Its quadratic part is a spectral sum; the quartic part, and
every gradient projection, is evaluated by trapezoid quadrature on a uniform
grid of at least ``4N + 1`` points, which is exact for products of four
polynomials from the mode window.  Line integrals use a fixed-order
Gauss-Legendre rule with an optional doubled-order cross-check.

On top of a coordinate backend the module provides

* :class:`OmegaOps` -- the diagonal action-frequency operator at a tangential
  state, its tangential/normal split, and the bounded zero-order part of the
  normal block;
* :func:`r1_operator` / :func:`r_xy_operators` -- curvature operators pairing
  mixed second derivatives of the coordinate map with the tangential
  rotation, and the per-direction operators entering the rate of the frozen
  normal energy along the corrector path;
* :func:`transformed_h` / :func:`p3` / :func:`p3_terms` /
  :func:`p2_residual` -- the energy composed with the full chart, its
  integrable part, the order-three remainder with a term-by-term split, and
  the (vanishing) quadratic term;
* :func:`floquet` / :func:`floquet_residual` -- Floquet solutions of the
  linearized field equation along torus orbits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _nls_core as core
from .birkhoff_backend import BirkhoffBackend, bk_diff, bk_eval
from .corrector import CorrectorContext, _le_at, _x_at, flow, psi_c, \
    d_psi_full, psi_full
from .forms import QuadratureError
from .phase_space import (
    FieldPair,
    LinOp,
    ModeLayout,
    TruncState,
    bbj_matrix,
    fourier_eval_matrix,
    fun_pairing_matrix,
    j_matrix,
    project_S,
    project_perp,
)

__all__ = [
    "HamiltonianSplit",
    "OmegaOps",
    "P3Terms",
    "make_split",
    "h_nls",
    "grad_h_nls",
    "d_grad_h_nls",
    "d3_h4",
    "omega_ops",
    "slice_energy",
    "normal_energy",
    "normal_energy_rate",
    "taylor_remainder_T31",
    "r1_operator",
    "r_xy_operators",
    "transformed_h",
    "p3",
    "grad_p3",
    "p3_terms",
    "p2_residual",
    "floquet",
    "floquet_residual",
]

_SQRT2 = float(np.sqrt(2.0))


def _real(x, scale: float = 1.0, what: str = "value") -> float:
    x = complex(x)
    if abs(x.imag) > 1e-10 * (1.0 + scale):
        raise ValueError(f"{what} has a spurious imaginary part {x.imag:.2e}")
    return float(x.real)


def _real_array(a: np.ndarray, what: str = "array") -> np.ndarray:
    a = np.asarray(a)
    if not np.iscomplexobj(a):
        return a
    scale = float(np.max(np.abs(a))) if a.size else 0.0
    if float(np.max(np.abs(a.imag))) > 1e-10 * (1.0 + scale):
        raise ValueError(f"{what} has a spurious imaginary part")
    return a.real.copy()


def _gauss01(n: int):
    xk, wk = np.polynomial.legendre.leggauss(int(n))
    return 0.5 * (xk + 1.0), 0.5 * wk


def _backend_of(ctx) -> BirkhoffBackend:
    if isinstance(ctx, BirkhoffBackend):
        return ctx
    b = getattr(ctx, "backend", None)
    if isinstance(b, BirkhoffBackend):
        return b
    raise TypeError("expected a backend, a chart context, or a corrector context")


def _corrector_of(ctx) -> CorrectorContext:
    if not isinstance(ctx, CorrectorContext):
        raise TypeError("this operation requires a corrector context")
    return ctx


# ---------------------------------------------------------------------------
# the literal energy and its derivatives
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HamiltonianSplit:
    """Evaluators for the two homogeneous parts of the circle energy.

    The quadratic part is the spectral sum ``sum_n 4 pi^2 n^2 u_n v_{-n}``;
    the quartic part is the grid mean of ``u^2 v^2``.  A grid of at least
    ``4N + 1`` points makes every quadrature here exact, so the split carries
    no quadrature error for states in the mode window.
    """

    layout: ModeLayout
    n_grid: int

    def __post_init__(self):
        if self.n_grid < 4 * self.layout.N + 1:
            raise ValueError("grid too small for exact quartic quadrature")

    # -- grid plumbing -------------------------------------------------------
    def _emat(self) -> np.ndarray:
        return fourier_eval_matrix(self.layout, self.n_grid)

    def _coeffs(self, vals: np.ndarray) -> np.ndarray:
        """Window Fourier coefficients of grid values (exact below aliasing)."""
        return (self._emat().conj().T @ vals) / self.n_grid

    # -- values --------------------------------------------------------------
    def h2(self, w: FieldPair) -> float:
        """Quadratic part, spectrally: ``sum 4 pi^2 n^2 u_n v_{-n}``."""
        sym = core.d2_symbol(self.layout)
        val = complex(np.sum(sym * w.u[::-1] * w.v))
        return _real(val, abs(val), "quadratic energy")

    def h2_grid(self, w: FieldPair) -> float:
        """Quadrature cross-check of the quadratic part: mean of u_x v_x."""
        E = self._emat()
        sym = 2j * np.pi * self.layout.modes
        du, dv = E @ (sym * w.u), E @ (sym * w.v)
        val = complex(np.mean(du * dv))
        return _real(val, abs(val), "quadratic energy")

    def h4(self, w: FieldPair) -> float:
        """Quartic part: grid mean of ``u^2 v^2``."""
        E = self._emat()
        ug, vg = E @ w.u, E @ w.v
        val = complex(np.mean(ug ** 2 * vg ** 2))
        return _real(val, abs(val), "quartic energy")

    def value(self, w: FieldPair) -> float:
        return self.h2(w) + self.h4(w)

    # -- first and second derivatives ----------------------------------------
    def d2_apply(self, w: FieldPair) -> FieldPair:
        """The component-swapping second-order symbol on a pair."""
        sym = core.d2_symbol(self.layout)
        return FieldPair(self.layout, sym * w.v, sym * w.u)

    def grad4(self, w: FieldPair) -> FieldPair:
        """Pairing gradient of the quartic part, projected to the window."""
        E = self._emat()
        ug, vg = E @ w.u, E @ w.v
        return FieldPair(self.layout, self._coeffs(2.0 * ug * vg ** 2),
                         self._coeffs(2.0 * ug ** 2 * vg))

    def grad(self, w: FieldPair) -> FieldPair:
        d2, g4 = self.d2_apply(w), self.grad4(w)
        return FieldPair(self.layout, d2.u + g4.u, d2.v + g4.v)

    def d_grad(self, w: FieldPair) -> LinOp:
        """Derivative of the gradient field on stacked function-side vectors."""
        return LinOp(self.layout, core.dgrad_matrix(self.layout, w.u, w.v),
                     src="fun", tgt="fun")

    def d3_cube(self, w0: FieldPair, w: FieldPair) -> float:
        """Third derivative of the quartic part with a cubed direction."""
        E = self._emat()
        u0, v0, u, v = E @ w0.u, E @ w0.v, E @ w.u, E @ w.v
        val = complex(12.0 * np.mean(u0 * u * v ** 2 + u ** 2 * v0 * v))
        return _real(val, abs(val), "third derivative")


def make_split(layout: ModeLayout, n_grid: int | None = None) -> HamiltonianSplit:
    """Split evaluator on the default exact grid of ``4N + 1`` points."""
    return HamiltonianSplit(layout, int(n_grid) if n_grid is not None
                            else 4 * layout.N + 1)


def h_nls(w: FieldPair) -> float:
    """Circle energy ``integral(u_x v_x + u^2 v^2)`` of a coefficient pair."""
    return make_split(w.layout).value(w)


def grad_h_nls(w: FieldPair) -> FieldPair:
    """Pairing gradient of the circle energy (window-projected)."""
    return make_split(w.layout).grad(w)


def d_grad_h_nls(w: FieldPair) -> LinOp:
    """Derivative of the circle-energy gradient at a pair."""
    return make_split(w.layout).d_grad(w)


def d3_h4(w0: FieldPair, w: FieldPair) -> float:
    """Third derivative of the quartic part at ``w0``, direction cubed.

    Equals ``12 integral(u0 u v^2 + u^2 v0 v)`` for ``w0 = (u0, v0)`` and
    ``w = (u, v)``.
    """
    if w0.layout != w.layout:
        raise ValueError("layout mismatch")
    return make_split(w0.layout).d3_cube(w0, w)


# ---------------------------------------------------------------------------
# frequency operators at a tangential state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OmegaOps:
    """Diagonal frequency operator frozen at a tangential state's actions.

    ``omega`` holds the per-mode frequencies at actions supported on the
    tangential set; ``jac`` their derivatives in the actions.  The normal
    block splits into the square of the first-order symbol ``2 pi n`` and a
    bounded zero-order part.
    """

    layout: ModeLayout
    I: np.ndarray
    omega: np.ndarray
    jac: np.ndarray

    @property
    def d_perp(self) -> np.ndarray:
        """First-order symbol ``2 pi n`` per mode."""
        return 2.0 * np.pi * self.layout.modes.astype(float)

    @property
    def zero_order(self) -> np.ndarray:
        """Per-mode entries of the bounded part ``omega_n - 4 pi^2 n^2``."""
        return self.omega - self.d_perp ** 2

    def dir_values(self, dirs) -> np.ndarray:
        """Frequencies indexed by stacked coordinate positions."""
        return self.omega[np.asarray(dirs, dtype=int) % self.layout.n_modes]

    def apply(self, z: TruncState) -> TruncState:
        """Diagonal action on both coordinate blocks."""
        return TruncState(self.layout, self.omega * z.x, self.omega * z.y)

    def normal_value(self, z: TruncState) -> float:
        """Frozen normal energy ``1/2 (Omega_perp z_perp, z_perp)_r``."""
        zp = project_perp(z)
        return 0.5 * float(np.sum(self.omega * (zp.x ** 2 + zp.y ** 2)))


def omega_ops(ctx, z_S: TruncState) -> OmegaOps:
    """Frequency operators frozen at the tangential part of a state."""
    b = _backend_of(ctx)
    zs = project_S(z_S)
    I = (zs.x ** 2 + zs.y ** 2) / 2.0
    return OmegaOps(b.layout, I, np.asarray(b.freqs(I), float),
                    np.asarray(b.freq_jac(I), float))


# ---------------------------------------------------------------------------
# integrable pieces: slice energy and frozen normal energy
# ---------------------------------------------------------------------------

def slice_energy(ctx, z: TruncState) -> float:
    """Backend energy of the tangential torus through ``z``."""
    b = _backend_of(ctx)
    zs = project_S(z)
    return float(b.h_of_I((zs.x ** 2 + zs.y ** 2) / 2.0))


def _actions_vec(lay: ModeLayout, zvec: np.ndarray) -> np.ndarray:
    m = lay.n_modes
    return (zvec[:m] ** 2 + zvec[m:] ** 2) / 2.0


def _slice_grad_vec(b: BirkhoffBackend, lay: ModeLayout,
                    zvec: np.ndarray) -> np.ndarray:
    """Gradient of the slice energy in the tangential coordinates."""
    m, sd = lay.n_modes, lay.s_dirs
    zS = np.zeros(lay.dim)
    zS[sd] = zvec[sd]
    om = b.freqs(_actions_vec(lay, zS))
    g = np.zeros(lay.dim)
    g[sd] = om[sd % m] * zS[sd]
    return g


def _slice_hess(b: BirkhoffBackend, lay: ModeLayout,
                zvec: np.ndarray) -> np.ndarray:
    """Hessian of the slice energy in the tangential coordinates."""
    m, sd = lay.n_modes, lay.s_dirs
    zS = np.zeros(lay.dim)
    zS[sd] = zvec[sd]
    I = _actions_vec(lay, zS)
    om, jac = b.freqs(I), b.freq_jac(I)
    H = np.zeros((lay.dim, lay.dim))
    sdm = sd % m
    H[np.ix_(sd, sd)] = np.diag(om[sdm]) + \
        np.outer(zS[sd], zS[sd]) * jac[np.ix_(sdm, sdm)]
    return H


def _normal_energy_vec(b: BirkhoffBackend, lay: ModeLayout, zvec: np.ndarray):
    """Value and full gradient of the frozen normal energy.

    The frequencies are frozen at the actions of the argument's own
    tangential block, so the gradient carries a tangential part through the
    action dependence of the frequencies.
    """
    m, sd, pd = lay.n_modes, lay.s_dirs, lay.perp_dirs
    zS = np.zeros(lay.dim)
    zS[sd] = zvec[sd]
    zP = zvec.copy()
    zP[sd] = 0.0
    om, jac = b.freqs(_actions_vec(lay, zS)), b.freq_jac(_actions_vec(lay, zS))
    omp = om[pd % m]
    val = 0.5 * float(np.sum(omp * zvec[pd] ** 2))
    Iperp = _actions_vec(lay, zP)
    g = np.zeros(lay.dim)
    g[pd] = omp * zvec[pd]
    g[sd] = zvec[sd] * (jac[:, sd % m].T @ Iperp)
    return val, g


def normal_energy(ctx, z: TruncState) -> float:
    """Frozen-frequency quadratic energy of the normal block at ``z``."""
    b = _backend_of(ctx)
    return _normal_energy_vec(b, b.layout, z.vec())[0]


# ---------------------------------------------------------------------------
# order-three Taylor tail of the backend energy
# ---------------------------------------------------------------------------

def taylor_remainder_T31(ctx, z_S: TruncState, w: FieldPair,
                         nodes: int = 16, check: bool = False) -> float:
    """Order-three Taylor tail of the backend energy at a slice point.

    Computes ``1/2 integral_0^1 (1 - t)^2 d^3H(base + t w)[w, w, w] dt`` with
    ``base`` the image of the tangential part of ``z_S``, so that

        ``H(base + w) = H(base) + <grad H(base), w> +
        1/2 <d grad H(base) w, w> + (this tail)``

    holds exactly.  With ``check=True`` the rule is re-run with eight extra
    nodes; disagreement beyond ``1e-10`` of the result scale raises
    :class:`~nlscanon.forms.QuadratureError`.
    """
    b = _backend_of(ctx)
    lay = b.layout
    base = bk_eval(b, project_S(z_S))

    def rule(nn: int) -> float:
        ts, ws = _gauss01(nn)
        tot = 0.0
        for t, wq in zip(ts, ws):
            at = FieldPair(lay, base.u + t * w.u, base.v + t * w.v)
            tot += wq * 0.5 * (1.0 - t) ** 2 * b.ham_d3_cube(at, w)
        return tot

    val = rule(nodes)
    if check:
        again = rule(nodes + 8)
        if abs(val - again) > 1e-10 * (1.0 + abs(val)):
            raise QuadratureError(
                f"Taylor-tail quadrature drifts: {val:.3e} vs {again:.3e}")
    return float(val)


# ---------------------------------------------------------------------------
# curvature operators
# ---------------------------------------------------------------------------

def _rotation_dir(lay: ModeLayout, om: OmegaOps, zvec: np.ndarray) -> np.ndarray:
    """Tangential rotation direction: ``J`` applied to the frequency-scaled
    tangential coordinates."""
    sd = lay.s_dirs
    v = np.zeros(lay.dim)
    v[sd] = om.dir_values(sd) * zvec[sd]
    return j_matrix(lay) @ v


def _d_rotation_dir(lay: ModeLayout, om: OmegaOps, zvec: np.ndarray,
                    dir_idx: int) -> np.ndarray:
    """Derivative of the rotation direction in one tangential coordinate."""
    m, sd = lay.n_modes, lay.s_dirs
    dv = np.zeros(lay.dim)
    dv[dir_idx] = float(om.omega[dir_idx % m])
    dv[sd] += om.jac[sd % m, dir_idx % m] * zvec[dir_idx] * zvec[sd]
    return j_matrix(lay) @ dv


def _r1_pieces(b: BirkhoffBackend, zs: TruncState):
    """Curvature matrix on normal inputs plus the pack it came from.

    The matrix pairs the rotation-contracted mixed second derivatives of the
    coordinate map against its differential through the ambient structure.
    """
    lay = b.layout
    sd, pd = lay.s_dirs, lay.perp_dirs
    pk = b.pack(zs, level="dx")
    om = omega_ops(b, zs)
    P, BBJ = fun_pairing_matrix(lay), bbj_matrix(lay)
    v = _rotation_dir(lay, om, zs.vec())
    M2 = np.einsum("j,jwc->wc", v[sd], pk.T2[:, :, pd])
    R1 = _real_array(pk.P1.T @ (P @ (1j * (BBJ @ M2))), "curvature matrix")
    return R1, pk, om, v


def r1_operator(ctx, z_S: TruncState) -> LinOp:
    """Curvature operator coupling the tangential rotation to normal inputs.

    Acts on the normal block (tangential input columns are zero) and returns
    full sequence-side vectors.
    """
    b = _backend_of(ctx)
    lay = b.layout
    R1, _, _, _ = _r1_pieces(b, project_S(z_S))
    M = np.zeros((lay.dim, lay.dim))
    M[:, lay.perp_dirs] = R1
    return LinOp(lay, M, src="seq", tgt="seq")


def _coupling_value_grad(b: BirkhoffBackend, z: TruncState):
    """Value and full gradient of the quadratic coupling term.

    The term is half the pairing of the curvature operator at the state's
    tangential part against its own normal block.  One derivative pack
    supplies every contraction, including the third-derivative columns that
    make the tangential gradient exact.
    """
    lay = b.layout
    m, sd, pd = lay.n_modes, lay.s_dirs, lay.perp_dirs
    zvec = np.asarray(z.vec(), float)
    pk = b.pack(z, level="dx")
    om = omega_ops(b, z)
    P, BBJ = fun_pairing_matrix(lay), bbj_matrix(lay)
    zp = zvec[pd]
    v = _rotation_dir(lay, om, zvec)
    vs = v[sd]
    A = 1j * (BBJ @ (pk.q @ vs))
    Rz = _real_array(pk.P1.T @ (P @ A), "curvature contraction")
    val = 0.5 * float(Rz[pd] @ zp)
    M2 = np.einsum("j,jwc->wc", vs, pk.T2[:, :, pd])
    Rpp = _real_array((pk.P1.T @ (P @ (1j * (BBJ @ M2))))[pd, :],
                      "curvature matrix")
    g = np.zeros(lay.dim)
    g[pd] = 0.5 * (Rpp + Rpp.T) @ zp
    for ai, a in enumerate(map(int, sd)):
        dvs = _d_rotation_dir(lay, om, zvec, a)[sd]
        T3v = sum(vs[k] * pk.t3_col(a, int(sd[k])) for k in range(len(sd)))
        inner = 1j * (BBJ @ (T3v + pk.q @ dvs))
        dR = pk.T2[ai].T @ (P @ A) + pk.P1.T @ (P @ inner)
        dRp = _real_array(dR, "curvature derivative")[pd]
        g[a] = 0.5 * float(dRp @ zp)
    return val, g, (pk, om, Rz, Rpp)


def _d4_dir(b: BirkhoffBackend, w: FieldPair, avec: np.ndarray,
            h: float) -> np.ndarray:
    """Directional derivative of the quartic-part gradient's derivative.

    Exact convolution profiles for the literal energy; a five-point stencil
    of exact matrices otherwise (the stencil error sits far below the
    operator-identity tolerances).
    """
    lay = b.layout
    m = lay.n_modes
    au, av = avec[:m], avec[m:]
    if b.kind == "perturbative":
        Mtl = core.mult_matrix(4.0 * core.conv(w.v, av), m)
        Mtr = core.mult_matrix(4.0 * (core.conv(w.u, av) + core.conv(w.v, au)), m)
        Mbr = core.mult_matrix(4.0 * core.conv(w.u, au), m)
        return np.block([[Mtl, Mtr], [Mtr, Mbr]])

    def at(s: float) -> np.ndarray:
        return b.ham4_dgrad(FieldPair(lay, w.u + s * h * au, w.v + s * h * av))

    return (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h)


def _t3_slab(b: BirkhoffBackend, zs: TruncState) -> np.ndarray:
    """Third derivatives with two tangential slots and one normal basis slot.

    One pack per normal basis direction; the contracted columns are exactly
    linear in the contraction, so no scaling error enters.
    """
    lay = b.layout
    sd, pd = lay.s_dirs, lay.perp_dirs
    ns, npd = len(sd), len(pd)
    base = zs.vec()
    G = np.empty((ns, ns, lay.dim, npd), dtype=complex)
    for ci, c in enumerate(map(int, pd)):
        zc = base.copy()
        zc[c] += 1.0
        pkc = b.pack(TruncState.from_vec(lay, zc), level="dx")
        for ai, a in enumerate(map(int, sd)):
            for bi in range(ai, ns):
                col = pkc.t3_col(a, int(sd[bi]))
                G[ai, bi, :, ci] = col
                G[bi, ai, :, ci] = col
    return G


def r_xy_operators(ctx, z_S: TruncState, j: int,
                   fd_step: float = 1e-3) -> tuple[LinOp, LinOp]:
    """Per-direction quadratic-form operators of the normal-energy rate.

    For a tangential mode ``j`` the pair of operators (one per coordinate
    direction of the mode) collects: half the frequency derivative on the
    normal block, half the normal rows of the curvature-operator derivative,
    the derivative of the Hessian sandwich of the quartic part between
    normal differentials, the extra mixed-derivative sandwich, and the
    curvature feedback through the ambient structure.  Both operators act on
    the normal block and return normal vectors.
    """
    b = _backend_of(ctx)
    lay = b.layout
    if j not in lay.S:
        raise ValueError(f"mode {j} is not tangential")
    m, sd, pd = lay.n_modes, lay.s_dirs, lay.perp_dirs
    zs = project_S(z_S)
    zvec = zs.vec()
    R1, pk, om, v = _r1_pieces(b, zs)
    G3 = _t3_slab(b, zs)
    P, BBJ, Jm = fun_pairing_matrix(lay), bbj_matrix(lay), j_matrix(lay)
    vs = v[sd]
    M2 = np.einsum("j,jwc->wc", vs, pk.T2[:, :, pd])
    A0 = 1j * (BBJ @ M2)
    w0 = FieldPair.from_vec(lay, pk.w0)
    D4 = b.ham4_dgrad(w0)
    P1p = pk.P1[:, pd]
    D4P1p = D4 @ P1p
    feed = BBJ @ (pk.P1 @ (Jm @ R1))

    def one(dir_idx: int) -> np.ndarray:
        ai = int(np.flatnonzero(sd == dir_idx)[0])
        slab_p = pk.T2[ai][:, pd]
        # half the frequency derivative on the normal block
        dom = om.jac[pd % m, dir_idx % m] * zvec[dir_idx]
        T1 = 0.5 * np.diag(dom)
        # half the normal rows of the curvature-operator derivative
        dvs = _d_rotation_dir(lay, om, zvec, dir_idx)[sd]
        dM2 = np.einsum("k,kwc->wc", vs, G3[ai]) + \
            np.einsum("k,kwc->wc", dvs, pk.T2[:, :, pd])
        dR = pk.T2[ai].T @ (P @ A0) + pk.P1.T @ (P @ (1j * (BBJ @ dM2)))
        T2t = 0.5 * _real_array(dR, "curvature derivative")[pd, :]
        # bracket derivative of the Hessian sandwich, plus the mixed term
        a_mat = slab_p.T @ (P @ D4P1p)
        c_mat = P1p.T @ (P @ (D4 @ slab_p))
        b_mat = P1p.T @ (P @ (_d4_dir(b, w0, pk.P1[:, dir_idx], fd_step) @ P1p))
        T34 = -0.5 * (a_mat + b_mat + c_mat) + a_mat
        # curvature feedback through the ambient structure
        T5 = -1j * (slab_p.T @ (P @ feed))
        return _real_array(T1 + T2t + T34 + T5, "rate operator")

    ix = int(lay.index(j))
    out = []
    for dir_idx in (ix, m + ix):
        M = np.zeros((lay.dim, lay.dim))
        M[np.ix_(pd, pd)] = one(dir_idx)
        out.append(LinOp(lay, M, src="seq", tgt="seq"))
    return out[0], out[1]


def _rxy_contracted(b: BirkhoffBackend, z: TruncState) -> np.ndarray:
    """Quadratic-form values of the rate operators at the state's own normal
    part, one per tangential coordinate direction.

    The Hessian sandwiches of the bracket derivative cancel against the
    mixed term when both slots carry the same vector, leaving half a cubed
    third derivative; everything else is shared with the coupling gradient.
    """
    lay = b.layout
    sd = lay.s_dirs
    zvec = np.asarray(z.vec(), float)
    _, g, (pk, _om, Rz, _rpp) = _coupling_value_grad(b, z)
    _, gn = _normal_energy_vec(b, lay, zvec)
    P, BBJ, Jm = fun_pairing_matrix(lay), bbj_matrix(lay), j_matrix(lay)
    w0 = FieldPair.from_vec(lay, pk.w0)
    feed = P @ (BBJ @ (pk.P1 @ (Jm @ Rz)))

    def cube(x: FieldPair) -> float:
        return b.ham_d3_cube(w0, x)

    out = np.zeros(len(sd))
    for ai, a in enumerate(map(int, sd)):
        avec = pk.P1[:, a]
        plus = FieldPair.from_vec(lay, pk.mperp + avec)
        minus = FieldPair.from_vec(lay, pk.mperp - avec)
        d3 = (cube(plus) - cube(minus)
              - 2.0 * cube(FieldPair.from_vec(lay, avec))) / 6.0
        t5 = -1j * (pk.q[:, ai] @ feed)
        out[ai] = gn[a] + g[a] - 0.5 * d3 + _real(t5, abs(t5), "feedback")
    return out


# ---------------------------------------------------------------------------
# the transformed energy and its remainder
# ---------------------------------------------------------------------------

def transformed_h(ctx, z: TruncState, check: bool | None = None) -> float:
    """Backend energy composed with the full chart."""
    ctx = _corrector_of(ctx)
    return float(ctx.backend.ham_value(psi_full(ctx, z, check=check)))


def p3(ctx, z: TruncState, check: bool | None = None) -> float:
    """Order-three remainder of the transformed energy.

    Subtracts the slice energy and the frozen normal energy from the
    transformed energy; with the corrector in the chart the result is cubic
    in the normal block.
    """
    ctx = _corrector_of(ctx)
    b = ctx.backend
    om = omega_ops(b, z)
    return transformed_h(ctx, z, check=check) - slice_energy(b, z) \
        - om.normal_value(z)


def grad_p3(ctx, z: TruncState) -> TruncState:
    """Gradient of the order-three remainder (chain rule, no differencing)."""
    ctx = _corrector_of(ctx)
    b = ctx.backend
    lay = b.layout
    T = d_psi_full(ctx, z)
    gH = b.ham_grad(psi_full(ctx, z))
    pulled = _real_array(T.mat.T @ (fun_pairing_matrix(lay) @ gH.vec()),
                         "pulled gradient")
    zvec = z.vec()
    gi = _slice_grad_vec(b, lay, zvec) + _normal_energy_vec(b, lay, zvec)[1]
    return TruncState.from_vec(lay, pulled - gi)


def normal_energy_rate(ctx, z: TruncState, tau: float,
                       structured: bool = False) -> float:
    """Rate of the frozen normal energy along the corrector path.

    The default pairs the energy gradient with the path field directly.
    With ``structured=True`` the normal part of the pairing is replaced by
    the per-direction quadratic forms weighted by the tangential field
    components and the path parameter; the two agree where the backend's
    coordinates conjugate the energy exactly.
    """
    ctx = _corrector_of(ctx)
    b = ctx.backend
    lay = b.layout
    zvec = np.asarray(z.vec(), float)
    _, g = _normal_energy_vec(b, lay, zvec)
    X = _x_at(ctx, zvec, float(tau))
    if not structured:
        return float(g @ X)
    sd = lay.s_dirs
    forms = _rxy_contracted(b, z)
    return float(g[sd] @ X[sd] - float(tau) * (forms @ X[sd]))


@dataclass(frozen=True)
class P3Terms:
    """Term-by-term split of the order-three remainder.

    ``slice_tail``: tail of the slice energy beyond its linear correction;
    ``normal_shift``: change of the frozen normal energy under the corrector;
    ``coupling_shift``: change of the quadratic coupling under the corrector;
    ``cubic_tail``: order-three Taylor tail of the energy at the corrected
    state, composed with the chart's normal differential.
    """

    slice_tail: float
    normal_shift: float
    coupling_shift: float
    cubic_tail: float

    @property
    def total(self) -> float:
        return self.slice_tail + self.normal_shift + self.coupling_shift \
            + self.cubic_tail


def p3_terms(ctx, z: TruncState, nodes: int = 16,
             check: bool | None = None) -> P3Terms:
    """Decompose the order-three remainder along the corrector mechanisms.

    The four terms sum, together with the quadratic chart term, to the
    transformed energy minus its integrable part; the quadratic term itself
    vanishes identically, which :func:`p2_residual` quantifies.
    """
    ctx = _corrector_of(ctx)
    b = ctx.backend
    lay = b.layout
    sd = lay.s_dirs
    zvec = np.asarray(z.vec(), float)
    ts, ws = _gauss01(nodes)

    zc = psi_c(ctx, z, check=check)
    bc_vec = zc.vec() - zvec
    _, e = _le_at(ctx, zvec)
    b2 = -(j_matrix(lay) @ e)
    b3 = bc_vec - b2

    # tail of the slice energy beyond its linear correction
    gs = _slice_grad_vec(b, lay, zvec)
    pB = np.zeros(lay.dim)
    pB[sd] = bc_vec[sd]
    zS = np.zeros(lay.dim)
    zS[sd] = zvec[sd]
    acc = 0.0
    for t, wq in zip(ts, ws):
        H = _slice_hess(b, lay, zS + t * pB)
        acc += wq * (1.0 - t) * float(pB @ (H @ pB))
    slice_tail = float(gs @ b3) + acc

    # change of the frozen normal energy along the path
    acc = 0.0
    for t, wq in zip(ts, ws):
        zt = flow(ctx, z, 0.0, float(t), check=check)
        _, g = _normal_energy_vec(b, lay, zt.vec())
        acc += wq * float(g @ _x_at(ctx, zt.vec(), float(t)))
    normal_shift = acc

    # change of the quadratic coupling along the chord
    acc = 0.0
    for t, wq in zip(ts, ws):
        y = TruncState.from_vec(lay, zvec + t * bc_vec)
        _, g, _ = _coupling_value_grad(b, y)
        acc += wq * float(g @ bc_vec)
    coupling_shift = acc

    # order-three energy tail at the corrected state
    pk = b.pack(zc, level="x")
    cubic_tail = taylor_remainder_T31(b, zc, FieldPair.from_vec(lay, pk.mperp),
                                      nodes=nodes)
    return P3Terms(slice_tail, normal_shift, coupling_shift, cubic_tail)


def _perp_coupling_matrix(b: BirkhoffBackend, zs: TruncState) -> np.ndarray:
    """Normal block of the chart-pulled energy Hessian minus the frequency
    diagonal, from the literal route.

    Where the backend's coordinates conjugate the energy exactly this equals
    the normal block of the curvature operator; the difference measures the
    conjugation defect, which the quadratic-term residual is meant to expose.
    """
    lay = b.layout
    pd = lay.perp_dirs
    pk = b.pack(project_S(zs), level="p1")
    D = b.ham_dgrad(FieldPair.from_vec(lay, pk.w0))
    sandwich = pk.P1.T @ (fun_pairing_matrix(lay) @ (D @ pk.P1))
    om = omega_ops(b, zs)
    S = _real_array(sandwich[np.ix_(pd, pd)], "pulled Hessian")
    return S - np.diag(om.dir_values(pd))


def _p2_value(ctx: CorrectorContext, z: TruncState,
              coupling_pp: np.ndarray | None = None) -> float:
    """Quadratic chart term: slice gradient against the quadratic corrector
    displacement, plus the quadratic coupling from the literal route.
    Vanishes identically where the backend's coordinates conjugate the
    energy exactly."""
    b = ctx.backend
    lay = b.layout
    pd = lay.perp_dirs
    zvec = np.asarray(z.vec(), float)
    gs = _slice_grad_vec(b, lay, zvec)
    if coupling_pp is None:
        coupling_pp = _perp_coupling_matrix(b, project_S(z))
    _, e = _le_at(ctx, zvec)
    b2 = -(j_matrix(lay) @ e)
    zp = zvec[pd]
    return float(gs @ b2) + 0.5 * float(zp @ (coupling_pp @ zp))


def p2_residual(ctx, z_S: TruncState, step: float | None = None) -> float:
    """Norm of the normal Hessian of the quadratic chart term at a slice point.

    The term pairs the slice-energy gradient with the quadratic part of the
    corrector displacement and adds the quadratic coupling; it is exactly
    quadratic in the normal block, so the second differences used here are
    exact up to roundoff.  The construction makes the term vanish; the
    returned norm measures how well the backend honours that cancellation.
    """
    ctx = _corrector_of(ctx)
    b = ctx.backend
    lay = b.layout
    pd = lay.perp_dirs
    zs = project_S(z_S)
    zsvec = zs.vec()
    h = float(step) if step is not None else 0.3 * ctx.delta_c
    coupling_pp = _perp_coupling_matrix(b, zs)

    def quad_term(zp: np.ndarray) -> float:
        zv = zsvec.copy()
        zv[pd] += zp
        return _p2_value(ctx, TruncState.from_vec(lay, zv), coupling_pp)

    npd = len(pd)
    H = np.zeros((npd, npd))
    for a in range(npd):
        ea = np.zeros(npd)
        ea[a] = 1.0
        H[a, a] = 2.0 * quad_term(h * ea) / h ** 2
        for c in range(a + 1, npd):
            ec = np.zeros(npd)
            ec[c] = 1.0
            H[a, c] = H[c, a] = (quad_term(h * (ea + ec))
                                 - quad_term(h * (ea - ec))) / (2.0 * h ** 2)
    return float(np.linalg.norm(H, 2))


# ---------------------------------------------------------------------------
# Floquet solutions along torus orbits
# ---------------------------------------------------------------------------

def _angles(omega: np.ndarray, t: float) -> np.ndarray:
    """Rotation angles ``omega * t`` reduced mod 2 pi in extended precision.

    Large phases (frequencies ~N^2 over long periods) lose absolute accuracy
    in double products, which the centered time differencing then amplifies
    by the reciprocal step; the extended-precision reduction removes that.
    """
    theta = np.asarray(omega, np.longdouble) * np.longdouble(t)
    return np.mod(theta, 2.0 * np.longdouble(np.pi)).astype(float)


def _rotated(lay: ModeLayout, om: OmegaOps, zs_vec: np.ndarray,
             t: float) -> np.ndarray:
    """Torus rotation: the flow of the frequency-scaled rotation field."""
    m = lay.n_modes
    x, y = zs_vec[:m], zs_vec[m:]
    th = _angles(om.omega, t)
    c, s = np.cos(th), np.sin(th)
    return np.concatenate([x * c - y * s, x * s + y * c])


def floquet(ctx, z_S: TruncState, j: int, sign: int, t: float) -> FieldPair:
    """Floquet solution of the field equation linearized along a torus orbit.

    The complex datum pairs the two coordinate directions of the normal mode
    ``j``; the phase carries the frozen frequency of that mode with the
    requested sign.  In this package's coordinate conventions the ``+``
    branch is supported on the second field component at the origin, so the
    datum combines the directions with a negative relative phase.
    """
    b = _backend_of(ctx)
    lay = b.layout
    m = lay.n_modes
    if int(sign) not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if j not in lay.S_perp:
        raise ValueError(f"mode {j} is not normal")
    zs = project_S(z_S)
    om = omega_ops(b, zs)
    ix = int(lay.index(j))
    omj = float(om.omega[ix])
    zt = TruncState.from_vec(lay, _rotated(lay, om, zs.vec(), float(t)))
    datum = np.zeros(lay.dim, dtype=complex)
    datum[ix] = 1.0 / _SQRT2
    datum[m + ix] = -int(sign) * 1j / _SQRT2
    wv = bk_diff(b, zt).mat @ datum
    theta = float(_angles(np.array([omj]), float(t))[0])
    return FieldPair.from_vec(lay, np.exp(int(sign) * 1j * theta) * wv)


def floquet_residual(ctx, z_S: TruncState, j: int, sign: int, grid) -> float:
    """Largest field-equation defect of a Floquet solution on a time grid.

    The time derivative uses a five-point stencil with a step tied to the
    mode frequency; the right-hand side applies the ambient structure to the
    energy Hessian along the orbit.  An integer grid spans one period of the
    slowest tangential frequency.
    """
    b = _backend_of(ctx)
    lay = b.layout
    zs = project_S(z_S)
    om = omega_ops(b, zs)
    omj = float(om.omega[int(lay.index(j))])
    if np.isscalar(grid):
        ws = np.abs(om.dir_values(lay.s_dirs))
        ws = ws[ws > 1e-12]
        period = 2.0 * np.pi / float(ws.min()) if ws.size \
            else 2.0 * np.pi / max(abs(omj), 1.0)
        tgrid = np.linspace(0.0, period, int(grid), endpoint=False)
    else:
        tgrid = np.asarray(grid, dtype=float)
    # Snapping the stencil step to a power of two keeps the sample times
    # t + k*h exact in floating point; otherwise rounding of the time stamps
    # feeds phase noise of size ulp(t) * |omega| into the difference quotient,
    # where the reciprocal step amplifies it past the oscillatory truncation.
    h = 2.0 ** round(np.log2(3e-4 / (1.0 + abs(omj)) ** 1.25))
    BBJ = bbj_matrix(lay)
    worst = 0.0
    for t in tgrid:
        t = float(t)
        wh = [floquet(b, zs, j, sign, t + k * h).vec()
              for k in (-2.0, -1.0, 1.0, 2.0)]
        wdot = (8.0 * (wh[2] - wh[1]) - (wh[3] - wh[0])) / (12.0 * h)
        wc = floquet(b, zs, j, sign, t)
        w0 = bk_eval(b, TruncState.from_vec(lay, _rotated(lay, om, zs.vec(), t)))
        rhs = 1j * (BBJ @ (b.ham_dgrad(w0) @ wc.vec()))
        worst = max(worst, FieldPair.from_vec(lay, wdot - rhs).sobolev(0))
    return float(worst)

"""Dirichlet spectrum of the Zakharov-Shabat operator, and linearized-map columns.

For a truncated potential ``u(x) = sum u_n e^{2 pi i n x}`` on the unit circle
the first-order system

    F' = A(x, lambda) F,      A = [[-i lambda, i u], [-i conj(u), i lambda]],

is the eigenvalue equation ``L F = lambda F`` of the operator
``L = [[i d/dx, u], [conj(u), -i d/dx]]`` acting on two-component functions.
Everything here is built from the transfer matrix ``M(x, lambda)`` with
``M(0) = Id``: since ``A`` is trace free, ``det M = 1`` identically, and that
identity doubles as an integrator diagnostic.

Dirichlet eigenvalues are the zeros of the boundary mismatch

    chi(lambda) = (M11 + M12)(1) - (M21 + M22)(1),

i.e. the first-minus-second component at ``x = 1`` of the solution ``G`` with
``G(0) = (1, 1)``; both components agree at both endpoints exactly at an
eigenvalue.  On the real subspace (``v = conj(u)``) the second row of ``M`` is
the conjugate mirror of the first, so ``chi`` is purely imaginary for real
``lambda`` and the real scalar ``Im chi`` is a bracketing-friendly root
function.  At ``u = 0`` it is ``-2 sin(lambda)`` with roots ``j pi``.

Each eigenvalue carries an orthonormal solution pair: ``H`` is the normalized
Dirichlet eigenfunction ``G / ||G||`` and ``K`` the companion solution at the
same eigenvalue, orthogonal to ``H`` in L2 and oriented by
``-i (K_1(0) - K_2(0)) > 0``.  Squares of the combinations ``K +- i H`` give
the gradient fields of the two conjugate spectral coordinates attached to the
mode, and those assemble into the columns of the linearized coordinate map on
the normal directions.

The integrator is fixed-step classical Runge-Kutta on a uniform grid that
resolves the potential (at least ``8 N`` intervals); the potential, a
trigonometric polynomial, is evaluated exactly at the half-step ladder.  L2
norms and inner products use trapezoidal quadrature on the same grid.
Eigenfunction samples extend a few steps beyond ``[0, 1]`` (the coefficients
are periodic, the solutions are not) so that the eigen-residual can be formed
with a centered sixth-order difference everywhere on the core grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .phase_space import FieldPair, ModeLayout, fourier_eval_matrix

__all__ = [
    "BracketingWarning",
    "DegenerateEigenbasis",
    "DirichletData",
    "RefinementFailure",
    "ZSPotential",
    "dirichlet_eigenfunctions",
    "dirichlet_eigenvalue_near",
    "dirichlet_eigenvalues",
    "dirichlet_mismatch",
    "dpsi_nls_columns",
    "eigen_residual",
    "fundamental_solution",
    "grad_frak_z",
]

#: scan spacing for eigenvalue bracketing; eigenvalues of nearby potentials
#: sit within O(||u||) of the lattice ``j pi``, so an eighth of ``pi`` cannot
#: step over a root pair of the sine-like mismatch.
_SCAN_STEP = math.pi / 8.0

#: target for the polished mismatch magnitude at a reported eigenvalue.
_ROOT_TOL = 1e-11


class RefinementFailure(RuntimeError):
    """Transfer-matrix integration disagrees with its half-step refinement."""


class DegenerateEigenbasis(RuntimeError):
    """The two-dimensional solution space collapsed under normalization."""


class BracketingWarning(UserWarning):
    """A bracketed sign change could not be polished to the root tolerance."""


# ---------------------------------------------------------------------------
# potential
# ---------------------------------------------------------------------------


@dataclass
class ZSPotential:
    """Truncated potential of the Zakharov-Shabat system.

    Only the ``u`` coefficients on the mode window are stored; the second
    component of the induced pair is always the complex conjugate function,
    ``v_n = conj(u_{-n})``, so the pair lies on the real subspace by
    construction.
    """

    layout: ModeLayout
    u: np.ndarray

    def __post_init__(self):
        u = np.asarray(self.u, complex)
        if u.shape != (self.layout.n_modes,):
            raise ValueError(
                f"expected {self.layout.n_modes} coefficients for modes "
                f"[-{self.layout.N}, {self.layout.N}], got shape {u.shape}"
            )
        self.u = u.copy()

    @classmethod
    def from_pair(cls, pair: FieldPair, tol: float = 1e-8) -> "ZSPotential":
        """Adopt the ``u`` component of a real-subspace pair.

        Raises ``ValueError`` when the pair strays from the real subspace by
        more than ``tol``, since the conjugate component would silently be
        replaced.
        """
        defect = float(np.max(np.abs(pair.v - np.conj(pair.u[::-1]))))
        if defect > tol:
            raise ValueError(
                f"pair is off the real subspace by {defect:.3e} (tol {tol:.1e})"
            )
        return cls(pair.layout, pair.u)

    def pair(self) -> FieldPair:
        """The induced real-subspace pair ``(u, conj(u))``."""
        return FieldPair.from_u(self.layout, self.u)

    def to_json(self) -> str:
        return self.pair().to_json()

    @classmethod
    def from_json(cls, text: str) -> "ZSPotential":
        return cls.from_pair(FieldPair.from_json(text))


def _default_steps(p: ZSPotential) -> int:
    # 8N resolves the potential; the larger floor keeps the fourth-order
    # integrator's local defect (~ lambda^5 h^4 / 120) below the 1e-8
    # eigen-residual budget for the moderate eigenvalue windows in use.
    return max(1024, 8 * p.layout.N)


def _check_steps(p: ZSPotential, n_steps: int | None) -> int:
    if n_steps is None:
        return _default_steps(p)
    n = int(n_steps)
    if n < 8 * p.layout.N:
        raise ValueError(f"grid of {n} intervals does not resolve 2N = {2 * p.layout.N} modes")
    return n


def _eval_u(p: ZSPotential, xs: np.ndarray) -> np.ndarray:
    """Exact samples of the trigonometric polynomial ``u`` at arbitrary points."""
    phases = np.exp(2j * np.pi * np.outer(xs, p.layout.modes))
    return phases @ p.u


# ---------------------------------------------------------------------------
# transfer matrix
# ---------------------------------------------------------------------------


def _rhs(a: np.ndarray, u: complex, z: np.ndarray) -> np.ndarray:
    # z columns: m11, m12, m21, m22 [, d11, d12, d21, d22] with a = -i lambda.
    b = 1j * u
    c = -1j * np.conj(u)
    out = np.empty_like(z)
    m11, m12, m21, m22 = z[:, 0], z[:, 1], z[:, 2], z[:, 3]
    out[:, 0] = a * m11 + b * m21
    out[:, 1] = a * m12 + b * m22
    out[:, 2] = c * m11 - a * m21
    out[:, 3] = c * m12 - a * m22
    if z.shape[1] == 8:
        d11, d12, d21, d22 = z[:, 4], z[:, 5], z[:, 6], z[:, 7]
        out[:, 4] = a * d11 + b * d21 - 1j * m11
        out[:, 5] = a * d12 + b * d22 - 1j * m12
        out[:, 6] = c * d11 - a * d21 + 1j * m21
        out[:, 7] = c * d12 - a * d22 + 1j * m22
    return out


def _propagate(
    p: ZSPotential,
    lams: np.ndarray,
    n_steps: int,
    *,
    pad_lo: int = 0,
    pad_hi: int = 0,
    with_dlam: bool = False,
    store_path: bool = False,
):
    """March the transfer matrix across ``[-pad_lo*h, 1 + pad_hi*h]``.

    Vectorized over the spectral parameter.  With ``with_dlam`` the first
    variation in ``lambda`` is integrated jointly (exact derivative of the
    discrete map); padding and the variational block are mutually exclusive
    because renormalizing the padded start to ``M(0) = Id`` would mix them.
    Returns the endpoint state ``(L, c)`` or, when storing, the pair
    ``(xs, states)`` with states of shape ``(K + 1, L, c)``.
    """
    if with_dlam and (pad_lo or pad_hi):
        raise ValueError("variational block and grid padding are exclusive")
    lam = np.atleast_1d(np.asarray(lams, complex))
    n = int(n_steps)
    h = 1.0 / n
    k_total = n + pad_lo + pad_hi
    half_xs = (np.arange(2 * k_total + 1) - 2 * pad_lo) * (0.5 * h)
    u_half = _eval_u(p, half_xs)

    ncols = 8 if with_dlam else 4
    z = np.zeros((lam.size, ncols), complex)
    z[:, 0] = 1.0
    z[:, 3] = 1.0
    a = -1j * lam

    path = None
    if store_path:
        path = np.empty((k_total + 1, lam.size, ncols), complex)
        path[0] = z

    sixth = h / 6.0
    for k in range(k_total):
        u0 = u_half[2 * k]
        um = u_half[2 * k + 1]
        u1 = u_half[2 * k + 2]
        s1 = _rhs(a, u0, z)
        s2 = _rhs(a, um, z + (0.5 * h) * s1)
        s3 = _rhs(a, um, z + (0.5 * h) * s2)
        s4 = _rhs(a, u1, z + h * s3)
        z = z + sixth * (s1 + 2.0 * s2 + 2.0 * s3 + s4)
        if store_path:
            path[k + 1] = z

    if not store_path:
        return z

    if pad_lo or pad_hi:
        # renormalize so that the sample at x = 0 is the identity
        z0 = path[pad_lo]
        det = z0[:, 0] * z0[:, 3] - z0[:, 1] * z0[:, 2]
        inv = np.empty_like(z0)
        inv[:, 0] = z0[:, 3] / det
        inv[:, 1] = -z0[:, 1] / det
        inv[:, 2] = -z0[:, 2] / det
        inv[:, 3] = z0[:, 0] / det
        out = np.empty_like(path)
        out[:, :, 0] = path[:, :, 0] * inv[:, 0] + path[:, :, 1] * inv[:, 2]
        out[:, :, 1] = path[:, :, 0] * inv[:, 1] + path[:, :, 1] * inv[:, 3]
        out[:, :, 2] = path[:, :, 2] * inv[:, 0] + path[:, :, 3] * inv[:, 2]
        out[:, :, 3] = path[:, :, 2] * inv[:, 1] + path[:, :, 3] * inv[:, 3]
        path = out

    xs = (np.arange(k_total + 1) - pad_lo) * h
    return xs, path


def fundamental_solution(
    p: ZSPotential,
    lam: float | complex,
    n_steps: int | None = None,
    *,
    check: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Transfer matrix ``M(x_k, lambda)`` on the uniform grid ``x_k = k / n``.

    Returns ``(xs, M)`` with ``M`` of shape ``(n + 1, 2, 2)`` and
    ``M[0] = Id``.  With ``check`` the endpoint is recomputed on the doubled
    grid and a relative disagreement beyond ``1e-8`` raises
    :class:`RefinementFailure`; that certifies the step size for the given
    ``lambda`` (large ``|lambda|`` needs more than the default resolution).
    """
    n = _check_steps(p, n_steps)
    xs, states = _propagate(p, np.array([lam]), n, store_path=True)
    M = states[:, 0, :].reshape(-1, 2, 2)
    if check:
        fine = _propagate(p, np.array([lam]), 2 * n)[0].reshape(2, 2)
        gap = float(np.max(np.abs(fine - M[-1])))
        scale = max(1.0, float(np.max(np.abs(fine))))
        if gap > 1e-8 * scale:
            raise RefinementFailure(
                f"halving the step moved the endpoint by {gap:.3e} "
                f"(n={n}, lambda={lam}); increase n_steps"
            )
    return xs, M


def dirichlet_mismatch(
    p: ZSPotential,
    lam,
    n_steps: int | None = None,
):
    """Boundary mismatch ``chi(lambda)`` whose zeros are Dirichlet eigenvalues.

    Vectorized over ``lam``; purely imaginary for real ``lam`` because the
    potential pair lies on the real subspace.
    """
    n = _check_steps(p, n_steps)
    arr = np.atleast_1d(np.asarray(lam, complex))
    z = _propagate(p, arr, n)
    chi = z[:, 0] + z[:, 1] - z[:, 2] - z[:, 3]
    return chi if np.ndim(lam) else complex(chi[0])


def _mismatch_and_slope(p: ZSPotential, lam: np.ndarray, n: int):
    z = _propagate(p, lam, n, with_dlam=True)
    chi = z[:, 0] + z[:, 1] - z[:, 2] - z[:, 3]
    dchi = z[:, 4] + z[:, 5] - z[:, 6] - z[:, 7]
    return chi, dchi


def dirichlet_eigenvalues(
    p: ZSPotential,
    window: tuple[float, float],
    n_steps: int | None = None,
) -> np.ndarray:
    """All Dirichlet eigenvalues in a real window, sorted.

    Scans the window at spacing ``pi / 8``, brackets sign changes of the
    imaginary part of the mismatch, bisects, and Newton-polishes with the
    exact variational slope until ``|chi| <= 1e-11``; Newton steps that leave
    their bracket fall back to bisection.  A bracket that fails to polish is
    reported through :class:`BracketingWarning` and omitted rather than
    returned as a bogus eigenvalue.
    """
    lo, hi = float(window[0]), float(window[1])
    if not lo < hi:
        raise ValueError(f"empty window ({lo}, {hi})")
    n = _check_steps(p, n_steps)

    m_seg = max(1, math.ceil((hi - lo) / _SCAN_STEP))
    nodes = np.linspace(lo, hi, m_seg + 1)
    r = dirichlet_mismatch(p, nodes, n).imag
    ztol = _ROOT_TOL * max(1.0, float(np.max(np.abs(r))))
    on_node = np.abs(r) <= ztol

    roots = [float(x) for x in nodes[on_node]]
    a_list, b_list = [], []
    for k in range(m_seg):
        if on_node[k] or on_node[k + 1]:
            continue
        if r[k] * r[k + 1] < 0.0:
            a_list.append(nodes[k])
            b_list.append(nodes[k + 1])

    if a_list:
        a = np.array(a_list)
        b = np.array(b_list)
        ra = dirichlet_mismatch(p, a, n).imag
        for _ in range(16):
            mid = 0.5 * (a + b)
            rm = dirichlet_mismatch(p, mid, n).imag
            go_left = ra * rm <= 0.0
            b = np.where(go_left, mid, b)
            a = np.where(go_left, a, mid)
            ra = np.where(go_left, ra, rm)

        lam = 0.5 * (a + b)
        chi, dchi = _mismatch_and_slope(p, lam, n)
        for _ in range(6):
            if np.max(np.abs(chi)) <= _ROOT_TOL:
                break
            step = np.where(dchi.imag != 0.0, chi.imag / np.where(dchi.imag == 0.0, 1.0, dchi.imag), 0.0)
            cand = lam - step
            outside = ~np.isfinite(cand) | (cand <= a) | (cand >= b)
            cand = np.where(outside, 0.5 * (a + b), cand)
            rc_full, dchi = _mismatch_and_slope(p, cand, n)
            rc = rc_full.imag
            go_left = ra * rc <= 0.0
            b = np.where(go_left, cand, b)
            a = np.where(go_left, a, cand)
            ra = np.where(go_left, ra, rc)
            lam, chi = cand, rc_full

        good = np.abs(chi) <= 10.0 * _ROOT_TOL
        for lam_k, ok in zip(lam, good):
            if ok:
                roots.append(float(lam_k))
            else:
                warnings.warn(
                    f"sign change near {lam_k:.6f} did not polish below "
                    f"{10.0 * _ROOT_TOL:.0e}; dropped",
                    BracketingWarning,
                )

    roots.sort()
    kept: list[float] = []
    for x in roots:
        if not kept or x - kept[-1] > 1e-9:
            kept.append(x)
    return np.array(kept)


def dirichlet_eigenvalue_near(
    p: ZSPotential,
    j: int,
    n_steps: int | None = None,
) -> float:
    """The single Dirichlet eigenvalue in ``(j pi - pi/2, j pi + pi/2)``.

    For the small potentials this module targets, each such window holds
    exactly one eigenvalue, anchored near its zero-potential position
    ``j pi``; any other count is reported as an error.
    """
    center = j * math.pi
    mus = dirichlet_eigenvalues(p, (center - 0.5 * math.pi, center + 0.5 * math.pi), n_steps)
    if mus.size != 1:
        raise RuntimeError(
            f"expected one Dirichlet eigenvalue near mode {j}, found {mus.size}"
        )
    return float(mus[0])


# ---------------------------------------------------------------------------
# eigenfunction pair
# ---------------------------------------------------------------------------

#: extra integration steps kept on each side of [0, 1] for the residual stencil.
_PAD = 3

#: centered sixth-order first-derivative stencil (divided by 60 h).
_D6 = np.array([-1.0, 9.0, -45.0, 0.0, 45.0, -9.0, 1.0]) / 60.0


@dataclass
class DirichletData:
    """Orthonormal solution pair at a Dirichlet eigenvalue.

    ``h`` is the normalized eigenfunction (first-equals-second component at
    both endpoints); ``k`` is the companion solution of the same equation,
    L2-orthogonal to ``h`` and oriented so that ``-i (k_1(0) - k_2(0)) > 0``.
    Both are sampled on the core grid ``x``; the underscore fields carry the
    same solutions a few steps past the ends for stencil work.
    """

    mu: float
    x: np.ndarray = field(repr=False)
    h: np.ndarray = field(repr=False)
    k: np.ndarray = field(repr=False)
    _x_ext: np.ndarray = field(repr=False)
    _h_ext: np.ndarray = field(repr=False)
    _k_ext: np.ndarray = field(repr=False)


def _trap_inner(f: np.ndarray, g: np.ndarray, h: float) -> complex:
    vals = f[0] * np.conj(g[0]) + f[1] * np.conj(g[1])
    return complex(np.trapezoid(vals, dx=h))


def dirichlet_eigenfunctions(
    p: ZSPotential,
    mu: float,
    n_steps: int | None = None,
) -> DirichletData:
    """Build the orthonormal pair ``(H, K)`` at the eigenvalue ``mu``.

    ``H`` is ``M1 + M2`` normalized in the trapezoidal L2 norm on the grid;
    ``K`` comes from Gram-Schmidt applied to ``M1 - M2`` against ``H`` with
    the phase fixed by the orientation condition.  A normalizer or orthogonal
    complement smaller than ``1e-8`` of the pointwise scale raises
    :class:`DegenerateEigenbasis`.  Orthonormality of the result is
    re-measured after construction and must hold to ``1e-9``.
    """
    n = _check_steps(p, n_steps)
    xs, states = _propagate(
        p, np.array([complex(mu)]), n, pad_lo=_PAD, pad_hi=_PAD, store_path=True
    )
    st = states[:, 0, :]  # (K+1, 4) columns m11, m12, m21, m22
    G_ext = np.stack([st[:, 0] + st[:, 1], st[:, 2] + st[:, 3]])  # (2, K+1)
    D_ext = np.stack([st[:, 0] - st[:, 1], st[:, 2] - st[:, 3]])

    core = slice(_PAD, _PAD + n + 1)
    hstep = 1.0 / n
    G, D = G_ext[:, core], D_ext[:, core]
    scale = float(np.max(np.abs(G)) + np.max(np.abs(D)))

    g_norm = math.sqrt(_trap_inner(G, G, hstep).real)
    if g_norm <= 1e-8 * scale:
        raise DegenerateEigenbasis(f"eigenfunction normalizer {g_norm:.3e} is near zero")
    H, H_ext = G / g_norm, G_ext / g_norm

    proj = _trap_inner(D, H, hstep)
    Kt, Kt_ext = D - proj * H, D_ext - proj * H_ext
    k_norm = math.sqrt(_trap_inner(Kt, Kt, hstep).real)
    if k_norm <= 1e-8 * scale:
        raise DegenerateEigenbasis(f"orthogonal complement {k_norm:.3e} is near zero")
    Kh, Kh_ext = Kt / k_norm, Kt_ext / k_norm

    w = -1j * (Kh[0, 0] - Kh[1, 0])
    if abs(w) <= 1e-10:
        raise DegenerateEigenbasis("orientation -i (K_1(0) - K_2(0)) is undetermined")
    phase = w / abs(w)
    K, K_ext = Kh / phase, Kh_ext / phase

    checks = (
        abs(_trap_inner(H, H, hstep) - 1.0),
        abs(_trap_inner(K, K, hstep) - 1.0),
        abs(_trap_inner(K, H, hstep)),
        max(0.0, -(-1j * (K[0, 0] - K[1, 0])).real) + abs((-1j * (K[0, 0] - K[1, 0])).imag),
    )
    if max(checks) > 1e-9:
        raise DegenerateEigenbasis(f"orthonormalization defect {max(checks):.3e}")

    x_ext = xs
    return DirichletData(
        mu=float(mu), x=xs[core], h=H, k=K, _x_ext=x_ext, _h_ext=H_ext, _k_ext=K_ext
    )


def _stencil_diff(f_ext: np.ndarray, hstep: float) -> np.ndarray:
    # f_ext: (2, n + 1 + 2 PAD) -> sixth-order d/dx on the core (2, n + 1)
    out = np.zeros((2, f_ext.shape[1] - 2 * _PAD), complex)
    for m, c in enumerate(_D6):
        if c == 0.0:
            continue
        sl = f_ext[:, m : f_ext.shape[1] - 2 * _PAD + m]
        out += c * sl
    return out / hstep


def eigen_residual(p: ZSPotential, data: DirichletData) -> float:
    """L2 residual ``max(||L F - mu F||)`` over the stored pair ``F in {H, K}``.

    The derivative is formed from the extended samples with a centered
    sixth-order stencil, so the result measures how well the samples solve
    the differential equation rather than echoing the integrator's own
    right-hand side.
    """
    hstep = float(data.x[1] - data.x[0])
    u = _eval_u(p, data.x)
    ub = np.conj(u)
    worst = 0.0
    for f, f_ext in ((data.h, data._h_ext), (data.k, data._k_ext)):
        df = _stencil_diff(f_ext, hstep)
        r1 = 1j * df[0] + u * f[1] - data.mu * f[0]
        r2 = -1j * df[1] + ub * f[0] - data.mu * f[1]
        res = math.sqrt(float(np.trapezoid(np.abs(r1) ** 2 + np.abs(r2) ** 2, dx=hstep)))
        worst = max(worst, res)
    return worst


# ---------------------------------------------------------------------------
# spectral gradients and linearized-map columns
# ---------------------------------------------------------------------------


def _field_coeffs(layout: ModeLayout, samples: np.ndarray) -> np.ndarray:
    # mean-formula Fourier coefficients from samples at x_m = m / K, m < K
    K = samples.size
    E = fourier_eval_matrix(layout, K)
    return E.conj().T @ samples / K


def grad_frak_z(
    p: ZSPotential,
    j: int,
    n_steps: int | None = None,
    *,
    data: DirichletData | None = None,
) -> tuple[FieldPair, FieldPair]:
    """Gradient fields of the two conjugate spectral coordinates at mode ``j``.

    Returns the pair ``(plus, minus)`` of coefficient pairs

        plus  = ( (K2 + i H2)^2, (K1 + i H1)^2 ),
        minus = ( (K2 - i H2)^2, (K1 - i H1)^2 ),

    with components ordered as (partial_u, partial_v).  The squares are
    1-periodic even though ``H`` and ``K`` themselves are not, so the grid
    samples convert directly to Fourier coefficients on the mode window.  At
    zero potential:  plus = (0, -2 e^{-2 pi i j x}),
    minus = (-2 e^{2 pi i j x}, 0).
    """
    if data is None:
        n = _check_steps(p, n_steps)
        mu = dirichlet_eigenvalue_near(p, j, n)
        data = dirichlet_eigenfunctions(p, mu, n)
    H, K = data.h, data.k
    pairs = []
    for s in (+1.0, -1.0):
        comp_u = (K[1] + 1j * s * H[1]) ** 2
        comp_v = (K[0] + 1j * s * H[0]) ** 2
        cu = _field_coeffs(p.layout, comp_u[:-1])
        cv = _field_coeffs(p.layout, comp_v[:-1])
        pairs.append(FieldPair(p.layout, cu, cv))
    return pairs[0], pairs[1]


def dpsi_nls_columns(
    p: ZSPotential,
    j: int,
    xi_j: float,
    beta_j: float,
    n_steps: int | None = None,
    *,
    data: DirichletData | None = None,
) -> tuple[FieldPair, FieldPair]:
    """Columns of the linearized coordinate map at the two mode-``j`` directions.

    The scaling ``xi_j`` and rotation ``beta_j`` are taken as inputs (both
    reduce to ``1`` and ``0`` at zero potential).  The gradient combinations

        dx_j = xi / sqrt(8) * (e^{i beta} minus + e^{-i beta} plus),
        dy_j = xi / (sqrt(8) i) * (e^{i beta} minus - e^{-i beta} plus),

    are rotated by the compatible complex structure, ``(a, b) -> (-i b, i a)``,
    giving the images of the second- and first-coordinate unit directions:
    the function returns ``(column at e1_j, column at e2_j)``.  At zero
    potential these match the inverse Fourier pairing images of the same
    unit directions exactly.
    """
    gp, gm = grad_frak_z(p, j, n_steps, data=data)
    s8 = math.sqrt(8.0)
    eb = complex(np.exp(1j * beta_j))
    dx = (xi_j / s8) * (eb * gm + np.conj(eb) * gp)
    dy = (xi_j / (s8 * 1j)) * (eb * gm - np.conj(eb) * gp)
    col1 = FieldPair(p.layout, -1j * dy.v, 1j * dy.u)
    col2 = FieldPair(p.layout, -1j * dx.v, 1j * dx.u)
    return col1, col2

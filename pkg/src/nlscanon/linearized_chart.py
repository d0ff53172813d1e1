"""First-order chart around the tangential slice of the coordinate map.

The nonlinear coordinate map is expensive to invert away from the tangential
slice ``{z_perp = 0}``.  This module freezes it at the tangential part of a
point and keeps the normal dependence only to first order:

    Psi_L(z) = Psi(z_S, 0) + d_perp Psi(z_S, 0)[z_perp],

so ``Psi_L`` is affine in ``z_perp`` and coincides with ``Psi`` on the slice.
Its differential gains a single mixed second-derivative term ``R`` which
annihilates normal input directions.  Because the linear part of the map is
exactly invertible, the inverse differential is the linear inverse plus a
one-smoothing correction ``A_L`` assembled from a Neumann series in
``T^{-1} R``; the series is certified by a sampled contraction constant and
falls back to a dense resolvent solve (with a warning) if it stalls.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .birkhoff_backend import BirkhoffBackend, DerivativePack, RadiusError
from .phase_space import (
    FieldPair,
    LinOp,
    ModeLayout,
    TruncState,
    fnls_forward_matrix,
    fnls_inverse,
    project_S,
    project_perp,
    random_state,
)

__all__ = [
    "ChartContext",
    "ContractionViolation",
    "NeumannFallbackWarning",
    "make_chart",
    "psi_l",
    "d_psi_l",
    "b_l",
    "a_l_apply",
    "a_l_matrix",
    "contraction_margin",
]


class ContractionViolation(RuntimeError):
    """The Neumann correction is not certified: ``||T^{-1} R|| > 1/2``."""


class NeumannFallbackWarning(UserWarning):
    """The Neumann series stalled and a dense resolvent solve was used."""


@dataclass(frozen=True)
class ChartContext:
    """Immutable chart data: backend, normal radius, contraction constant.

    ``c0`` bounds the contraction norm per unit of normal amplitude, so the
    certified domain is ``||z_perp||_0 < delta`` with ``c0 * delta <= 1/2``.
    """

    backend: BirkhoffBackend
    delta: float
    c0: float

    @property
    def layout(self) -> ModeLayout:
        return self.backend.layout


# ---------------------------------------------------------------------------
# internals
# ---------------------------------------------------------------------------

def _opnorm2(K: np.ndarray, iters: int = 200, rtol: float = 1e-12) -> float:
    """Largest singular value of ``K``, by power iteration on ``K^H K``."""
    if K.size == 0 or not np.any(K):
        return 0.0
    rng = np.random.default_rng(1905)
    v = rng.standard_normal(K.shape[1]).astype(complex)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        u = K.conj().T @ (K @ v)
        nu = float(np.linalg.norm(u))
        if nu == 0.0:
            return 0.0
        lam_new = float(np.real(np.vdot(v, u)))
        v = u / nu
        if abs(lam_new - lam) <= rtol * max(abs(lam_new), 1e-300):
            lam = lam_new
            break
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0)))


def _guarded_pack(ctx: ChartContext, z: TruncState) -> DerivativePack:
    nperp = float(np.linalg.norm(project_perp(z).vec()))
    if nperp > ctx.delta * (1.0 + 1e-9):
        raise RadiusError(
            f"normal block norm {nperp:.3e} exceeds chart radius {ctx.delta:.3e}"
        )
    return ctx.backend.pack(z, "x")


def _r_matrix(layout: ModeLayout, pk: DerivativePack) -> np.ndarray:
    """Mixed second derivative ``R[zhat] = d2Psi(z_S,0)[P_S zhat, (0,z_perp)]``.

    Only tangential input directions contribute; normal columns are exactly
    zero, which is what makes the chart differential affine in ``z_perp``.
    """
    R = np.zeros((layout.dim, layout.dim), complex)
    R[:, layout.s_dirs] = pk.q
    return R


def _margin_of(backend: BirkhoffBackend, z: TruncState) -> float:
    pk = backend.pack(z, "x")
    fac = lu_factor(pk.P1)
    return _opnorm2(lu_solve(fac, pk.q))


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def make_chart(
    backend: BirkhoffBackend,
    delta: float,
    n_samples: int = 100,
    seed: int = 0,
) -> ChartContext:
    """Build a chart context, estimating the contraction constant by sampling.

    ``c0`` is the largest observed ``||T^{-1} R|| / ||z_perp||_0`` over
    ``n_samples`` random states with normal amplitude ``delta`` and tangential
    radii spread over the backend's guarded ball.  Construction fails when
    the certified bound ``c0 * delta <= 1/2`` cannot be met.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    lay = backend.layout
    rng = np.random.default_rng(seed)
    c0 = 0.0
    for _ in range(n_samples):
        z = random_state(lay, rng, s=2, amp_S=0.1, amp_perp=delta)
        zs = project_S(z)
        ns = float(np.linalg.norm(zs.vec()))
        if ns > 0:
            target = rng.uniform(0.1, 0.8) * backend.radius
            z = (target / ns) * zs + project_perp(z)
        npr = float(np.linalg.norm(project_perp(z).vec()))
        if npr == 0.0:
            continue
        c0 = max(c0, _margin_of(backend, z) / npr)
    if c0 * delta > 0.5:
        raise ContractionViolation(
            f"sampled contraction constant {c0:.3e} violates c0*delta <= 1/2 "
            f"at delta = {delta:.3e}; shrink the normal radius"
        )
    return ChartContext(backend=backend, delta=delta, c0=c0)


# ---------------------------------------------------------------------------
# the chart map and its pieces
# ---------------------------------------------------------------------------

def psi_l(ctx: ChartContext, z: TruncState) -> FieldPair:
    """Chart value ``Psi(z_S, 0) + d_perp Psi(z_S, 0)[z_perp]``."""
    pk = _guarded_pack(ctx, z)
    return FieldPair.from_vec(ctx.layout, pk.w0 + pk.mperp)


def d_psi_l(ctx: ChartContext, z: TruncState) -> LinOp:
    """Chart differential: frozen differential plus the mixed term.

    The correction annihilates normal input directions, so the matrix differs
    from ``dPsi(z_S, 0)`` only in its tangential columns.
    """
    pk = _guarded_pack(ctx, z)
    return LinOp(ctx.layout, pk.P1 + _r_matrix(ctx.layout, pk),
                 src="seq", tgt="fun")


def b_l(ctx: ChartContext, z: TruncState) -> FieldPair:
    """Nonlinear remainder of the chart: ``Psi_L(z) - (linear map)(z)``.

    By construction the remainder is affine in ``z_perp``; its second normal
    derivative vanishes identically.
    """
    w = psi_l(ctx, z)
    return FieldPair.from_vec(ctx.layout, w.vec() - fnls_inverse(z).vec())


def contraction_margin(ctx: ChartContext, z: TruncState) -> float:
    """Operator norm of ``T^{-1} R`` at ``z``, by power iteration.

    Callers compare against 1/2; the chart radius is certified so that states
    inside it stay below that threshold.  No radius guard is applied here.
    """
    return _margin_of(ctx.backend, z)


def _neumann_apply(fac, q: np.ndarray, s_dirs: np.ndarray, rhs: np.ndarray,
                   dim: int, Ksd: np.ndarray):
    """Sum ``(Id + T^{-1}R)^{-1} T^{-1} rhs`` term by term.

    Falls back to a dense resolvent solve (with a warning) if 200 terms do
    not reach the truncation threshold.
    """
    t = lu_solve(fac, rhs)
    y = t.copy()
    scale = max(1.0, float(np.linalg.norm(t)))
    for _ in range(200):
        t = -lu_solve(fac, q @ t[s_dirs])
        y += t
        if float(np.linalg.norm(t)) < 1e-14 * scale:
            return y
    K = np.zeros((dim, dim), complex)
    K[:, s_dirs] = Ksd
    warnings.warn(
        "Neumann series did not truncate in 200 terms; dense resolvent used",
        NeumannFallbackWarning,
    )
    return np.linalg.solve(np.eye(dim) + K, lu_solve(fac, rhs))


def a_l_apply(ctx: ChartContext, z: TruncState, what: FieldPair) -> TruncState:
    """One-smoothing part of the inverse chart differential, applied.

    Computes ``A_L(z)[what]`` with ``A_L = dA(Psi(z_S,0)) - T^{-1} R S`` and
    ``S = (Id + T^{-1}R)^{-1} T^{-1}``, so that the linear coordinate map plus
    ``A_L`` inverts ``d Psi_L(z)``.  Raises :class:`ContractionViolation`
    when the measured contraction norm exceeds 1/2.
    """
    pk = _guarded_pack(ctx, z)
    lay = ctx.layout
    fac = lu_factor(pk.P1)
    Ksd = lu_solve(fac, pk.q)
    margin = _opnorm2(Ksd)
    if margin > 0.5:
        raise ContractionViolation(
            f"contraction norm {margin:.3e} exceeds 1/2; Neumann not certified"
        )
    sd = lay.s_dirs
    wvec = what.vec().astype(complex)
    y = _neumann_apply(fac, pk.q, sd, wvec, lay.dim, Ksd)
    out = lu_solve(fac, wvec) - fnls_forward_matrix(lay) @ wvec \
        - lu_solve(fac, pk.q @ y[sd])
    if what.is_real_subspace() and np.max(np.abs(out.imag)) < 1e-10:
        out = out.real
    return TruncState.from_vec(lay, out)


def a_l_matrix(ctx: ChartContext, z: TruncState) -> LinOp:
    """Dense matrix of the one-smoothing correction (function -> sequence).

    Convenience assembly for report serialization and operator-norm checks;
    uses the resolvent directly rather than the term-by-term series.
    """
    pk = _guarded_pack(ctx, z)
    lay = ctx.layout
    fac = lu_factor(pk.P1)
    Ksd = lu_solve(fac, pk.q)
    margin = _opnorm2(Ksd)
    if margin > 0.5:
        raise ContractionViolation(
            f"contraction norm {margin:.3e} exceeds 1/2; Neumann not certified"
        )
    K = np.zeros((lay.dim, lay.dim), complex)
    K[:, lay.s_dirs] = Ksd
    Tinv = lu_solve(fac, np.eye(lay.dim, dtype=complex))
    S = np.linalg.solve(np.eye(lay.dim) + K, Tinv)
    A = Tinv - fnls_forward_matrix(lay) - K @ S
    return LinOp(lay, A, src="fun", tgt="seq")

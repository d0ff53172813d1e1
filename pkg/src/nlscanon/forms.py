"""Differential forms on the truncated phase spaces.

Constant-coefficient two-forms are stored by their Gram matrix against the
side pairing; one-forms by their covector field.  The exterior derivative is
computed with Cartan's alternating-sum formula using central differences, and
primitives of closed forms come from the cone construction, a fixed homotopy
integral over the scaling of the normal block.

The chart-specific objects live here too: the pullback defect of the ambient
symplectic structure under the first-order chart is a block operator ``L(z)``
built from pairings of first and mixed-second derivatives of the coordinate
map; contracting its upper-right block with the normal part of the base point
gives the covector ``E(z)`` whose one-form has the defect as its exterior
derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linearized_chart import ChartContext, _guarded_pack
from .phase_space import (
    FieldPair,
    LinOp,
    ModeLayout,
    TruncState,
    bbj_matrix,
    fun_pairing_matrix,
    j_matrix,
    pairing_fun_r,
    pairing_seq_r,
    project_S,
    project_perp,
)

__all__ = [
    "TwoFormMat",
    "OneFormField",
    "FormField",
    "BlockL",
    "QuadratureError",
    "lambda_m",
    "lambda_m_two_form",
    "ambient_two_form",
    "exterior_derivative",
    "pullback_two_form",
    "l_operator",
    "e_vector",
    "lambda_l",
    "lambda_l_two_form_field",
    "cone_construct",
]


class QuadratureError(RuntimeError):
    """Node doubling changed the homotopy integral beyond tolerance."""


def _norm0_of(z) -> float:
    return float(np.linalg.norm(np.asarray(z.vec())))


# ---------------------------------------------------------------------------
# form containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FormField:
    """A degree-r form field: ``value(z, (xi_1, ..., xi_r))`` -> number."""

    degree: int
    fn: Callable

    def value(self, z, xis: tuple):
        if len(xis) != self.degree:
            raise ValueError(f"expected {self.degree} arguments, got {len(xis)}")
        return self.fn(z, xis)


@dataclass
class TwoFormMat:
    """Constant-coefficient two-form stored against the side pairing.

    The value is ``(G z1, z2)_r`` on the sequence side and ``<G w1, w2>_r``
    on the function side; the Gram matrix must be antisymmetric with respect
    to that pairing.
    """

    layout: ModeLayout
    G: np.ndarray
    side: str = "seq"

    def __post_init__(self):
        self.G = np.asarray(self.G)
        d = self.layout.dim
        if self.G.shape != (d, d):
            raise ValueError(f"expected {(d, d)} Gram matrix")
        if self.side not in ("seq", "fun"):
            raise ValueError("side must be 'seq' or 'fun'")
        B = self.bilinear()
        scale = max(1.0, float(np.max(np.abs(B))))
        if np.max(np.abs(B + B.T)) > 1e-9 * scale:
            raise ValueError("Gram matrix is not antisymmetric for its pairing")

    def bilinear(self) -> np.ndarray:
        """Matrix ``B`` with value = z1^T B z2 against flat coordinates."""
        if self.side == "seq":
            return self.G.T
        return self.G.T @ fun_pairing_matrix(self.layout)

    def value(self, z1, z2):
        v = z1.vec() @ self.bilinear() @ z2.vec()
        return v if np.iscomplexobj(v) else float(v)

    def field(self) -> FormField:
        return FormField(2, lambda z, xis: self.value(xis[0], xis[1]))


@dataclass
class OneFormField:
    """One-form given by a covector field: ``lambda(z)[zhat] = (e(z), zhat)_r``."""

    layout: ModeLayout
    e: Callable
    side: str = "seq"
    degree: int = field(default=1, init=False)

    def value(self, z, xis: tuple):
        if len(xis) != 1:
            raise ValueError("a one-form takes exactly one argument")
        pair = pairing_seq_r if self.side == "seq" else pairing_fun_r
        return pair(self.e(z), xis[0])


def lambda_m(layout: ModeLayout) -> OneFormField:
    """Action one-form ``sum_k y_k dx_k`` of the model structure."""
    def e(z: TruncState) -> TruncState:
        return TruncState(layout, z.y.copy(), np.zeros_like(z.y))
    return OneFormField(layout, e, side="seq")


def lambda_m_two_form(layout: ModeLayout) -> TwoFormMat:
    """Model symplectic form: Gram ``J^{-1}``, value ``yhat.xhat' - xhat.yhat'``."""
    return TwoFormMat(layout, -j_matrix(layout), side="seq")


def ambient_two_form(layout: ModeLayout) -> TwoFormMat:
    """Symplectic form of the pair space, with Gram ``i J`` on that side."""
    return TwoFormMat(layout, 1j * bbj_matrix(layout), side="fun")


# ---------------------------------------------------------------------------
# exterior derivative and pullback
# ---------------------------------------------------------------------------

def exterior_derivative(omega, z, xis: Sequence, h: float | None = None):
    """Cartan's formula with constant argument fields.

    ``d omega(z)[xi_1..xi_{r+1}]`` is the alternating sum of directional
    derivatives of ``omega[.. omitted slot ..]``, taken here by central
    differences with step ``h = 1e-5 (1 + ||z||_0)``.
    """
    xis = tuple(xis)
    if len(xis) != omega.degree + 1:
        raise ValueError(f"degree-{omega.degree} form needs {omega.degree + 1} arguments")
    if h is None:
        h = 1e-5 * (1.0 + _norm0_of(z))
    total = 0.0
    for j, xi in enumerate(xis):
        rest = xis[:j] + xis[j + 1:]
        plus = omega.value(z + h * xi, rest)
        minus = omega.value(z - h * xi, rest)
        total += (-1) ** j * (plus - minus) / (2.0 * h)
    return total


def pullback_two_form(T: LinOp, form: TwoFormMat) -> TwoFormMat:
    """Pull a constant two-form back along a linear map.

    The result lives on ``T.src`` and keeps exact antisymmetry: the bilinear
    matrix transforms by congruence, ``B' = T^t B T``.
    """
    if form.side != T.tgt:
        raise ValueError("form side does not match the map's target")
    if form.layout.dim != T.layout.dim:
        raise ValueError("dimension mismatch")
    B = T.mat.T @ form.bilinear() @ T.mat
    B = (B - B.T) / 2.0
    if T.src == "seq":
        return TwoFormMat(T.layout, B.T, side="seq")
    return TwoFormMat(T.layout, fun_pairing_matrix(T.layout) @ B.T, side="fun")


# ---------------------------------------------------------------------------
# the pullback-defect operator and its one-form
# ---------------------------------------------------------------------------

@dataclass
class BlockL:
    """Block operator measuring the chart's symplectic defect.

    Acts on stacked sequence vectors through its three nonzero blocks; the
    normal-normal block vanishes identically and the whole operator is
    antisymmetric, ``L^t = -L``.
    """

    layout: ModeLayout
    L_SS: np.ndarray
    L_Sperp: np.ndarray
    L_perpS: np.ndarray

    def full(self) -> np.ndarray:
        d = self.layout.dim
        sd, pd = self.layout.s_dirs, self.layout.perp_dirs
        M = np.zeros((d, d))
        M[np.ix_(sd, sd)] = self.L_SS
        M[np.ix_(sd, pd)] = self.L_Sperp
        M[np.ix_(pd, sd)] = self.L_perpS
        return M

    def apply(self, zhat: TruncState) -> TruncState:
        return TruncState.from_vec(self.layout, self.full() @ zhat.vec())

    def two_form(self) -> TwoFormMat:
        return TwoFormMat(self.layout, self.full(), side="seq")


def _w_matrix(layout: ModeLayout) -> np.ndarray:
    """Pairing kernel ``i (P bbJ)``: value ``a^T W b = i <bbJ b, a>_r``."""
    return 1j * (fun_pairing_matrix(layout) @ bbj_matrix(layout))


def _blocks_from_pack(layout: ModeLayout, pk) -> BlockL:
    """``L`` assembled from a level-"x" derivative pack (no domain guard)."""
    W = _w_matrix(layout)
    P1S = pk.P1[:, layout.s_dirs]
    P1p = pk.P1[:, layout.perp_dirs]
    qW = pk.q.T @ W
    term1 = qW @ P1S
    term3 = qW @ pk.q
    L_SS = term1 - term1.T + (term3 - term3.T) / 2.0
    L_Sp = qW @ P1p
    for name, M in (("L_SS", L_SS), ("L_Sperp", L_Sp)):
        if np.max(np.abs(M.imag)) > 1e-10 * max(1.0, np.max(np.abs(M.real))):
            raise ValueError(f"{name} has a non-real part; base point not real?")
    return BlockL(layout, L_SS.real, L_Sp.real, -L_Sp.real.T)


def l_operator(ctx: ChartContext, z: TruncState) -> BlockL:
    """Assemble ``L(z)`` from pairings of map derivatives at ``(z_S, 0)``.

    All ingredients come from the first differential and the mixed second
    derivative contracted with ``z_perp``; the mirror blocks are written as
    explicit negated transposes so the antisymmetry is exact.
    """
    return _blocks_from_pack(ctx.layout, _guarded_pack(ctx, z))


def e_vector(ctx: ChartContext, z: TruncState) -> TruncState:
    """Covector of the defect one-form: ``E = (E_S, 0)``, quadratic in ``z_perp``.

    ``E_S`` is half the upper-right block of ``L(z)`` contracted with the
    normal part of the base point.
    """
    blocks = l_operator(ctx, z)
    lay = ctx.layout
    out = np.zeros(lay.dim)
    out[lay.s_dirs] = 0.5 * (blocks.L_Sperp @ z.vec()[lay.perp_dirs])
    return TruncState.from_vec(lay, out)


def lambda_l(ctx: ChartContext) -> OneFormField:
    """One-form ``(E(z), .)_r`` whose exterior derivative is the defect form."""
    return OneFormField(ctx.layout, lambda z: e_vector(ctx, z), side="seq")


def lambda_l_two_form_field(ctx: ChartContext) -> FormField:
    """The defect two-form as a base-point-dependent field."""
    def fn(z, xis):
        return l_operator(ctx, z).two_form().value(xis[0], xis[1])
    return FormField(2, fn)


# ---------------------------------------------------------------------------
# cone construction
# ---------------------------------------------------------------------------

def cone_construct(omega, z, xis: Sequence = (), nodes: int = 16,
                   rtol: float = 1e-8):
    """Homotopy primitive along the scaling of the normal block.

    For a degree-r form the result is the degree-(r-1) form

        omega_C(z)[xi_1..] = int_0^1 omega(z_S, t z_perp)[(0, z_perp),
                              (xi_S, t xi_perp), ...] dt,

    computed by fixed-node Gauss-Legendre quadrature; the node count is
    doubled once and disagreement raises :class:`QuadratureError`.
    """
    xis = tuple(xis)
    if len(xis) != omega.degree - 1:
        raise ValueError(f"degree-{omega.degree} form needs {omega.degree - 1} arguments")
    zs, zp = project_S(z), project_perp(z)
    xs = [(project_S(xi), project_perp(xi)) for xi in xis]

    def quad(n: int):
        t, wt = np.polynomial.legendre.leggauss(n)
        t = 0.5 * (t + 1.0)
        wt = 0.5 * wt
        acc = 0.0
        for tk, wk in zip(t, wt):
            args = (zp,) + tuple(a + tk * b for a, b in xs)
            acc += wk * omega.value(zs + tk * zp, args)
        return acc

    v1 = quad(nodes)
    v2 = quad(2 * nodes)
    if abs(v1 - v2) > max(1e-12, rtol * max(1.0, abs(v2))):
        raise QuadratureError(
            f"homotopy integral moved from {v1:.6e} to {v2:.6e} under node doubling"
        )
    return v2

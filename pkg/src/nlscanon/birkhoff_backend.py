"""Backends realizing a canonical coordinate map for the truncated flow.

A *backend* bundles a symplectic diffeomorphism ``Psi`` from sequence-side
coordinates to function-side pairs together with the Hamiltonian it puts into
(approximate) action form.  Both constructions share the same shape:

    Psi = (linear coordinate map back to the function side) o (time-1 flow
    of a homogeneous quartic generating Hamiltonian in paired complex
    coordinates),

so exact symplecticity is inherited analytically and integrator error is the
only defect (controlled by a step-halving certification at construction).

* ``make_toy`` uses a small hand-chosen generator ``G`` and an action-only
  model Hamiltonian ``K(I)``; the paired function-side Hamiltonian is defined
  as ``K o actions o Psi^{-1}``, so every structural identity holds exactly
  (up to flow tolerance).
* ``make_perturbative`` solves the homological equation for the truncated
  cubic Hamiltonian on the circle: the generator kills the non-resonant part
  of the quartic term, leaving ``H2 + N4(I) + O(amplitude^6)``.

The backend also produces *derivative packs*: joint propagations of the base
point with first, second and (contracted) third variations of ``Psi`` at a
tangential base point, which the chart/corrector layers consume.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import _nls_core as core
from ._poly import QuarticPoly, flow_poly
from .phase_space import (
    Actions,
    FieldPair,
    LinOp,
    ModeLayout,
    TruncState,
    fnls_forward,
    fnls_inverse,
    fun_pairing_matrix,
    project_S,
    project_perp,
)

__all__ = [
    "GenFlowConfig",
    "FreqTable",
    "ToyCoeffs",
    "BirkhoffBackend",
    "DerivativePack",
    "RadiusError",
    "FlowCertificationError",
    "NewtonError",
    "make_toy",
    "make_perturbative",
    "bk_eval",
    "bk_diff",
    "bk_diff2",
    "bk_inv_diff",
    "bk_b_nls",
    "bk_a_nls",
    "bk_freqs",
    "bk_h",
]

_SQRT2 = float(np.sqrt(2.0))


class RadiusError(ValueError):
    """State outside the backend's configured validity radius."""


class FlowCertificationError(RuntimeError):
    """Step-halving acceptance check failed for the configured step count."""


class NewtonError(RuntimeError):
    """Newton inversion did not reach tolerance within the iteration cap."""


@dataclass(frozen=True)
class GenFlowConfig:
    """Fixed-step RK4 configuration for time-1 generator flows.

    ``steps`` is the step count on [0, 1]; when ``check`` is set, construction
    runs the flow with ``steps`` and ``2*steps`` on sample states at the
    validity radius and requires agreement within ``tol``.
    """

    steps: int = 200
    tol: float = 1e-11
    check: bool = True


@dataclass(frozen=True)
class ToyCoeffs:
    """Action-only model Hamiltonian ``K(I) = sum omega_bar_n I_n + c/2 (sum I)^2``.

    ``omega_bar`` defaults to the circle Laplacian symbol ``4 pi^2 n^2`` and
    must be even in ``n``.
    """

    c: float = 1.0
    omega_bar: tuple | None = None


@dataclass
class FreqTable:
    """Frequencies ``omega_n(I)`` over the mode range."""

    layout: ModeLayout
    omega: np.ndarray

    def get(self, n: int) -> float:
        return float(self.omega[self.layout.index(n)])


@dataclass
class DerivativePack:
    """Derivatives of ``Psi`` at a tangential base point ``(z_S, 0)``.

    All arrays live on the function side (stacked ``[u; v]`` vectors).
    ``P1`` holds the full differential; ``mperp`` / ``q`` are contracted with
    a fixed normal vector ``z_perp``; ``T2`` is the (tangential-direction) x
    (all-direction) second-derivative slab; ``T3`` holds third derivatives
    with one slot contracted by ``z_perp``.
    """

    level: str
    w0: np.ndarray
    P1: np.ndarray
    mperp: np.ndarray | None = None
    q: np.ndarray | None = None
    T2: np.ndarray | None = None
    T3: np.ndarray | None = None
    t3_pairs: list | None = None

    def t3_col(self, pj: int, pk: int) -> np.ndarray:
        a, b = (pj, pk) if pj <= pk else (pk, pj)
        return self.T3[self.t3_pairs.index((a, b))]


# ---------------------------------------------------------------------------
# coordinate matrices
# ---------------------------------------------------------------------------

def _tc_matrix(layout: ModeLayout) -> np.ndarray:
    """[x; y] -> [zeta; eta] with zeta = (x - iy)/sqrt2, eta = (x + iy)/sqrt2."""
    m = layout.n_modes
    I = np.eye(m)
    return np.block([[I, -1j * I], [I, 1j * I]]) / _SQRT2


def _tci_matrix(layout: ModeLayout) -> np.ndarray:
    m = layout.n_modes
    I = np.eye(m)
    return np.block([[I, I], [1j * I, -1j * I]]) / _SQRT2


def _fw_matrix(layout: ModeLayout) -> np.ndarray:
    """[zeta; eta] -> [u; v] with u = -(reversal) zeta, v = -eta; an involution."""
    m = layout.n_modes
    R = np.eye(m)[::-1]
    Z = np.zeros((m, m))
    return np.block([[-R, Z], [Z, -np.eye(m)]])


# ---------------------------------------------------------------------------
# generating Hamiltonians
# ---------------------------------------------------------------------------

def _pert_generator(layout: ModeLayout):
    """Solve the homological equation for the truncated quartic term.

    Returns the generator polynomial, plus the full quadruple table and
    coefficient arrays for introspection/tests.
    """
    N = layout.N
    m = layout.n_modes
    modes = layout.modes
    A, B, C = np.meshgrid(modes, modes, modes, indexing="ij")
    a = A.ravel()
    b = B.ravel()
    c = C.ravel()
    d = a + b - c
    keep = np.abs(d) <= N
    a, b, c, d = a[keep], b[keep], c[keep], d[keep]
    delta = (a * a + b * b - c * c - d * d).astype(float)
    resonant = ((a == c) & (b == d)) | ((a == d) & (b == c))
    if np.any((delta == 0) & ~resonant):
        raise RuntimeError("zero divisor on a non-resonant quadruple")
    nr = ~resonant
    coeffs = 1j / (4.0 * np.pi**2 * delta[nr])
    idx = np.stack([a[nr] + N, b[nr] + N, c[nr] + N + m, d[nr] + N + m], axis=1)
    gen = QuarticPoly(2 * m, coeffs, idx)
    quads = np.stack([a, b, c, d], axis=1)
    return gen, quads, resonant, coeffs


def _toy_generator(layout: ModeLayout, g_coeffs) -> QuarticPoly:
    """Assemble the toy generator, closing it under the conjugate pairing.

    ``g_coeffs`` is a list of ``(coeff, (n1, n2, n3, n4))`` monomials
    ``zeta_{n1} zeta_{n2} eta_{n3} eta_{n4}``; each entry is paired with its
    slot-swapped conjugate so the generator is real on the real slice.
    Entries that are their own pairing must carry a real coefficient.
    """
    N, m = layout.N, layout.n_modes
    coeffs, rows = [], []
    for cval, quad in g_coeffs:
        n1, n2, n3, n4 = quad
        if max(abs(n1), abs(n2), abs(n3), abs(n4)) > N:
            raise ValueError("generator monomial outside the mode window")
        row = [n1 + N, n2 + N, n3 + N + m, n4 + N + m]
        swap = [n3 + N, n4 + N, n1 + N + m, n2 + N + m]
        if sorted(row) == sorted(swap):
            if abs(complex(cval).imag) > 1e-15:
                raise ValueError("self-paired generator monomial needs a real coefficient")
            coeffs.append(complex(cval))
            rows.append(row)
        else:
            coeffs.append(complex(cval))
            rows.append(row)
            coeffs.append(np.conj(complex(cval)))
            rows.append(swap)
    return QuarticPoly(2 * m, np.array(coeffs), np.array(rows, int).reshape(-1, 4))


def _default_toy_g(layout: ModeLayout) -> list:
    """Small deterministic generator coupling each tangential mode to a neighbor."""
    out = []
    base = list(layout.S) if layout.S else [0]
    for s in base:
        p = s + 1 if s + 1 <= layout.N else s - 1
        out.append((0.05, (s, s, s, p)))
        out.append((0.04, (s, p, p, p)))
    if layout.S_perp:
        q = layout.S_perp[len(layout.S_perp) // 2]
        out.append((0.03, (q, q, q, q)))
    return out


# ---------------------------------------------------------------------------
# the backend object
# ---------------------------------------------------------------------------

class BirkhoffBackend:
    """Immutable bundle: coordinate map, paired Hamiltonian, derivative packs."""

    def __init__(self, layout: ModeLayout, kind: str, gen: QuarticPoly,
                 cfg: GenFlowConfig, radius: float, omega_bar: np.ndarray,
                 k_c: float = 0.0):
        self.layout = layout
        self.kind = kind
        self.gen = gen
        self.cfg = cfg
        self.radius = float(radius)
        self.omega_bar = np.asarray(omega_bar, float)
        self.k_c = float(k_c)
        m = layout.n_modes
        self._m = m
        self._Tc = _tc_matrix(layout)
        self._Tci = _tci_matrix(layout)
        self._Fw = _fw_matrix(layout)
        self._P = fun_pairing_matrix(layout)
        self._pack_cache: OrderedDict = OrderedDict()
        if cfg.check:
            self._certify()

    # -- certification -----------------------------------------------------------
    def _sample_states(self):
        lay = self.layout
        w = lay.weights(-2.0)
        amps = (0.95, 0.4)
        out = []
        for k, a in enumerate(amps):
            x = w * np.cos(1.0 + k + lay.modes)
            y = w * np.sin(0.5 + k + 2.0 * lay.modes)
            z = TruncState(lay, x, y)
            n0 = float(np.linalg.norm(z.vec()))
            out.append((a * self.radius / n0) * z)
        return out

    def _certify(self):
        for z in self._sample_states():
            W0 = self._Tc @ z.vec()
            W1 = flow_poly(self.gen, W0, 1.0, self.cfg.steps).W
            W2 = flow_poly(self.gen, W0, 1.0, 2 * self.cfg.steps).W
            defect = float(np.max(np.abs(W1 - W2)))
            if defect > self.cfg.tol:
                raise FlowCertificationError(
                    f"halving defect {defect:.2e} exceeds {self.cfg.tol:.1e} "
                    f"at {self.cfg.steps} steps"
                )

    def _guard(self, vec: np.ndarray):
        n0 = float(np.linalg.norm(vec))
        if n0 > self.radius * (1.0 + 1e-9):
            raise RadiusError(f"state norm {n0:.3f} exceeds radius {self.radius}")

    # -- map evaluation -----------------------------------------------------------
    def map_vec(self, zvec: np.ndarray) -> np.ndarray:
        """Forward map on stacked vectors, sequence side -> function side."""
        self._guard(zvec)
        W = flow_poly(self.gen, self._Tc @ zvec, 1.0, self.cfg.steps).W
        return self._Fw @ W

    def inv_map_vec(self, wvec: np.ndarray) -> np.ndarray:
        """Exact inverse (backward generator flow), function -> sequence side."""
        W = flow_poly(self.gen, self._Fw @ wvec, -1.0, self.cfg.steps).W
        out = self._Tci @ W
        if np.max(np.abs(out.imag)) < 1e-10:
            out = out.real
        return out

    # -- model Hamiltonian in action form ---------------------------------------
    def h_of_I(self, I: np.ndarray) -> float:
        I = np.asarray(I, float)
        lin = float(np.sum(self.omega_bar * I))
        if self.kind == "toy":
            return lin + 0.5 * self.k_c * float(np.sum(I)) ** 2
        return lin + 2.0 * float(np.sum(I)) ** 2 - float(np.sum(I * I))

    def freqs(self, I: np.ndarray) -> np.ndarray:
        I = np.asarray(I, float)
        if self.kind == "toy":
            return self.omega_bar + self.k_c * np.sum(I)
        return self.omega_bar + 4.0 * np.sum(I) - 2.0 * I

    def freq_jac(self, I: np.ndarray) -> np.ndarray:
        m = self.layout.n_modes
        if self.kind == "toy":
            return self.k_c * np.ones((m, m))
        return 4.0 * np.ones((m, m)) - 2.0 * np.eye(m)

    def _k_grad(self, I: np.ndarray) -> np.ndarray:
        return self.freqs(I)

    # -- paired function-side Hamiltonian ----------------------------------------
    # For the perturbative backend this is the literal truncated circle
    # Hamiltonian; for the toy backend it is K o actions o Psi^{-1}, so the
    # backend's map is its exact Birkhoff map.

    def ham_value(self, w: FieldPair) -> float:
        if self.kind == "perturbative":
            return float(core.h_value(self.layout, w.u, w.v).real)
        Wp = flow_poly(self.gen, self._Fw @ w.vec(), -1.0, self.cfg.steps).W
        I = Wp[: self._m] * Wp[self._m:]
        if np.max(np.abs(I.imag)) > 1e-10:
            raise ValueError("paired Hamiltonian evaluated away from the real slice")
        return float(self.h_of_I(I.real))

    def ham_grad(self, w: FieldPair) -> FieldPair:
        if self.kind == "perturbative":
            gu, gv = core.grad_arrays(self.layout, w.u, w.v)
            return FieldPair(self.layout, gu, gv)
        m = self._m
        res = flow_poly(self.gen, self._Fw @ w.vec(), -1.0, self.cfg.steps,
                        M0=np.eye(2 * m, dtype=complex))
        Wp, Mb = res.W, res.M
        zeta, eta = Wp[:m], Wp[m:]
        k1 = self._k_grad((zeta * eta).real)
        gW = np.concatenate([k1 * eta, k1 * zeta])
        vec = self._P @ (self._Fw.T @ (Mb.T @ gW))
        return FieldPair.from_vec(self.layout, vec)

    def ham_dgrad(self, w: FieldPair) -> np.ndarray:
        """Dense derivative of ``ham_grad`` on stacked function-side vectors."""
        if self.kind == "perturbative":
            return core.dgrad_matrix(self.layout, w.u, w.v)
        m = self._m
        n = 2 * m
        pairs = [(i, j) for i in range(n) for j in range(i, n)]
        res = flow_poly(self.gen, self._Fw @ w.vec(), -1.0, self.cfg.steps,
                        M0=np.eye(n, dtype=complex), pairs=pairs)
        Wp, Mb = res.W, res.M
        zeta, eta = Wp[:m], Wp[m:]
        k1 = self._k_grad((zeta * eta).real)
        K2 = self.freq_jac((zeta * eta).real)
        gW = np.concatenate([k1 * eta, k1 * zeta])
        # coordinate Hessian of K(actions) at Wp
        Hzz = K2 * np.outer(eta, eta)
        Hze = K2 * np.outer(eta, zeta) + np.diag(k1)
        Hee = K2 * np.outer(zeta, zeta)
        HK = np.block([[Hzz, Hze], [Hze.T, Hee]])
        # second-variation tensor Qt[c, :, a] = d(Mb[:, a]) in direction e_c
        Qt = np.zeros((n, n, n), complex)
        for p, (i, j) in enumerate(pairs):
            Qt[i, :, j] = res.Q[:, p]
            Qt[j, :, i] = res.Q[:, p]
        term1 = np.einsum("cwa,w->ca", Qt, gW)
        # a column direction b acts on the end state through c = Fw e_b
        t1 = np.einsum("ca,cb->ab", term1, self._Fw)
        t2 = Mb.T @ HK @ (Mb @ self._Fw)
        return self._P @ (self._Fw.T @ (t1 + t2))

    def ham_d3_cube(self, w0: FieldPair, wd: FieldPair) -> float:
        """Third derivative of the paired Hamiltonian, cubed direction."""
        if self.kind == "perturbative":
            return float(core.d3_h4_cube(w0.u, w0.v, wd.u, wd.v).real)
        m = self._m
        v = self._Fw @ wd.vec().astype(complex)
        res = flow_poly(self.gen, self._Fw @ w0.vec(), -1.0, self.cfg.steps,
                        M0=v.reshape(-1, 1), pairs=[(0, 0)], triples=[(0, 0, 0)])
        Wp = res.W
        zeta, eta = Wp[:m], Wp[m:]
        k1 = self._k_grad((zeta * eta).real)
        K2 = self.freq_jac((zeta * eta).real)
        Mv, Qvv, Rv = res.M[:, 0], res.Q[:, 0], res.R[:, 0]
        dI = lambda a: a[:m] * eta + zeta * a[m:]
        ddI = lambda a, b: a[:m] * b[m:] + b[:m] * a[m:]
        iM, iQ, pM = dI(Mv), dI(Qvv), ddI(Mv, Mv)
        # the model K is quadratic in the actions: no third action derivative
        third = 3.0 * (iM @ K2 @ pM)
        second = 3.0 * (iM @ K2 @ iQ + np.sum(k1 * ddI(Mv, Qvv)))
        first = np.sum(k1 * dI(Rv))
        return float((third + second + first).real)

    # -- quadratic-part split -----------------------------------------------------
    def quad_matrix(self) -> np.ndarray:
        """Gram of the base quadratic part on function-side stacked vectors."""
        m = self._m
        S = np.diag(self.omega_bar)
        Z = np.zeros((m, m))
        return np.block([[Z, S], [S, Z]])

    def ham4_value(self, w: FieldPair) -> float:
        quad = float(np.real(np.sum(self.omega_bar * w.u[::-1] * w.v)))
        return self.ham_value(w) - quad

    def ham4_grad(self, w: FieldPair) -> FieldPair:
        g = self.ham_grad(w)
        return FieldPair(self.layout, g.u - self.omega_bar * w.v,
                         g.v - self.omega_bar * w.u)

    def ham4_dgrad(self, w: FieldPair) -> np.ndarray:
        m = self._m
        D = self.ham_dgrad(w).copy()
        S = np.diag(self.omega_bar)
        D[:m, m:] -= S
        D[m:, :m] -= S
        return D

    # -- derivative packs ---------------------------------------------------------
    def pack(self, z: TruncState, level: str = "x", steps: int | None = None) -> DerivativePack:
        """Joint derivatives of the map at ``(z_S, 0)``, contracted with ``z_perp``.

        Levels: ``"p1"`` (differential only), ``"x"`` (adds the contracted
        normal direction and mixed second derivatives), ``"dx"`` (adds the
        full tangential second-derivative slab and contracted third
        derivatives).
        """
        if level not in ("p1", "x", "dx"):
            raise ValueError(f"unknown pack level {level!r}")
        lay = self.layout
        d = lay.dim
        steps = self.cfg.steps if steps is None else steps
        zs = project_S(z).vec()
        zp = project_perp(z).vec()
        key = (level, steps, zs.tobytes(), zp.tobytes() if level != "p1" else b"")
        hit = self._pack_cache.get(key)
        if hit is not None:
            self._pack_cache.move_to_end(key)
            return hit
        self._guard(zs)
        sd = lay.s_dirs
        ns = len(sd)
        M0 = self._Tc.astype(complex).copy()
        pairs: list = []
        triples: list = []
        if level in ("x", "dx"):
            M0 = np.hstack([M0, (self._Tc @ zp).reshape(-1, 1)])
            pairs += [(d, int(j)) for j in sd]
        t3_pairs = None
        if level == "dx":
            pairs += [(int(j), b) for j in sd for b in range(d)]
            t3_pairs = [(a, b) for ia, a in enumerate(map(int, sd))
                        for b in map(int, sd[ia:])]
            triples = [(a, b, d) for (a, b) in t3_pairs]
        res = flow_poly(self.gen, self._Tc @ zs, 1.0, steps,
                        M0=M0, pairs=pairs or None, triples=triples or None)
        F = self._Fw
        w0 = F @ res.W
        P1 = F @ res.M[:, :d]
        pk = DerivativePack(level=level, w0=w0, P1=P1)
        if level in ("x", "dx"):
            pk.mperp = F @ res.M[:, d]
            pk.q = F @ res.Q[:, :ns]
        if level == "dx":
            slab = (F @ res.Q[:, ns:]).reshape(2 * self._m, ns, d)
            pk.T2 = np.ascontiguousarray(slab.transpose(1, 0, 2))
            pk.T3 = (F @ res.R).T
            pk.t3_pairs = t3_pairs
        self._pack_cache[key] = pk
        if len(self._pack_cache) > 16:
            self._pack_cache.popitem(last=False)
        return pk


# ---------------------------------------------------------------------------
# constructors and free-function operations
# ---------------------------------------------------------------------------

def make_toy(layout: ModeLayout, k_coeffs: ToyCoeffs | None = None,
             g_coeffs: list | None = None, flow_cfg: GenFlowConfig | None = None,
             radius: float = 0.5) -> BirkhoffBackend:
    """Exact-oracle backend: generator flow plus action-only model Hamiltonian."""
    k = k_coeffs or ToyCoeffs()
    if k.omega_bar is None:
        omega_bar = core.d2_symbol(layout)
    else:
        omega_bar = np.asarray(k.omega_bar, float)
        if omega_bar.shape != (layout.n_modes,):
            raise ValueError("omega_bar must cover the mode range")
        if np.max(np.abs(omega_bar - omega_bar[::-1])) > 0:
            raise ValueError("omega_bar must be even in the mode index")
    gen = _toy_generator(layout, _default_toy_g(layout) if g_coeffs is None else g_coeffs)
    cfg = flow_cfg or GenFlowConfig()
    return BirkhoffBackend(layout, "toy", gen, cfg, radius, omega_bar, k_c=k.c)


def make_perturbative(layout: ModeLayout, flow_cfg: GenFlowConfig | None = None,
                      radius: float = 0.2) -> BirkhoffBackend:
    """Normal-form backend for the truncated cubic circle Hamiltonian."""
    gen, quads, resonant, coeffs = _pert_generator(layout)
    cfg = flow_cfg or GenFlowConfig()
    b = BirkhoffBackend(layout, "perturbative", gen, cfg, radius,
                        core.d2_symbol(layout))
    b._quads = quads
    b._resonant = resonant
    b._gen_coeffs = coeffs
    return b


def bk_eval(b: BirkhoffBackend, z: TruncState) -> FieldPair:
    """The coordinate map ``Psi(z)`` as a function-side pair."""
    return FieldPair.from_vec(b.layout, b.map_vec(z.vec()))


def bk_diff(b: BirkhoffBackend, z: TruncState) -> LinOp:
    """Differential ``dPsi(z)`` (sequence -> function side)."""
    b._guard(z.vec())
    res = flow_poly(b.gen, b._Tc @ z.vec(), 1.0, b.cfg.steps, M0=b._Tc.copy())
    return LinOp(b.layout, b._Fw @ res.M, src="seq", tgt="fun")


def bk_diff2(b: BirkhoffBackend, z: TruncState, direction: TruncState) -> LinOp:
    """Second derivative ``d^2 Psi(z)[direction, .]`` (sequence -> function)."""
    b._guard(z.vec())
    d = b.layout.dim
    M0 = np.hstack([b._Tc, (b._Tc @ direction.vec().astype(complex)).reshape(-1, 1)])
    pairs = [(d, a) for a in range(d)]
    res = flow_poly(b.gen, b._Tc @ z.vec(), 1.0, b.cfg.steps, M0=M0, pairs=pairs)
    return LinOp(b.layout, b._Fw @ res.Q, src="seq", tgt="fun")


def bk_inv_diff(b: BirkhoffBackend, z: TruncState) -> LinOp:
    """Differential of the inverse map at ``Psi(z)`` (function -> sequence)."""
    b._guard(z.vec())
    Wend = flow_poly(b.gen, b._Tc @ z.vec(), 1.0, b.cfg.steps).W
    res = flow_poly(b.gen, Wend, -1.0, b.cfg.steps, M0=b._Fw.astype(complex).copy())
    return LinOp(b.layout, b._Tci @ res.M, src="fun", tgt="seq")


def bk_b_nls(b: BirkhoffBackend, z: TruncState) -> FieldPair:
    """Nonlinear part ``Psi(z) - (linear coordinate map)(z)``."""
    w = b.map_vec(z.vec())
    return FieldPair.from_vec(b.layout, w - fnls_inverse(z).vec())


def bk_a_nls(b: BirkhoffBackend, w: FieldPair, tol: float = 1e-12,
             maxit: int = 50) -> TruncState:
    """Nonlinear part of the inverse map, by damped Newton iteration.

    Returns ``Phi(w) - F(w)`` where ``Phi`` inverts the coordinate map and
    ``F`` is its linear part.
    """
    target = w.vec()
    z = fnls_forward(w).vec()
    if np.iscomplexobj(z):
        if np.max(np.abs(z.imag)) > 1e-12:
            raise NewtonError("inverse sought for a pair far from the real slice")
        z = z.real
    b._guard(z)
    r = b.map_vec(z) - target
    rn = float(np.linalg.norm(r))
    scale = 1.0 + float(np.linalg.norm(target))
    for _ in range(maxit):
        if rn <= tol * scale:
            break
        J = bk_diff(b, TruncState.from_vec(b.layout, z)).mat
        step = np.linalg.solve(J, r)
        if np.max(np.abs(step.imag)) > 1e-9:
            raise NewtonError("Newton step left the real slice")
        step = step.real
        alpha = 1.0
        while alpha > 1e-3:
            z_new = z - alpha * step
            r_new = b.map_vec(z_new) - target
            rn_new = float(np.linalg.norm(r_new))
            if rn_new < rn:
                break
            alpha *= 0.5
        else:
            raise NewtonError("damped Newton failed to reduce the residual")
        z, r, rn = z_new, r_new, rn_new
    else:
        raise NewtonError(f"no convergence after {maxit} iterations (residual {rn:.2e})")
    lin = fnls_forward(w).vec()
    return TruncState.from_vec(b.layout, z - np.real(lin))


def bk_freqs(b: BirkhoffBackend, I: Actions) -> FreqTable:
    if np.any(I.I < -1e-15):
        raise ValueError("actions must be nonnegative")
    return FreqTable(b.layout, b.freqs(I.I))


def bk_h(b: BirkhoffBackend, I: Actions) -> float:
    if np.any(I.I < -1e-15):
        raise ValueError("actions must be nonnegative")
    return b.h_of_I(I.I)

"""Homogeneous quartic Hamiltonians in paired complex coordinates.

A state here is a stacked vector ``W = [zeta; eta]`` of length ``2m``; on the
real slice ``eta = conj(zeta)``.  The Hamiltonian is a sum of degree-4
monomials ``c * W[i0] W[i1] W[i2] W[i3]`` and generates the flow

    d zeta / dt = -i dH/d eta,      d eta / dt = +i dH/d zeta,

i.e. ``W' = A grad H`` with ``A = [[0, -iI], [iI, 0]]``.  This module provides
the value/gradient/Hessian/third- and fourth-derivative contractions of such a
polynomial (all through two precomputed sparse scatter patterns, so the
per-evaluation work is pure gather/multiply/scatter), plus a fixed-step RK4
integrator that propagates the base point jointly with first, second and third
variations along chosen coordinate directions.

Everything is dtype-complex throughout; directions may be arbitrary complex
vectors (used for complexified directional derivatives).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = ["QuarticPoly", "FlowSlabs", "flow_poly", "apply_A", "complex_symplectic_gram"]


def apply_A(g: np.ndarray) -> np.ndarray:
    """Apply ``A = [[0, -iI], [iI, 0]]`` to a stacked vector or column slab."""
    m = g.shape[0] // 2
    out = np.empty_like(g, dtype=complex)
    out[:m] = -1j * g[m:]
    out[m:] = 1j * g[:m]
    return out


def complex_symplectic_gram(m: int) -> np.ndarray:
    """Gram of the two-form ``i sum d zeta_n ^ d eta_n`` on stacked vectors.

    This equals the model two-form written in the paired complex coordinates;
    canonical flows satisfy ``M^T G M = G`` for their differentials ``M``.
    """
    Z = np.zeros((m, m))
    I = np.eye(m)
    return 1j * np.block([[Z, I], [-I, Z]])


# ordered / unordered distinct slot pairs of a degree-4 monomial, fixed once
_PAIRS = [(s1, s2) for s1 in range(4) for s2 in range(4) if s1 != s2]
_UPAIRS = [(s1, s2) for s1 in range(4) for s2 in range(s1 + 1, 4)]
_OTHERS1 = {s: tuple(o for o in range(4) if o != s) for s in range(4)}
_UOTHERS = [tuple(o for o in range(4) if o not in p) for p in _UPAIRS]
# all 3! assignments of three labelled vectors to three slots
_PERM3 = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]


def _upair(i: int, j: int) -> tuple[int, int]:
    return (i, j) if i < j else (j, i)


class QuarticPoly:
    """Homogeneous quartic polynomial with precomputed scatter patterns.

    Parameters
    ----------
    n_vars : int
        Number of variables (``2m`` for m paired modes).
    coeffs : array of complex, shape (T,)
    idx : array of int, shape (T, 4)
        Variable indices of each monomial (order within a row is irrelevant).
    """

    def __init__(self, n_vars: int, coeffs, idx):
        self.n = int(n_vars)
        self.coeffs = np.asarray(coeffs, complex).ravel()
        T = self.coeffs.size
        self.T = T
        self.idx = np.asarray(idx, int).reshape(T, 4)
        if T and (self.idx.min() < 0 or self.idx.max() >= self.n):
            raise ValueError("monomial index out of range")
        # slot-major index copy so gathers come out row-contiguous
        self._idxT = np.ascontiguousarray(self.idx.T)
        # gradient-type scatter: one row per (slot, term), coefficient folded in
        rows = self._idxT.ravel()
        cols = np.arange(4 * T)
        vals = np.tile(self.coeffs, 4)
        self._Sg = sp.csr_matrix((vals, (rows, cols)), shape=(self.n, 4 * T))
        # hessian-type scatter over the 6 unordered slot pairs: the data row of
        # an unordered pair feeds both matrix positions of the complementary
        # ordered pairs (their products coincide), halving the gather work
        rows = np.concatenate(
            [self.idx[:, c1] * self.n + self.idx[:, c2] for (c1, c2) in _UOTHERS]
            + [self.idx[:, c2] * self.n + self.idx[:, c1] for (c1, c2) in _UOTHERS]
        ) if T else np.zeros(0, int)
        cols = np.tile(np.arange(6 * T), 2)
        vals = np.tile(self.coeffs, 12)
        self._Sh = sp.csr_matrix((vals, (rows, cols)), shape=(self.n * self.n, 6 * T))

    # -- gathers ---------------------------------------------------------------
    def gather(self, vec: np.ndarray) -> np.ndarray:
        """Per-monomial slot values, slot-major: shape (4, T), rows contiguous."""
        return np.asarray(vec, complex)[self._idxT]

    # -- value / derivatives ------------------------------------------------------
    def value(self, W: np.ndarray) -> complex:
        if self.T == 0:
            return 0.0 + 0.0j
        P = self.gather(W)
        return complex(self.coeffs @ (P[0] * P[1] * P[2] * P[3]))

    def grad_from(self, P: np.ndarray) -> np.ndarray:
        """Gradient given the gather ``P`` of the state."""
        if self.T == 0:
            return np.zeros(self.n, complex)
        pre01 = P[0] * P[1]
        suf23 = P[2] * P[3]
        data = np.empty((4, self.T), complex)
        np.multiply(P[1], suf23, out=data[0])
        np.multiply(P[0], suf23, out=data[1])
        np.multiply(pre01, P[3], out=data[2])
        np.multiply(pre01, P[2], out=data[3])
        return self._Sg @ data.ravel()

    def grad(self, W: np.ndarray) -> np.ndarray:
        return self.grad_from(self.gather(W))

    def hess_from(self, P: np.ndarray) -> np.ndarray:
        """Dense Hessian given the gather of the state."""
        if self.T == 0:
            return np.zeros((self.n, self.n), complex)
        data = np.empty((6, self.T), complex)
        for r, (u1, u2) in enumerate(_UPAIRS):
            np.multiply(P[u1], P[u2], out=data[r])
        return (self._Sh @ data.ravel()).reshape(self.n, self.n)

    def hess(self, W: np.ndarray) -> np.ndarray:
        return self.hess_from(self.gather(W))

    def bmats_from(self, PW: np.ndarray, Pvs: list[np.ndarray]) -> np.ndarray:
        """Third-derivative contractions ``B_v = D3[v, ., .](W)`` as matrices.

        One batched scatter builds all requested matrices; returns an array of
        shape ``(len(Pvs), n, n)``.
        """
        k = len(Pvs)
        if self.T == 0 or k == 0:
            return np.zeros((k, self.n, self.n), complex)
        out = np.empty((k, self.n, self.n), complex)
        data = np.empty((6, self.T), complex)
        for j, Pv in enumerate(Pvs):
            for r, (u1, u2) in enumerate(_UPAIRS):
                np.multiply(Pv[u1], PW[u2], out=data[r])
                data[r] += PW[u1] * Pv[u2]
            out[j] = (self._Sh @ data.ravel()).reshape(self.n, self.n)
        return out

    def contract3_from(self, Pa: np.ndarray, Pb: np.ndarray, Pc: np.ndarray) -> np.ndarray:
        """Vector ``D3[a, b, .](c-slot)``: the symmetric triple contraction.

        With ``Pc`` the gather of the state this is ``D3[a, b, .](W)``;
        with three direction gathers it is the (constant) fourth-derivative
        contraction ``D4[a, b, c, .]``.
        """
        if self.T == 0:
            return np.zeros(self.n, complex)
        gs = (Pa, Pb, Pc)
        data = np.empty((4, self.T), complex)
        for s in range(4):
            o = _OTHERS1[s]
            acc = np.zeros(self.T, complex)
            for p in _PERM3:
                acc += gs[0][o[p[0]]] * gs[1][o[p[1]]] * gs[2][o[p[2]]]
            data[s] = acc
        return self._Sg @ data.ravel()

    def contract3_batch(self, gth: dict, triples: list) -> np.ndarray:
        """Columns ``D4[a, b, c, .]`` for many index triples at once.

        ``gth`` maps direction labels to their gathers.  Symmetrized pair
        products ``b*c`` are shared across triples with a common (b, c), which
        is the dominant saving when many triples end in the same label.
        """
        nt = len(triples)
        if self.T == 0 or nt == 0:
            return np.zeros((self.n, nt), complex)
        spair: dict = {}
        out = np.empty((self.n, nt), complex)
        buf = np.empty((4, self.T), complex)
        for i, (a, b, c) in enumerate(triples):
            key = (b, c) if b <= c else (c, b)
            S = spair.get(key)
            if S is None:
                Pb, Pc = gth[key[0]], gth[key[1]]
                S = {}
                for s1, s2 in _UPAIRS:
                    S[(s1, s2)] = Pb[s1] * Pc[s2] + Pb[s2] * Pc[s1]
                spair[key] = S
            Pa = gth[a]
            for s in range(4):
                o = _OTHERS1[s]
                np.multiply(Pa[o[0]], S[_upair(o[1], o[2])], out=buf[s])
                buf[s] += Pa[o[1]] * S[_upair(o[0], o[2])]
                buf[s] += Pa[o[2]] * S[_upair(o[0], o[1])]
            out[:, i] = self._Sg @ buf.ravel()
        return out


@dataclass
class FlowSlabs:
    """Joint flow output: base point and variation slabs.

    ``M`` holds first variations as columns; ``Q`` second variations for the
    registered direction pairs; ``R`` third variations for the registered
    triples (both index into ``M``'s columns).
    """

    W: np.ndarray
    M: np.ndarray | None = None
    Q: np.ndarray | None = None
    R: np.ndarray | None = None


def _stage_derivative(H, W, M, Q, R, pairs, triples, pair_pos, b_set, b_pos, groups):
    PW = H.gather(W)
    dW = apply_A(H.grad_from(PW))
    if M is None:
        return dW, None, None, None
    Hs = H.hess_from(PW)
    dM = apply_A(Hs @ M)
    dQ = dR = None
    if pairs:
        gth = {a: H.gather(M[:, a]) for a in b_set}
        B = H.bmats_from(PW, [gth[a] for a in b_set])
        G = Hs @ Q
        for a, (cols, bs) in groups.items():
            G[:, cols] += B[b_pos[a]] @ M[:, bs]
        dQ = apply_A(G)
        if triples:
            G = Hs @ R
            G += H.contract3_batch(gth, triples)
            for i, (a, b, c) in enumerate(triples):
                G[:, i] += B[b_pos[a]] @ Q[:, pair_pos[(b, c)]]
                G[:, i] += B[b_pos[b]] @ Q[:, pair_pos[(a, c)]]
                G[:, i] += B[b_pos[c]] @ Q[:, pair_pos[(a, b)]]
            dR = apply_A(G)
    return dW, dM, dQ, dR


def flow_poly(
    H: QuarticPoly,
    W0: np.ndarray,
    t_final: float,
    steps: int,
    M0: np.ndarray | None = None,
    pairs: list[tuple[int, int]] | None = None,
    triples: list[tuple[int, int, int]] | None = None,
) -> FlowSlabs:
    """Fixed-step RK4 flow of ``W' = A grad H`` with joint variations.

    Parameters
    ----------
    W0 : complex vector, shape (n,)
    t_final : float
        Signed integration time (from 0).
    steps : int
        Number of RK4 steps (>= 1).
    M0 : optional (n, k) slab of first-variation seeds.
    pairs : optional list of (a, b) column indices of ``M0``; the second
        variation for each direction pair is propagated (seeded at zero).
        Grouping work is done by the first element, so callers should put the
        index drawn from the smaller set first.
    triples : optional list of (a, b, c); each of the three sub-pairs must be
        present in ``pairs`` (either order).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    W = np.asarray(W0, complex).copy()
    n = W.size
    M = None if M0 is None else np.asarray(M0, complex).copy()
    pairs = list(pairs) if pairs else []
    triples = list(triples) if triples else []
    if (pairs or triples) and M is None:
        raise ValueError("pairs/triples require first-variation seeds")
    pair_pos = {}
    for i, (a, b) in enumerate(pairs):
        pair_pos[(a, b)] = i
        pair_pos.setdefault((b, a), i)
    for t in triples:
        for sub in ((t[1], t[2]), (t[0], t[2]), (t[0], t[1])):
            if sub not in pair_pos:
                raise ValueError(f"triple {t} needs pair {sub} in pairs")
    b_set = sorted({a for a, _ in pairs} | {i for t in triples for i in t})
    b_pos = {a: i for i, a in enumerate(b_set)}
    groups: dict = {}
    for i, (a, b) in enumerate(pairs):
        groups.setdefault(a, ([], []))
        groups[a][0].append(i)
        groups[a][1].append(b)
    groups = {a: (np.array(cols), np.array(bs)) for a, (cols, bs) in groups.items()}
    Q = np.zeros((n, len(pairs)), complex) if pairs else None
    R = np.zeros((n, len(triples)), complex) if triples else None

    h = t_final / steps
    for _ in range(steps):
        k1 = _stage_derivative(H, W, M, Q, R, pairs, triples, pair_pos, b_set, b_pos, groups)
        k2 = _stage_derivative(
            H,
            W + 0.5 * h * k1[0],
            None if M is None else M + 0.5 * h * k1[1],
            None if Q is None else Q + 0.5 * h * k1[2],
            None if R is None else R + 0.5 * h * k1[3],
            pairs, triples, pair_pos, b_set, b_pos, groups,
        )
        k3 = _stage_derivative(
            H,
            W + 0.5 * h * k2[0],
            None if M is None else M + 0.5 * h * k2[1],
            None if Q is None else Q + 0.5 * h * k2[2],
            None if R is None else R + 0.5 * h * k2[3],
            pairs, triples, pair_pos, b_set, b_pos, groups,
        )
        k4 = _stage_derivative(
            H,
            W + h * k3[0],
            None if M is None else M + h * k3[1],
            None if Q is None else Q + h * k3[2],
            None if R is None else R + h * k3[3],
            pairs, triples, pair_pos, b_set, b_pos, groups,
        )
        W = W + (h / 6.0) * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        if M is not None:
            M = M + (h / 6.0) * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if Q is not None:
            Q = Q + (h / 6.0) * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        if R is not None:
            R = R + (h / 6.0) * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
    return FlowSlabs(W=W, M=M, Q=Q, R=R)

"""Truncated phase spaces for the cubic Schrodinger flow on the circle.

Two sides of the same phase space are used throughout the package:

* the *sequence side*: real coordinates ``(x_n, y_n)``, ``n = -N..N``, with the
  flat pairing ``(z, z')_r = x.x' + y.y'`` and the standard Poisson tensor
  ``J(x, y) = (-y, x)``;
* the *function side*: complex Fourier coefficient pairs ``(u_n, v_n)`` of a
  trigonometric polynomial pair ``(u(x), v(x))`` with the bilinear pairing
  ``<w, w'>_r = sum_n u_n u'_{-n} + v_n v'_{-n}`` and the rotation
  ``bbJ(u, v) = (-v, u)``.

The linear map ``fnls_forward`` and its inverse move states between the two
sides; the inverse is exactly symplectic (it pulls the function-side two-form
back to the model two-form), which several modules rely on.

A distinguished finite mode set ``S`` splits the sequence side into the
tangential block ``z_S`` and the normal block ``z_perp``.  States are stored
densely over all modes; the split is realized through index masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "ModeLayout",
    "TruncState",
    "FieldPair",
    "Actions",
    "LinOp",
    "sobolev_norm",
    "project_S",
    "project_perp",
    "pairing_seq_r",
    "pairing_fun_r",
    "apply_J",
    "apply_bbJ",
    "fnls_forward",
    "fnls_inverse",
    "actions_of",
    "fnls_forward_matrix",
    "fnls_inverse_matrix",
    "j_matrix",
    "bbj_matrix",
    "fun_pairing_matrix",
    "fun_symplectic_gram",
    "random_state",
]

_SQRT2 = float(np.sqrt(2.0))


@dataclass(frozen=True)
class ModeLayout:
    """Mode bookkeeping for the truncation ``n in [-N, N]``.

    Parameters
    ----------
    N : int
        Truncation half-width; the space carries ``2N + 1`` modes.
    S : tuple of int
        The distinguished (tangential) mode set, a subset of ``[-N, N]``.
        May be empty.
    """

    N: int
    S: tuple[int, ...] = ()

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("N must be nonnegative")
        S = tuple(sorted(set(int(j) for j in self.S)))
        if S and (S[0] < -self.N or S[-1] > self.N):
            raise ValueError("S must be contained in [-N, N]")
        object.__setattr__(self, "S", S)

    # -- sizes and index helpers -------------------------------------------------
    @property
    def n_modes(self) -> int:
        return 2 * self.N + 1

    @property
    def dim(self) -> int:
        """Real dimension of the sequence side (x and y blocks stacked)."""
        return 2 * self.n_modes

    @property
    def modes(self) -> np.ndarray:
        return np.arange(-self.N, self.N + 1)

    @property
    def S_perp(self) -> tuple[int, ...]:
        return tuple(n for n in range(-self.N, self.N + 1) if n not in set(self.S))

    def index(self, n) -> np.ndarray | int:
        """Array index of mode ``n`` (vectorized)."""
        return np.asarray(n) + self.N

    @property
    def s_mask(self) -> np.ndarray:
        """Boolean mask over modes, True on S."""
        m = np.zeros(self.n_modes, dtype=bool)
        if self.S:
            m[self.index(np.array(self.S))] = True
        return m

    @property
    def s_dirs(self) -> np.ndarray:
        """Indices of the S coordinates inside a stacked vector [x; y].

        Ordered as all x_j (j in S ascending) followed by all y_j.
        """
        if not self.S:
            return np.zeros(0, dtype=int)
        ix = self.index(np.array(self.S))
        return np.concatenate([ix, self.n_modes + ix])

    @property
    def perp_dirs(self) -> np.ndarray:
        """Indices of the normal coordinates inside a stacked vector [x; y]."""
        ix = np.flatnonzero(~self.s_mask)
        return np.concatenate([ix, self.n_modes + ix])

    def weights(self, s: int) -> np.ndarray:
        """Per-mode Sobolev weights ``<n>^s`` with ``<n> = max(1, |n|)``."""
        return np.maximum(1.0, np.abs(self.modes)).astype(float) ** s


def _as_layout_array(layout: ModeLayout, arr, dtype) -> np.ndarray:
    a = np.asarray(arr, dtype=dtype)
    if a.shape != (layout.n_modes,):
        raise ValueError(f"expected shape ({layout.n_modes},), got {a.shape}")
    return a


@dataclass
class TruncState:
    """Sequence-side state: real coordinate pair ``(x_n, y_n)``.

    The coordinate arrays are indexed by mode ``n = -N..N``.  Real states use
    float arrays; a complexified variant (complex dtype) is permitted and is
    used only to carry directional derivatives.
    """

    layout: ModeLayout
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        dtype = complex if (np.iscomplexobj(self.x) or np.iscomplexobj(self.y)) else float
        self.x = _as_layout_array(self.layout, self.x, dtype)
        self.y = _as_layout_array(self.layout, self.y, dtype)

    # -- constructors --------------------------------------------------------
    @classmethod
    def zero(cls, layout: ModeLayout, dtype=float) -> "TruncState":
        return cls(layout, np.zeros(layout.n_modes, dtype), np.zeros(layout.n_modes, dtype))

    @classmethod
    def from_vec(cls, layout: ModeLayout, vec: np.ndarray) -> "TruncState":
        vec = np.asarray(vec)
        m = layout.n_modes
        if vec.shape != (2 * m,):
            raise ValueError(f"expected stacked vector of length {2 * m}")
        return cls(layout, vec[:m].copy(), vec[m:].copy())

    def vec(self) -> np.ndarray:
        """Stacked coordinate vector ``[x; y]`` of length ``2(2N+1)``."""
        return np.concatenate([self.x, self.y])

    def copy(self) -> "TruncState":
        return TruncState(self.layout, self.x.copy(), self.y.copy())

    # -- coordinate access ----------------------------------------------------
    def get(self, n: int) -> tuple[float, float]:
        i = self.layout.index(n)
        return self.x[i], self.y[i]

    def set(self, n: int, xv, yv) -> None:
        i = self.layout.index(n)
        self.x[i] = xv
        self.y[i] = yv

    @property
    def z_S(self) -> "TruncState":
        return project_S(self)

    @property
    def z_perp(self) -> "TruncState":
        return project_perp(self)

    def s_block(self) -> np.ndarray:
        """The S coordinates as a flat vector (x over S ascending, then y)."""
        return self.vec()[self.layout.s_dirs]

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other: "TruncState") -> "TruncState":
        return TruncState(self.layout, self.x + other.x, self.y + other.y)

    def __sub__(self, other: "TruncState") -> "TruncState":
        return TruncState(self.layout, self.x - other.x, self.y - other.y)

    def __mul__(self, c) -> "TruncState":
        return TruncState(self.layout, c * self.x, c * self.y)

    __rmul__ = __mul__

    def __neg__(self) -> "TruncState":
        return TruncState(self.layout, -self.x, -self.y)

    # -- serialization ----------------------------------------------------------
    def to_json(self) -> str:
        if np.iscomplexobj(self.x) or np.iscomplexobj(self.y):
            raise ValueError("only real states are serializable")
        return json.dumps(
            {
                "N": self.layout.N,
                "S": list(self.layout.S),
                "x": self.x.tolist(),
                "y": self.y.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "TruncState":
        d = json.loads(text)
        layout = ModeLayout(int(d["N"]), tuple(d["S"]))
        return cls(layout, np.array(d["x"], float), np.array(d["y"], float))


@dataclass
class FieldPair:
    """Function-side state: Fourier coefficients ``(u_n, v_n)``, complex.

    Represents the trigonometric polynomial pair
    ``u(x) = sum u_n e^{2 pi i n x}``, ``v(x) = sum v_n e^{2 pi i n x}``.
    """

    layout: ModeLayout
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = _as_layout_array(self.layout, self.u, complex)
        self.v = _as_layout_array(self.layout, self.v, complex)

    @classmethod
    def zero(cls, layout: ModeLayout) -> "FieldPair":
        return cls(layout, np.zeros(layout.n_modes, complex), np.zeros(layout.n_modes, complex))

    @classmethod
    def from_vec(cls, layout: ModeLayout, vec: np.ndarray) -> "FieldPair":
        m = layout.n_modes
        vec = np.asarray(vec, complex)
        if vec.shape != (2 * m,):
            raise ValueError(f"expected stacked vector of length {2 * m}")
        return cls(layout, vec[:m].copy(), vec[m:].copy())

    def vec(self) -> np.ndarray:
        """Stacked coefficient vector ``[u; v]``."""
        return np.concatenate([self.u, self.v])

    def copy(self) -> "FieldPair":
        return FieldPair(self.layout, self.u.copy(), self.v.copy())

    def is_real_subspace(self, tol: float = 1e-12) -> bool:
        """True when ``v_n = conj(u_{-n})``, i.e. the pair represents (u, ubar)."""
        return bool(np.max(np.abs(self.v - np.conj(self.u[::-1]))) <= tol)

    @classmethod
    def from_u(cls, layout: ModeLayout, u: np.ndarray) -> "FieldPair":
        """Build the real-subspace pair (u, ubar) from the u coefficients."""
        u = _as_layout_array(layout, u, complex)
        return cls(layout, u.copy(), np.conj(u[::-1]))

    def on_grid(self, K: int) -> tuple[np.ndarray, np.ndarray]:
        """Evaluate (u, v) at the K equispaced points ``x_m = m / K``."""
        E = fourier_eval_matrix(self.layout, K)
        return E @ self.u, E @ self.v

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other: "FieldPair") -> "FieldPair":
        return FieldPair(self.layout, self.u + other.u, self.v + other.v)

    def __sub__(self, other: "FieldPair") -> "FieldPair":
        return FieldPair(self.layout, self.u - other.u, self.v - other.v)

    def __mul__(self, c) -> "FieldPair":
        return FieldPair(self.layout, c * self.u, c * self.v)

    __rmul__ = __mul__

    def __neg__(self) -> "FieldPair":
        return FieldPair(self.layout, -self.u, -self.v)

    def norm0(self) -> float:
        return float(np.sqrt(np.sum(np.abs(self.u) ** 2 + np.abs(self.v) ** 2)))

    def sobolev(self, s: int) -> float:
        w = self.layout.weights(2 * s)
        return float(np.sqrt(np.sum(w * (np.abs(self.u) ** 2 + np.abs(self.v) ** 2))))

    # -- serialization ----------------------------------------------------------
    def to_json(self) -> str:
        enc = lambda a: [[float(c.real), float(c.imag)] for c in a]
        return json.dumps(
            {"N": self.layout.N, "S": list(self.layout.S), "u": enc(self.u), "v": enc(self.v)}
        )

    @classmethod
    def from_json(cls, text: str) -> "FieldPair":
        d = json.loads(text)
        layout = ModeLayout(int(d["N"]), tuple(d["S"]))
        dec = lambda a: np.array([complex(re, im) for re, im in a])
        return cls(layout, dec(d["u"]), dec(d["v"]))


@dataclass
class Actions:
    """Per-mode actions ``I_n = (x_n^2 + y_n^2) / 2``."""

    layout: ModeLayout
    I: np.ndarray

    def __post_init__(self):
        self.I = _as_layout_array(self.layout, self.I, float)

    def get(self, n: int) -> float:
        return float(self.I[self.layout.index(n)])

    def total(self) -> float:
        return float(np.sum(self.I))


# ---------------------------------------------------------------------------
# norms, projections, pairings
# ---------------------------------------------------------------------------

def sobolev_norm(z: TruncState, s: int) -> float:
    """Weighted norm ``||z_S|| + ||z_perp||_s``.

    The tangential block carries the plain Euclidean norm; the normal block is
    weighted by ``<n>^{2s}`` with ``<n> = max(1, |n|)``.  For a state supported
    on the normal block this is the plain ``h^s`` norm used in the tame
    estimates.
    """
    mask = z.layout.s_mask
    ws = z.layout.weights(2 * s)
    dens = np.abs(z.x) ** 2 + np.abs(z.y) ** 2
    n_s = np.sqrt(np.sum(dens[mask]))
    n_perp = np.sqrt(np.sum((ws * dens)[~mask]))
    return float(n_s + n_perp)


def project_S(z: TruncState) -> TruncState:
    mask = z.layout.s_mask
    return TruncState(z.layout, np.where(mask, z.x, 0.0), np.where(mask, z.y, 0.0))


def project_perp(z: TruncState) -> TruncState:
    mask = z.layout.s_mask
    return TruncState(z.layout, np.where(mask, 0.0, z.x), np.where(mask, 0.0, z.y))


def pairing_seq_r(z: TruncState, zp: TruncState):
    """Bilinear pairing ``x.x' + y.y'`` (no complex conjugation)."""
    return (z.x * zp.x + z.y * zp.y).sum()


def pairing_fun_r(w: FieldPair, wp: FieldPair):
    """Bilinear pairing ``sum_n u_n u'_{-n} + v_n v'_{-n}``.

    Equals ``integral(u u' + v v') dx`` for the represented polynomials.
    """
    return (w.u * wp.u[::-1] + w.v * wp.v[::-1]).sum()


def apply_J(z: TruncState) -> TruncState:
    """Poisson tensor ``J(x, y) = (-y, x)``; ``J^2 = -Id``."""
    return TruncState(z.layout, -z.y, z.x)


def apply_bbJ(w: FieldPair) -> FieldPair:
    """Function-side rotation ``(u, v) -> (-v, u)``."""
    return FieldPair(w.layout, -w.v, w.u)


def actions_of(z: TruncState) -> Actions:
    return Actions(z.layout, (np.abs(z.x) ** 2 + np.abs(z.y) ** 2) / 2.0)


# ---------------------------------------------------------------------------
# the linear coordinate map between the two sides
# ---------------------------------------------------------------------------

def fnls_forward(w: FieldPair) -> TruncState:
    """Map function-side coefficients to sequence-side coordinates.

    ``x_n = -(u_{-n} + v_n)/sqrt(2)``, ``y_n = -i (u_{-n} - v_n)/sqrt(2)``.
    On the real subspace ``v = ubar`` this yields the real pair
    ``(-sqrt(2) Re u_{-n}, sqrt(2) Im u_{-n})``.
    """
    ur = w.u[::-1]
    x = -(ur + w.v) / _SQRT2
    y = -1j * (ur - w.v) / _SQRT2
    if w.is_real_subspace(tol=1e-13):
        return TruncState(w.layout, x.real, y.real)
    return TruncState(w.layout, x, y)


def fnls_inverse(z: TruncState) -> FieldPair:
    """Inverse of :func:`fnls_forward`.

    ``u_n = -(x_{-n} - i y_{-n})/sqrt(2)``, ``v_n = -(x_n + i y_n)/sqrt(2)``.
    The pullback of the function-side two-form under this map equals the
    model two-form exactly.
    """
    u = -(z.x[::-1] - 1j * z.y[::-1]) / _SQRT2
    v = -(z.x + 1j * z.y) / _SQRT2
    return FieldPair(z.layout, u, v)


def _reversal(m: int) -> np.ndarray:
    return np.eye(m)[::-1]


def fnls_inverse_matrix(layout: ModeLayout) -> np.ndarray:
    """Dense matrix of :func:`fnls_inverse` on stacked vectors [x;y] -> [u;v]."""
    m = layout.n_modes
    R = _reversal(m)
    I = np.eye(m)
    top = np.hstack([-R / _SQRT2, 1j * R / _SQRT2])
    bot = np.hstack([-I / _SQRT2, -1j * I / _SQRT2])
    return np.vstack([top, bot])


def fnls_forward_matrix(layout: ModeLayout) -> np.ndarray:
    """Dense matrix of :func:`fnls_forward` on stacked vectors [u;v] -> [x;y]."""
    m = layout.n_modes
    R = _reversal(m)
    I = np.eye(m)
    top = np.hstack([-R / _SQRT2, -I / _SQRT2])
    bot = np.hstack([-1j * R / _SQRT2, 1j * I / _SQRT2])
    return np.vstack([top, bot])


def j_matrix(layout: ModeLayout) -> np.ndarray:
    """Matrix of ``J`` on stacked vectors."""
    m = layout.n_modes
    Z = np.zeros((m, m))
    I = np.eye(m)
    return np.block([[Z, -I], [I, Z]])


def bbj_matrix(layout: ModeLayout) -> np.ndarray:
    """Matrix of ``bbJ`` on stacked function-side vectors."""
    return j_matrix(layout)


def fun_pairing_matrix(layout: ModeLayout) -> np.ndarray:
    """Gram matrix of the function-side pairing on stacked vectors."""
    m = layout.n_modes
    R = _reversal(m)
    Z = np.zeros((m, m))
    return np.block([[R, Z], [Z, R]])


def fun_symplectic_gram(layout: ModeLayout) -> np.ndarray:
    """Gram ``W`` of the function-side two-form: form(a, b) = a^T W b.

    The two-form is ``i < bbJ a, b >_r = i * integral(a_u b_v - a_v b_u) dx``.
    """
    m = layout.n_modes
    R = _reversal(m)
    Z = np.zeros((m, m))
    return 1j * np.block([[Z, R], [-R, Z]])


# ---------------------------------------------------------------------------
# linear operators with side tags
# ---------------------------------------------------------------------------

_SIDES = ("seq", "fun")


@dataclass
class LinOp:
    """Dense linear operator between stacked coordinate vectors.

    Parameters
    ----------
    mat : ndarray
        Dense ``dim x dim`` matrix acting on stacked vectors.
    src, tgt : {"seq", "fun"}
        Which side the input/output vectors live on.  The transpose is taken
        with respect to the side pairings (flat dot on the sequence side, the
        reversal pairing on the function side).
    """

    layout: ModeLayout
    mat: np.ndarray
    src: str = "seq"
    tgt: str = "seq"

    def __post_init__(self):
        if self.src not in _SIDES or self.tgt not in _SIDES:
            raise ValueError("side tags must be 'seq' or 'fun'")
        self.mat = np.asarray(self.mat)
        d = self.layout.dim
        if self.mat.shape != (d, d):
            raise ValueError(f"expected {(d, d)} matrix, got {self.mat.shape}")

    def apply(self, state):
        vec = state.vec()
        out = self.mat @ vec
        if self.tgt == "seq":
            if np.max(np.abs(out.imag)) < 1e-13 and not np.iscomplexobj(vec):
                out = out.real
            return TruncState.from_vec(self.layout, out)
        return FieldPair.from_vec(self.layout, out)

    def transpose(self) -> "LinOp":
        """Adjoint with respect to the side pairings (no conjugation)."""
        P = fun_pairing_matrix(self.layout)
        M = self.mat.T
        if self.tgt == "fun":
            M = M @ P
        if self.src == "fun":
            M = P @ M
        return LinOp(self.layout, M, src=self.tgt, tgt=self.src)

    def compose(self, other: "LinOp") -> "LinOp":
        if self.src != other.tgt:
            raise ValueError("side mismatch in composition")
        return LinOp(self.layout, self.mat @ other.mat, src=other.src, tgt=self.tgt)

    def block(self, rows: str, cols: str) -> np.ndarray:
        """Extract a sub-block by coordinate group ('S', 'perp' or 'all').

        Only meaningful for sequence-side axes; 'all' returns that axis whole.
        """
        def sel(which, side):
            if which == "all":
                return np.arange(self.layout.dim)
            if side != "seq":
                raise ValueError("S/perp blocks only exist on the sequence side")
            return self.layout.s_dirs if which == "S" else self.layout.perp_dirs

        r = sel(rows, self.tgt)
        c = sel(cols, self.src)
        return self.mat[np.ix_(r, c)]

    def norm2(self) -> float:
        """Spectral norm."""
        return float(np.linalg.norm(self.mat, 2))

    @classmethod
    def identity(cls, layout: ModeLayout, side: str = "seq") -> "LinOp":
        return cls(layout, np.eye(layout.dim), src=side, tgt=side)


# ---------------------------------------------------------------------------
# misc shared utilities
# ---------------------------------------------------------------------------

def fourier_eval_matrix(layout: ModeLayout, K: int) -> np.ndarray:
    """Evaluation matrix ``E[m, n] = exp(2 pi i n m / K)`` on the K-point grid."""
    xg = np.arange(K) / K
    return np.exp(2j * np.pi * np.outer(xg, layout.modes))


def random_state(
    layout: ModeLayout,
    rng: np.random.Generator,
    s: int = 1,
    amp_S: float = 0.1,
    amp_perp: float = 0.05,
) -> TruncState:
    """Random sequence-side state with Sobolev-decaying normal block.

    Tangential coordinates are O(amp_S) Gaussians on S; normal coordinates are
    per-mode Gaussians scaled by ``<n>^{-s-1}`` and normalized so that
    ``||z_perp||_0 = amp_perp``.
    """
    m = layout.n_modes
    scale = layout.weights(-(s + 1))
    x = rng.standard_normal(m) * scale
    y = rng.standard_normal(m) * scale
    z = TruncState(layout, x, y)
    zp = project_perp(z)
    n0 = sobolev_norm(zp, 0)
    if n0 > 0 and amp_perp > 0:
        zp = (amp_perp / n0) * zp
    zs = TruncState.zero(layout)
    if layout.S:
        ix = layout.index(np.array(layout.S))
        zs.x[ix] = amp_S * (1.0 + 0.3 * rng.standard_normal(len(layout.S)))
        zs.y[ix] = amp_S * (1.0 + 0.3 * rng.standard_normal(len(layout.S)))
    return zs + zp

"""Spectral primitives for the defocusing cubic Hamiltonian on the circle.

All fields are truncated trigonometric polynomials handled by their Fourier
coefficients (mode range ``[-N, N]``).  Products are exact full convolutions;
integrals over the circle extract the zero mode.  The Hamiltonian is

    H(u, v) = integral( u_x v_x + u^2 v^2 ) dx

evaluated on coefficient pairs; on the real slice ``v = conj-flip(u)`` it is
real.  The quartic part of all derivative formulas keeps the projection onto
the mode window (the gradient is the projected field ``(2uv^2, 2u^2v)``).
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import toeplitz

from .phase_space import FieldPair, ModeLayout

__all__ = [
    "d2_symbol",
    "h2_value",
    "h4_value",
    "h_value",
    "grad_arrays",
    "dgrad_matrix",
    "d3_h4_cube",
    "mult_matrix",
    "conv",
]


def d2_symbol(layout: ModeLayout) -> np.ndarray:
    """Fourier symbol of ``-d^2/dx^2``: ``4 pi^2 n^2``."""
    return (2.0 * np.pi * layout.modes.astype(float)) ** 2


def conv(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full spectral product; index k of the result is mode ``k - (la+lb)/2``."""
    return np.convolve(a, b)


def _zero_mode(c: np.ndarray) -> complex:
    """Zero-Fourier-mode of a full-convolution coefficient array."""
    return complex(c[(c.size - 1) // 2])


def h2_value(layout: ModeLayout, u: np.ndarray, v: np.ndarray) -> complex:
    """Quadratic part ``integral(u_x v_x) = sum 4 pi^2 n^2 u_{-n} v_n``."""
    return complex(np.sum(d2_symbol(layout) * u[::-1] * v))


def h4_value(u: np.ndarray, v: np.ndarray) -> complex:
    """Quartic part ``integral(u^2 v^2)``."""
    return _zero_mode(conv(conv(u, u), conv(v, v)))


def h_value(layout: ModeLayout, u: np.ndarray, v: np.ndarray) -> complex:
    return h2_value(layout, u, v) + h4_value(u, v)


def _project(c: np.ndarray, m: int) -> np.ndarray:
    """Central ``m`` coefficients of a longer convolution result."""
    k = (c.size - m) // 2
    return c[k:k + m]


def grad_arrays(layout: ModeLayout, u: np.ndarray, v: np.ndarray):
    """Pairing-gradient of H: ``( -v'' + P(2 u v^2), -u'' + P(2 u^2 v) )``."""
    m = layout.n_modes
    w2 = d2_symbol(layout)
    vv = conv(v, v)
    uu = conv(u, u)
    gu = w2 * v + 2.0 * _project(conv(u, vv), m)
    gv = w2 * u + 2.0 * _project(conv(v, uu), m)
    return gu, gv


def mult_matrix(g: np.ndarray, m: int) -> np.ndarray:
    """Matrix of truncated multiplication by the spectral profile ``g``.

    ``(M f)_n = sum_k g_{n-k} f_k`` for ``n, k`` in the centered window of
    width ``m``;  ``g`` must be a centered coefficient array of odd length
    covering all needed differences.
    """
    c0 = (g.size - 1) // 2
    col = g[c0:c0 + m]
    row = g[c0::-1][:m]
    return toeplitz(col, row)


def dgrad_matrix(layout: ModeLayout, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Dense derivative of the gradient field on stacked vectors [u; v]."""
    m = layout.n_modes
    D2 = np.diag(d2_symbol(layout)).astype(complex)
    Mvv = mult_matrix(2.0 * conv(v, v), m)
    Muu = mult_matrix(2.0 * conv(u, u), m)
    Muv = mult_matrix(4.0 * conv(u, v), m)
    top = np.hstack([Mvv, D2 + Muv])
    bot = np.hstack([D2 + Muv, Muu])
    return np.vstack([top, bot])


def d3_h4_cube(u0, v0, ud, vd) -> complex:
    """Third derivative of the quartic part, cubed direction:
    ``12 integral( u0 ud vd^2 + ud^2 v0 vd )``."""
    t1 = conv(conv(u0, ud), conv(vd, vd))
    t2 = conv(conv(ud, ud), conv(v0, vd))
    return 12.0 * (_zero_mode(t1) + _zero_mode(t2))

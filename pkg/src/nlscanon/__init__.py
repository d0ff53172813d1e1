"""Canonical-coordinate toolkit for the defocusing cubic Schrodinger flow
on the circle: truncated phase spaces, Birkhoff-type coordinate maps, the
linearized chart along a finite mode set, a symplectic corrector that makes
the chart exactly canonical, differential-form utilities with certified
numerics, and a verification driver exposing the bundled experiments.
"""

from .zs_spectral import (
    BracketingWarning,
    DegenerateEigenbasis,
    DirichletData,
    RefinementFailure,
    ZSPotential,
    dirichlet_eigenfunctions,
    dirichlet_eigenvalue_near,
    dirichlet_eigenvalues,
    dirichlet_mismatch,
    dpsi_nls_columns,
    eigen_residual,
    fundamental_solution,
    grad_frak_z,
)
from .nls_hamiltonian import (
    HamiltonianSplit,
    OmegaOps,
    P3Terms,
    d3_h4,
    d_grad_h_nls,
    floquet,
    floquet_residual,
    grad_h_nls,
    grad_p3,
    h_nls,
    make_split,
    normal_energy,
    normal_energy_rate,
    omega_ops,
    p2_residual,
    p3,
    p3_terms,
    r1_operator,
    r_xy_operators,
    slice_energy,
    taylor_remainder_T31,
    transformed_h,
)
from .phase_space import (
    Actions,
    FieldPair,
    LinOp,
    ModeLayout,
    TruncState,
    actions_of,
    apply_J,
    apply_bbJ,
    fnls_forward,
    fnls_inverse,
    pairing_fun_r,
    pairing_seq_r,
    project_S,
    project_perp,
    sobolev_norm,
)

__version__ = "0.1.0"

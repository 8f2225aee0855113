#!/usr/bin/env python3
"""
Modal Reduction
Eigen solve, Rayleigh damping, modal reduction of flexible bodies and
mesh-independent field recovery by mode superposition
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd
from scipy import linalg

logger = logging.getLogger(__name__)

SUFFICIENT_EFFECTIVE_MASS = 0.95


class ModalError(ValueError):
    """Raised for invalid matrices, mode counts or mode-shape tables"""


@dataclass
class ModalBasis:
    """Mass-normalized eigenmodes of a discrete flexible body"""
    U: np.ndarray
    omega: np.ndarray
    mu: np.ndarray
    Omega: np.ndarray
    gamma: Optional[np.ndarray] = None
    m_eff_fraction: Optional[float] = None

    @property
    def n_modes(self) -> int:
        return self.U.shape[1]


@dataclass
class ReducedFlexibleBody:
    """Diagonal modal equations mu*q'' + (alpha*mu + beta*Omega)*q' + Omega*q = U^T f"""
    n_modes: int
    mu: np.ndarray
    Omega: np.ndarray
    damping: np.ndarray
    alpha: float
    beta: float
    attachment_rows: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def modal_matrices(self):
        """Return the (M, C, K) blocks of the reduced body"""
        return np.diag(self.mu), np.diag(self.damping), np.diag(self.Omega)


@dataclass
class ModeShapeTable:
    """Mode-shape samples at spatial points"""
    points: np.ndarray
    values: np.ndarray
    provenance: str = "analytic"

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.shape[0] == 1 and self.values.shape[0] != 1:
            self.points = self.points.T
        if self.points.shape[0] != self.values.shape[0]:
            raise ModalError(
                f"Mode-shape rows ({self.values.shape[0]}) do not match points ({self.points.shape[0]})"
            )
        if np.isnan(self.values).any():
            raise ModalError("Mode-shape table contains NaN")

    @property
    def n_modes(self) -> int:
        return self.values.shape[1]

    def to_frame(self) -> pd.DataFrame:
        coords = ['x', 'y', 'z'][:self.points.shape[1]]
        df = pd.DataFrame(self.points, columns=coords)
        for i in range(self.n_modes):
            df[f"mode_{i + 1}"] = self.values[:, i]
        return df

    def to_csv(self, path: str):
        """Write x[, y, z], mode_1..mode_n columns"""
        self.to_frame().to_csv(path, index=False, float_format='%.17g')

    @classmethod
    def from_csv(cls, path: str, provenance: str = "discrete") -> "ModeShapeTable":
        """Read a table written by to_csv (or any file with the same columns)"""
        df = pd.read_csv(path)
        coords = [c for c in ['x', 'y', 'z'] if c in df.columns]
        modes = sorted(
            [c for c in df.columns if c.startswith('mode_')],
            key=lambda c: int(c.split('_')[1])
        )
        if not coords or not modes:
            raise ModalError(f"{path}: expected coordinate and mode_i columns")
        return cls(df[coords].to_numpy(float), df[modes].to_numpy(float), provenance)


def solve_eigen(M: np.ndarray, K: np.ndarray, n: int) -> ModalBasis:
    """
    Lowest n eigenpairs of K u = w^2 M u with mass-normalized modes

    Args:
        M: Symmetric positive-definite mass matrix
        K: Symmetric positive semi-definite stiffness matrix
        n: Number of modes to keep

    Returns:
        ModalBasis with U^T M U = I
    """
    M = np.asarray(M, dtype=float)
    K = np.asarray(K, dtype=float)
    dim = M.shape[0]
    if M.shape != (dim, dim) or K.shape != (dim, dim):
        raise ModalError(f"M {M.shape} and K {K.shape} must be square and equal")
    if n < 1 or n > dim:
        raise ModalError(f"Requested {n} modes for a {dim}-DOF model")

    try:
        L = linalg.cholesky(M, lower=True)
    except linalg.LinAlgError as e:
        raise ModalError(f"Mass matrix is not positive definite: {e}") from e

    # A = L^-1 K L^-T
    X = linalg.solve_triangular(L, K, lower=True)
    A = linalg.solve_triangular(L, X.T, lower=True).T
    A = 0.5 * (A + A.T)
    eigvals, Y = linalg.eigh(A, subset_by_index=[0, n - 1])

    U = linalg.solve_triangular(L.T, Y, lower=False)
    eigvals = np.clip(eigvals, 0.0, None)
    omega = np.sqrt(eigvals)
    mu = np.einsum('ij,ij->j', U, M @ U)

    return ModalBasis(U=U, omega=omega, mu=mu, Omega=eigvals)


def euler_beam_modes(m_r: float, l: float, k_max: int, x) -> ModeShapeTable:
    """
    Analytic mass-normalized modes of a pinned-pinned Euler beam

    Args:
        m_r: Mass per meter (kg/m)
        l: Span length (m)
        k_max: Number of modes
        x: Sample coordinates in [0, l]

    Returns:
        ModeShapeTable with values[i, k] = sqrt(2/(m_r l)) sin(k pi x_i / l)
    """
    if m_r <= 0 or l <= 0:
        raise ModalError("Beam mass per meter and length must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if (x < 0).any() or (x > l).any():
        raise ModalError(f"Beam coordinates must lie within [0, {l}]")
    k = np.arange(1, k_max + 1)
    values = np.sqrt(2.0 / (m_r * l)) * np.sin(np.outer(x, k) * np.pi / l)
    return ModeShapeTable(points=x[:, None], values=values, provenance="analytic")


def euler_beam_frequencies(EI: float, m_r: float, l: float, k_max: int) -> np.ndarray:
    """Natural frequencies (rad/s) of the pinned-pinned Euler beam"""
    k = np.arange(1, k_max + 1)
    return (k * np.pi / l) ** 2 * np.sqrt(EI / m_r)


def lumped_chain_matrices(n_nodes: int, total_mass: float, stiffness: float,
                          ends: str = "fixed"):
    """
    Spring-mass chain standing in for a discretized flexible body

    Args:
        n_nodes: Number of interior nodes (one DOF each)
        total_mass: Mass spread evenly over the nodes (kg)
        stiffness: Stiffness of each segment spring (N/m)
        ends: 'fixed' grounds both ends, 'free' leaves them unconstrained

    Returns:
        Tuple of (M, K)
    """
    if n_nodes < 1 or total_mass <= 0 or stiffness <= 0:
        raise ModalError("Chain needs at least one node, positive mass and stiffness")
    M = np.eye(n_nodes) * (total_mass / n_nodes)
    K = np.zeros((n_nodes, n_nodes))
    for i in range(n_nodes - 1):
        K[i, i] += stiffness
        K[i + 1, i + 1] += stiffness
        K[i, i + 1] -= stiffness
        K[i + 1, i] -= stiffness
    if ends == "fixed":
        K[0, 0] += stiffness
        K[-1, -1] += stiffness
    elif ends != "free":
        raise ModalError(f"Unknown chain end condition '{ends}'")
    return M, K


def reduce(M: np.ndarray, K: np.ndarray, basis: ModalBasis, alpha: float, beta: float,
           attachment_dofs: Optional[List[int]] = None) -> ReducedFlexibleBody:
    """
    Project (M, K) with Rayleigh damping onto the modal basis

    Args:
        M: Mass matrix the basis was computed from
        K: Stiffness matrix the basis was computed from
        basis: ModalBasis from solve_eigen
        alpha: Mass-proportional Rayleigh constant
        beta: Stiffness-proportional Rayleigh constant
        attachment_dofs: Physical DOFs of coupling points (rows of U kept)

    Returns:
        ReducedFlexibleBody with diagonal modal damping alpha*mu + beta*Omega
    """
    M = np.asarray(M, dtype=float)
    K = np.asarray(K, dtype=float)
    if basis.U.shape[0] != M.shape[0] or M.shape != K.shape:
        raise ModalError(
            f"Basis with {basis.U.shape[0]} rows does not match a {M.shape[0]}-DOF model"
        )
    mu = np.einsum('ij,ij->j', basis.U, M @ basis.U)
    Omega = np.einsum('ij,ij->j', basis.U, K @ basis.U)
    damping = alpha * mu + beta * Omega

    rows = basis.U[attachment_dofs, :] if attachment_dofs else np.zeros((0, basis.n_modes))
    return ReducedFlexibleBody(
        n_modes=basis.n_modes, mu=mu, Omega=Omega, damping=damping,
        alpha=alpha, beta=beta, attachment_rows=rows
    )


def effective_mass(basis: ModalBasis, M: np.ndarray, D: np.ndarray) -> float:
    """
    Fraction of the mass along D captured by the retained modes

    Args:
        basis: ModalBasis (mass-normalized)
        M: Mass matrix
        D: Unit-displacement vector

    Returns:
        sum(gamma_i^2) / (D^T M D); also stored on the basis with gamma
    """
    D = np.asarray(D, dtype=float)
    if D.shape[0] != M.shape[0] or basis.U.shape[0] != M.shape[0]:
        raise ModalError("Unit-displacement vector, mass matrix and basis sizes differ")
    total = float(D @ M @ D)
    if not np.any(D) or total <= 0:
        raise ModalError("Unit-displacement vector must be nonzero")

    gamma = basis.U.T @ (M @ D)
    fraction = float(np.sum(gamma ** 2) / total)
    basis.gamma = gamma
    basis.m_eff_fraction = fraction

    if fraction < SUFFICIENT_EFFECTIVE_MASS:
        logger.warning(f"Effective mass {fraction:.3f} is below {SUFFICIENT_EFFECTIVE_MASS}")
    return fraction


def recover_field(shapes: ModeShapeTable, q: np.ndarray) -> np.ndarray:
    """
    Superpose modal trajectories into a physical field

    Args:
        shapes: ModeShapeTable at the points of interest
        q: n_t x n_modes modal amplitudes (or their time derivatives)

    Returns:
        n_t x n_points field
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if q.shape[1] != shapes.n_modes:
        raise ModalError(f"Trajectory has {q.shape[1]} modes, table has {shapes.n_modes}")
    return q @ shapes.values.T

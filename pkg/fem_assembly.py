"""
P1 Finite-Element Assembly for the Bloch-Torrey System
======================================================
Assembles the sparse matrices of the semi-discrete Bloch-Torrey equation

    M dxi/dt = -(S + Q + R + i*gamma*J(g(t))) xi

over linear tetrahedral elements:

    M       mass                      int phi_i phi_j
    S       stiffness                 int (D grad phi_i) . grad phi_j
    Q       boundary flux             zero (impermeable boundary, kappa = 0)
    R       relaxation                M / T2 (zero for T2 = inf)
    Jx..Jz  coordinate-weighted mass  int x phi_i phi_j

All matrices share the mesh-adjacency sparsity pattern and are assembled in a
fixed element order, so repeated runs give bit-identical CSR arrays.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import scipy.io
from scipy.sparse import coo_matrix, csr_matrix

from mesh_io import TetMesh, signed_volumes
from recon_constants import (
    D0_DEFAULT, GAMMA, KAPPA_DEFAULT, RHO_DEFAULT, T2_DEFAULT, VOLUME_EPS,
)
from recon_errors import ConfigError, MeshError

logger = logging.getLogger(__name__)


# =============================================================================
# DATA STRUCTURES
# =============================================================================

@dataclass(frozen=True)
class PhysicsParams:
    """
    Tissue and scanner constants in internal units (um, ms, mT).

    diffusion_tensor, when given, replaces the scalar D0 in the stiffness
    matrix; D0 is then only used for truncation heuristics.
    """
    D0: float = D0_DEFAULT
    T2: float = T2_DEFAULT
    kappa: float = KAPPA_DEFAULT
    rho: float = RHO_DEFAULT
    gamma: float = GAMMA
    diffusion_tensor: Optional[tuple] = None

    def __post_init__(self):
        if not self.D0 > 0:
            raise ConfigError(f"D0 must be > 0, got {self.D0}")
        if not self.T2 > 0:
            raise ConfigError(f"T2 must be > 0 or inf, got {self.T2}")
        if self.kappa != 0.0:
            raise ConfigError("Only impermeable boundaries (kappa = 0) are supported")
        if not self.rho > 0:
            raise ConfigError(f"rho must be > 0, got {self.rho}")
        if not math.isclose(self.gamma, GAMMA, rel_tol=1e-12):
            raise ConfigError(f"gamma must equal {GAMMA} rad/(ms*mT), got {self.gamma}")
        if self.diffusion_tensor is not None:
            d = np.asarray(self.diffusion_tensor, dtype=float)
            if d.shape != (3, 3) or not np.allclose(d, d.T):
                raise ConfigError("diffusion_tensor must be a symmetric 3x3 matrix")
            if np.linalg.eigvalsh(d).min() <= 0:
                raise ConfigError("diffusion_tensor must be positive definite")
            object.__setattr__(self, 'diffusion_tensor', tuple(map(tuple, d)))

    @property
    def tensor(self) -> np.ndarray:
        if self.diffusion_tensor is None:
            return self.D0 * np.eye(3)
        return np.asarray(self.diffusion_tensor, dtype=float)

    def to_dict(self) -> Dict:
        return {
            'D0': self.D0, 'T2': self.T2, 'kappa': self.kappa, 'rho': self.rho,
            'gamma': self.gamma, 'diffusion_tensor': self.diffusion_tensor,
        }


@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Sparse V x V matrices of the discretized operator (CSR, shared pattern)."""
    M: csr_matrix
    S: csr_matrix
    Q: csr_matrix
    R: csr_matrix
    Jx: csr_matrix
    Jy: csr_matrix
    Jz: csr_matrix

    @property
    def size(self) -> int:
        return self.M.shape[0]

    def J(self, direction) -> csr_matrix:
        """Coordinate-weighted mass along a direction: dx*Jx + dy*Jy + dz*Jz."""
        dx, dy, dz = direction
        return dx * self.Jx + dy * self.Jy + dz * self.Jz

    def as_dict(self) -> Dict[str, csr_matrix]:
        return {'M': self.M, 'S': self.S, 'Q': self.Q, 'R': self.R,
                'Jx': self.Jx, 'Jy': self.Jy, 'Jz': self.Jz}


# =============================================================================
# ELEMENT MATRICES
# =============================================================================

# Reference P1 mass pattern: (1 + delta_ij)
_MASS_PATTERN = np.ones((4, 4)) + np.eye(4)


def _element_gradients(p: np.ndarray) -> np.ndarray:
    """
    Constant barycentric gradients of every element, shape (T, 4, 3).
    For edge matrix E = [x1-x0, x2-x0, x3-x0]^T, grad lambda_{1..3} are the
    columns of E^-1 and grad lambda_0 = -sum of the others.
    """
    edges = p[:, 1:, :] - p[:, :1, :]
    inv = np.linalg.inv(edges)                 # (T, 3, 3)
    g123 = np.transpose(inv, (0, 2, 1))        # rows = gradients
    g0 = -g123.sum(axis=1, keepdims=True)
    return np.concatenate([g0, g123], axis=1)


def _assemble_block(tets: np.ndarray, local: np.ndarray, n: int) -> csr_matrix:
    rows = np.repeat(tets, 4, axis=1).ravel()
    cols = np.tile(tets, (1, 4)).ravel()
    return coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble(mesh: TetMesh, params: PhysicsParams) -> FemMatrices:
    """
    Assemble M, S, Q, R, Jx, Jy, Jz with exact P1 integrals.

    Element formulas (vol = element volume, s = sum of the 4 vertex coordinates):
        M_e  = vol/20  * (1 + delta_ij)
        S_e  = vol * grad_i^T D grad_j
        Jx_e = vol/120 * (1 + delta_ij) * (s_x + x_i + x_j)
    """
    vols = signed_volumes(mesh)
    if np.any(vols <= VOLUME_EPS):
        k = int(np.argmin(vols))
        raise MeshError(f"Degenerate element {k} (signed volume {vols[k]:.3e})")

    n = mesh.n_vertices
    tets = mesh.tets
    p = mesh.vertices[tets]                                  # (T, 4, 3)
    v = vols[:, None, None]

    m_local = v / 20.0 * _MASS_PATTERN
    grads = _element_gradients(p)
    d = params.tensor
    s_local = v * np.einsum('tia,ab,tjb->tij', grads, d, grads)

    j_local = []
    for axis in range(3):
        x = p[:, :, axis]
        total = x.sum(axis=1)[:, None, None]
        pair = x[:, :, None] + x[:, None, :]
        j_local.append(v / 120.0 * _MASS_PATTERN * (total + pair))

    M = _assemble_block(tets, m_local, n)
    S = _assemble_block(tets, s_local, n)
    Jx, Jy, Jz = (_assemble_block(tets, jl, n) for jl in j_local)

    # Q and R keep M's pattern with explicit zeros when inactive
    Q = M * 0.0
    R = M / params.T2 if math.isfinite(params.T2) else M * 0.0

    logger.debug("Assembled FEM system: V=%d, nnz=%d", n, M.nnz)
    return FemMatrices(M=M, S=S, Q=Q, R=R, Jx=Jx, Jy=Jy, Jz=Jz)


def signal_weights(mesh: TetMesh) -> np.ndarray:
    """w_k = integral of phi_k over the domain: each tet gives vol/4 to its vertices."""
    vols = np.abs(signed_volumes(mesh))
    w = np.zeros(mesh.n_vertices)
    np.add.at(w, mesh.tets.ravel(), np.repeat(vols / 4.0, 4))
    return w


def dump_matrix_market(fem: FemMatrices, directory) -> Dict[str, Path]:
    """Write every matrix as <name>.mtx for cross-checking with external FEM tools."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, mat in fem.as_dict().items():
        path = directory / f"{name}.mtx"
        scipy.io.mmwrite(str(path), mat, comment=f"meshrecon FEM matrix {name}", precision=17)
        paths[name] = path
    return paths

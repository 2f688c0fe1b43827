"""
Truncated Laplace Eigenbasis (matrix formalism setup)
=====================================================
Solves the generalized eigenproblem S v = lambda M v of the FEM diffusion
operator (Neumann boundary) for its smallest eigenpairs, then projects the
Bloch-Torrey operators onto the M-orthonormal eigenvectors P:

    L  = diag(lambda)        Ax = P' Jx P   (same for y, z)
    T  = P' R P              moments = P' w,  w = M 1

Small systems (V <= 600) use a dense solve; larger ones use shift-invert
Lanczos (eigsh) with a negative shift so S - sigma*M is positive definite.
"""

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from fem_assembly import FemMatrices, PhysicsParams
from mesh_io import TetMesh, bounding_box, mesh_hash
from recon_constants import (
    CACHE_ENV_VAR, EIG_DENSE_MAX_VERTICES, EIG_MAX_MODES, EIG_MIN_MODES,
    EIG_RESIDUAL_TOL,
)
from recon_errors import ConfigError, EigenSolverError

logger = logging.getLogger(__name__)


# =============================================================================
# DATA STRUCTURE
# =============================================================================

@dataclass(frozen=True, eq=False)
class LaplaceBasis:
    eigenvalues: np.ndarray          # (N,) ascending, ms^-1
    eigvecs: np.ndarray              # (V, N) M-orthonormal
    Ax: np.ndarray                   # (N, N)
    Ay: np.ndarray
    Az: np.ndarray
    T: np.ndarray                    # (N, N), zero for T2 = inf
    moments: np.ndarray              # (N,) integral of each eigenfunction

    @property
    def n_eig(self) -> int:
        return self.eigenvalues.shape[0]

    @property
    def L(self) -> np.ndarray:
        return np.diag(self.eigenvalues)

    def A(self, direction) -> np.ndarray:
        dx, dy, dz = direction
        return dx * self.Ax + dy * self.Ay + dz * self.Az


# =============================================================================
# EIGENSOLVERS
# =============================================================================

def _residuals(fem: FemMatrices, lam: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    r = fem.S @ vecs - (fem.M @ vecs) * lam[None, :]
    return np.linalg.norm(r, axis=0) / np.linalg.norm(vecs, axis=0)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Largest-magnitude entry of every column made positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs[None, :]


def _m_orthonormalize(fem: FemMatrices, vecs: np.ndarray) -> np.ndarray:
    gram = vecs.T @ (fem.M @ vecs)
    gram = 0.5 * (gram + gram.T)
    chol = scipy.linalg.cholesky(gram, lower=False)
    return scipy.linalg.solve_triangular(chol, vecs.T, trans='T', lower=False).T


def _dense_eigs(fem: FemMatrices, n_eig: Optional[int], threshold: Optional[float]):
    S = fem.S.toarray()
    M = fem.M.toarray()
    if threshold is not None:
        lam, vecs = scipy.linalg.eigh(S, M, subset_by_value=[-np.inf, threshold])
    else:
        lam, vecs = scipy.linalg.eigh(S, M, subset_by_index=[0, n_eig - 1])
    return lam, vecs


def _sparse_eigs(fem: FemMatrices, k: int):
    # Negative shift keeps S - sigma*M definite despite the constant kernel
    scale = fem.S.diagonal().sum() / fem.M.diagonal().sum()
    sigma = -1e-3 * scale
    try:
        lam, vecs = eigsh(fem.S.tocsc(), k=k, M=fem.M.tocsc(), sigma=sigma, which='LM',
                          tol=1e-12)
    except ArpackNoConvergence as e:
        res = _residuals(fem, e.eigenvalues, e.eigenvectors) if len(e.eigenvalues) else []
        raise EigenSolverError(f"eigsh did not converge for k={k}; "
                               f"{len(e.eigenvalues)} pairs converged, residuals {np.round(res, 12)}")
    order = np.argsort(lam)
    return lam[order], vecs[:, order]


def solve_eigenpairs(fem: FemMatrices, n_eig: Optional[int] = None,
                     threshold: Optional[float] = None,
                     max_modes: int = EIG_MAX_MODES,
                     method: str = 'auto'):
    """
    Smallest eigenpairs of S v = lambda M v: either the first n_eig, or all with
    lambda <= threshold (capped at max_modes). Returns (lambda, P) with P
    M-orthonormal and sign-normalized.
    """
    V = fem.size
    if n_eig is not None and not 1 <= n_eig <= V:
        raise ConfigError(f"n_eig must lie in [1, {V}], got {n_eig}")
    if method == 'auto':
        method = 'dense' if V <= EIG_DENSE_MAX_VERTICES else 'sparse'
    cap = min(max_modes, V)

    if method == 'dense':
        lam, vecs = _dense_eigs(fem, n_eig, threshold)
        if threshold is not None and len(lam) > cap:
            logger.info("Length-scale truncation capped at %d modes (%d below threshold)", cap, len(lam))
            lam, vecs = lam[:cap], vecs[:, :cap]
        if threshold is not None and len(lam) < EIG_MIN_MODES:
            lam, vecs = _dense_eigs(fem, min(EIG_MIN_MODES, V), None)
    elif method == 'sparse':
        if threshold is None:
            if n_eig >= V - 1:
                lam, vecs = _dense_eigs(fem, n_eig, None)
            else:
                lam, vecs = _sparse_eigs(fem, n_eig)
        else:
            k = min(32, cap, V - 2)
            while True:
                lam, vecs = _sparse_eigs(fem, k)
                if lam[-1] > threshold or k >= min(cap, V - 2):
                    break
                k = min(2 * k, cap, V - 2)
            keep = max(EIG_MIN_MODES, int(np.count_nonzero(lam <= threshold)))
            lam, vecs = lam[:keep], vecs[:, :keep]
    else:
        raise ConfigError(f"Unknown eigensolver method '{method}'")

    vecs = _fix_signs(_m_orthonormalize(fem, vecs))
    lam = np.where(np.abs(lam) < 1e-12 * max(1.0, abs(lam[-1])), 0.0, lam)

    res = _residuals(fem, lam, vecs)
    tol = EIG_RESIDUAL_TOL
    if np.any(res > tol):
        worst = int(np.argmax(res))
        raise EigenSolverError(f"Eigenpair {worst} residual {res[worst]:.3e} exceeds {tol:.1e}")
    return lam, vecs


# =============================================================================
# BASIS CONSTRUCTION
# =============================================================================

def project_operators(fem: FemMatrices, eigvecs: np.ndarray,
                      eigenvalues: Optional[np.ndarray] = None) -> LaplaceBasis:
    """Congruence of the sparse FEM matrices with the eigenvectors."""
    P = np.asarray(eigvecs)

    def congruence(mat):
        out = P.T @ (mat @ P)
        return 0.5 * (out + out.T)

    if eigenvalues is None:
        eigenvalues = np.diag(congruence(fem.S)).copy()
    weights = np.asarray(fem.M.sum(axis=1)).ravel()
    return LaplaceBasis(
        eigenvalues=np.asarray(eigenvalues, dtype=float),
        eigvecs=P,
        Ax=congruence(fem.Jx),
        Ay=congruence(fem.Jy),
        Az=congruence(fem.Jz),
        T=congruence(fem.R),
        moments=P.T @ weights,
    )


def length_scale_threshold(params: PhysicsParams, length_scale: float) -> float:
    """Eigenvalue cutoff D0 * (pi / l)^2 for a resolved length scale l (um)."""
    if not length_scale > 0:
        raise ConfigError(f"length_scale must be > 0, got {length_scale}")
    return params.D0 * (np.pi / length_scale) ** 2


def default_length_scale(mesh: TetMesh) -> float:
    """Half the smallest bounding-box extent."""
    lo, hi = bounding_box(mesh)
    return float((hi - lo).min() / 2.0)


def solve_basis(fem: FemMatrices, params: PhysicsParams,
                n_eig: Optional[int] = None,
                length_scale: Optional[float] = None,
                max_modes: int = EIG_MAX_MODES,
                method: str = 'auto') -> LaplaceBasis:
    """Eigensolve plus projection. Give exactly one of n_eig or length_scale."""
    if (n_eig is None) == (length_scale is None):
        raise ConfigError("Give exactly one of n_eig or length_scale")
    threshold = None if length_scale is None else length_scale_threshold(params, length_scale)
    lam, vecs = solve_eigenpairs(fem, n_eig=n_eig, threshold=threshold,
                                 max_modes=max_modes, method=method)
    basis = project_operators(fem, vecs, lam)
    logger.debug("Laplace basis: %d modes, lambda_max=%.4g", basis.n_eig, lam[-1])
    return basis


def reorthonormalize_eigenspaces(fem: FemMatrices, basis: LaplaceBasis,
                                 rng: np.random.Generator, rtol: float = 1e-6) -> LaplaceBasis:
    """Rotate every repeated-eigenvalue block by a random orthogonal matrix."""
    lam = basis.eigenvalues
    P = np.array(basis.eigvecs, copy=True)
    start = 0
    while start < len(lam):
        stop = start + 1
        while stop < len(lam) and abs(lam[stop] - lam[start]) <= rtol * max(1.0, abs(lam[start])):
            stop += 1
        if stop - start > 1:
            q, _ = np.linalg.qr(rng.normal(size=(stop - start, stop - start)))
            P[:, start:stop] = P[:, start:stop] @ q
        start = stop
    return project_operators(fem, P, lam)


# =============================================================================
# CACHE
# =============================================================================

def resolve_cache_dir(cache_dir=None) -> Optional[Path]:
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get(CACHE_ENV_VAR)
    return Path(env) if env else None


def _basis_key(mesh: TetMesh, params: PhysicsParams, n_eig, length_scale, max_modes) -> str:
    payload = json.dumps({
        'mesh': mesh_hash(mesh), 'params': params.to_dict(),
        'n_eig': n_eig, 'length_scale': length_scale, 'max_modes': max_modes,
    }, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()


def load_or_solve_basis(mesh: TetMesh, fem: FemMatrices, params: PhysicsParams,
                        n_eig: Optional[int] = None,
                        length_scale: Optional[float] = None,
                        max_modes: int = EIG_MAX_MODES,
                        cache_dir=None) -> LaplaceBasis:
    """
    solve_basis with the default truncation (half the smallest extent) when
    neither n_eig nor length_scale is given, cached as .npz when a cache
    directory is configured.
    """
    if n_eig is None and length_scale is None:
        length_scale = default_length_scale(mesh)
    directory = resolve_cache_dir(cache_dir)
    path = None
    if directory is not None:
        path = directory / f"basis_{_basis_key(mesh, params, n_eig, length_scale, max_modes)}.npz"
        if path.exists():
            with np.load(path) as data:
                logger.debug("Basis cache hit: %s", path.name)
                return LaplaceBasis(**{k: data[k] for k in data.files})

    basis = solve_basis(fem, params, n_eig=n_eig, length_scale=length_scale, max_modes=max_modes)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, eigenvalues=basis.eigenvalues, eigvecs=basis.eigvecs,
                 Ax=basis.Ax, Ay=basis.Ay, Az=basis.Az, T=basis.T, moments=basis.moments)
    return basis

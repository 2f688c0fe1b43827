"""
Graph-Laplacian Spectral Codec
==============================
Encodes the vertex positions of a fixed-connectivity mesh in the eigenbasis of
the combinatorial graph Laplacian L = D - A of its tet-edge graph:

    C = Phi[:, :n]' P        (encode, n x 3 coefficients)
    P = Phi[:, :n] C         (decode)

Low modes carry the coarse shape. The optimizable latent z is a fixed subset
of (mode, axis) entries of C; every other coefficient stays frozen at a base
value.

Latent layouts:
    mode_major   (mode, axis) pairs ordered by mode, then x, y, z
    per_axis     the same k modes on each axis (latent_dim divisible by 3)
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.sparse.csgraph import connected_components, laplacian

from laplace_eigen import resolve_cache_dir
from mesh_io import TetMesh, connectivity_hash, inverted_count, vertex_adjacency
from recon_constants import (
    CODEC_INCLUDE_TRANSLATION, CODEC_LATENT_DIM, CODEC_LATENT_LAYOUT,
    CODEC_N_COEFF, CSV_FLOAT_FORMAT,
)
from recon_errors import CodecError, EigenSolverError

logger = logging.getLogger(__name__)

LAYOUTS = ('mode_major', 'per_axis')
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class SpectralCodec:
    tets: np.ndarray                 # reference connectivity
    eigenvalues: np.ndarray          # (V,) ascending
    phi: np.ndarray                  # (V, V) orthonormal, column 0 constant
    n_coeff: int
    latent_pairs: np.ndarray         # (latent_dim, 2) rows of (mode, axis)
    layout: str = CODEC_LATENT_LAYOUT

    @property
    def n_vertices(self) -> int:
        return self.phi.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.latent_pairs.shape[0]

    @property
    def basis(self) -> np.ndarray:
        return self.phi[:, :self.n_coeff]


# =============================================================================
# CONSTRUCTION
# =============================================================================

def laplacian_spectrum(adj):
    """
    Full eigendecomposition of D - A for a sparse 0/1 adjacency. Column 0 is
    the exact constant vector; every other column has its largest-magnitude
    entry positive.
    """
    n_comp, _ = connected_components(adj, directed=False)
    if n_comp != 1:
        raise CodecError(f"Vertex graph has {n_comp} components; zero eigenvalue is not simple")
    lap = laplacian(adj).toarray()
    lam, phi = scipy.linalg.eigh(lap)
    lam[0] = 0.0
    phi[:, 0] = 1.0 / np.sqrt(adj.shape[0])
    idx = np.argmax(np.abs(phi), axis=0)
    signs = np.sign(phi[idx, np.arange(phi.shape[1])])
    signs[signs == 0] = 1.0
    phi = phi * signs[None, :]

    res = np.linalg.norm(lap @ phi - phi * lam[None, :], axis=0).max()
    if res > RESIDUAL_TOL * max(1.0, lam[-1]):
        raise EigenSolverError(f"Graph Laplacian eigen-residual {res:.3e} exceeds {RESIDUAL_TOL}")
    return lam, phi


def _latent_pairs(n_coeff: int, latent_dim: int, layout: str, include_translation: bool) -> np.ndarray:
    start = 0 if include_translation else 1
    if layout == 'mode_major':
        pairs = [(m, a) for m in range(start, n_coeff) for a in range(3)][:latent_dim]
    elif layout == 'per_axis':
        if latent_dim % 3:
            raise CodecError(f"per_axis layout needs latent_dim divisible by 3, got {latent_dim}")
        k = latent_dim // 3
        pairs = [(m, a) for a in range(3) for m in range(start, min(start + k, n_coeff))]
    else:
        raise CodecError(f"Unknown latent layout '{layout}' (expected one of {LAYOUTS})")
    if len(pairs) != latent_dim:
        raise CodecError(f"latent_dim={latent_dim} exceeds the {3 * (n_coeff - start)} available entries")
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)


def build_codec(mesh: TetMesh,
                n_coeff: int = CODEC_N_COEFF,
                latent_dim: int = CODEC_LATENT_DIM,
                layout: str = CODEC_LATENT_LAYOUT,
                include_translation: bool = CODEC_INCLUDE_TRANSLATION,
                cache_dir=None) -> SpectralCodec:
    """Full dense eigendecomposition of the mesh's graph Laplacian, optionally cached."""
    V = mesh.n_vertices
    if not 1 <= n_coeff <= V:
        raise CodecError(f"n_coeff must lie in [1, {V}], got {n_coeff}")
    if not 1 <= latent_dim <= 3 * n_coeff:
        raise CodecError(f"latent_dim must lie in [1, {3 * n_coeff}], got {latent_dim}")
    pairs = _latent_pairs(n_coeff, latent_dim, layout, include_translation)

    directory = resolve_cache_dir(cache_dir)
    path = directory / f"codec_{connectivity_hash(mesh)}.npz" if directory is not None else None
    if path is not None and path.exists():
        with np.load(path) as data:
            lam, phi = data['eigenvalues'], data['phi']
        logger.debug("Codec cache hit: %s", path.name)
    else:
        lam, phi = laplacian_spectrum(vertex_adjacency(mesh))
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.savez(path, eigenvalues=lam, phi=phi)

    return SpectralCodec(tets=mesh.tets, eigenvalues=lam, phi=phi, n_coeff=n_coeff,
                         latent_pairs=pairs, layout=layout)


# =============================================================================
# ENCODE / DECODE
# =============================================================================

def _check_connectivity(codec: SpectralCodec, mesh: TetMesh) -> None:
    if mesh.n_vertices != codec.n_vertices or not np.array_equal(mesh.tets, codec.tets):
        raise CodecError(f"Mesh '{mesh.name}' connectivity does not match the codec "
                         f"(V={mesh.n_vertices} vs {codec.n_vertices})")


def encode(codec: SpectralCodec, mesh: TetMesh) -> np.ndarray:
    _check_connectivity(codec, mesh)
    return codec.basis.T @ mesh.vertices


def decode(codec: SpectralCodec, C: np.ndarray, name: str = 'decoded',
           report: bool = True) -> TetMesh:
    """Vertices Phi[:, :n] C on the reference connectivity. Inverted tets are logged, not rejected."""
    C = np.asarray(C, dtype=float)
    if C.shape != (codec.n_coeff, 3):
        raise CodecError(f"Coefficients must have shape ({codec.n_coeff}, 3), got {C.shape}")
    mesh = TetMesh(codec.basis @ C, codec.tets, name=name)
    if report:
        bad = inverted_count(mesh)
        if bad:
            logger.warning("Decoded mesh '%s' has %d inverted or degenerate tets", name, bad)
    return mesh


def to_latent(codec: SpectralCodec, C: np.ndarray) -> np.ndarray:
    C = np.asarray(C, dtype=float)
    if C.shape != (codec.n_coeff, 3):
        raise CodecError(f"Coefficients must have shape ({codec.n_coeff}, 3), got {C.shape}")
    return C[codec.latent_pairs[:, 0], codec.latent_pairs[:, 1]].copy()


def from_latent(codec: SpectralCodec, z: np.ndarray, base_C: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != codec.latent_dim:
        raise CodecError(f"Latent has {z.shape[0]} entries, codec expects {codec.latent_dim}")
    C = np.array(base_C, dtype=float, copy=True)
    if C.shape != (codec.n_coeff, 3):
        raise CodecError(f"Base coefficients must have shape ({codec.n_coeff}, 3), got {C.shape}")
    C[codec.latent_pairs[:, 0], codec.latent_pairs[:, 1]] = z
    return C


def truncation_error(codec: SpectralCodec, mesh: TetMesh, n: Optional[int] = None,
                     norm: str = 'max') -> float:
    """
    Vertex displacement after an n-mode round trip (n up to V). norm='max' is
    the worst vertex; norm='rms' is non-increasing in n.
    """
    _check_connectivity(codec, mesh)
    n = codec.n_coeff if n is None else n
    if not 1 <= n <= codec.n_vertices:
        raise CodecError(f"n must lie in [1, {codec.n_vertices}], got {n}")
    basis = codec.phi[:, :n]
    approx = basis @ (basis.T @ mesh.vertices)
    err = np.linalg.norm(approx - mesh.vertices, axis=1)
    if norm == 'max':
        return float(err.max())
    if norm == 'rms':
        return float(np.sqrt(np.mean(err ** 2)))
    raise ValueError(f"Unknown norm '{norm}'")


def write_coefficients_csv(C: np.ndarray, path) -> Path:
    C = np.asarray(C, dtype=float).reshape(-1, 3)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df = pd.DataFrame({'mode': np.arange(C.shape[0]), 'cx': C[:, 0], 'cy': C[:, 1], 'cz': C[:, 2]})
    df.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path

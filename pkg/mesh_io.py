"""
Tetrahedral Mesh I/O and Geometry
=================================
Loads, validates and interrogates single-compartment tetrahedral meshes.

File format (TetGen style, 0- or 1-based indices, read and written through meshio):
    .node   header `V 3 <n_attr> <boundary_marker>`, rows `idx x y z [attrs] [marker]`
    .ele    header `T 4 <n_attr>`,                 rows `idx i j k l [attrs]`

Usage:
    mesh = load_mesh('axon.node', 'axon.ele')
    vol = total_volume(mesh)
    save_mesh(mesh, 'copy.node', 'copy.ele')
"""

import hashlib
import logging
import shutil
import tempfile
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional, Tuple

import meshio
import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from recon_constants import VOLUME_EPS
from recon_errors import MeshError

logger = logging.getLogger(__name__)

# Faces of a positively oriented tet (0,1,2,3), outward normals
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
_TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


# =============================================================================
# DATA STRUCTURE
# =============================================================================

@dataclass(frozen=True, eq=False)
class TetMesh:
    """
    Vertices (um) and tetrahedra of a single-compartment mesh.

    Arrays are made read-only on construction. Use `build_mesh` to get a
    canonically oriented, validated instance; the bare constructor performs
    no checks (decoded meshes may legitimately be degenerate).
    """
    vertices: np.ndarray
    tets: np.ndarray
    name: str = field(default='mesh')

    def __post_init__(self):
        verts = np.array(self.vertices, dtype=float).reshape(-1, 3)
        tets = np.array(self.tets, dtype=np.int64).reshape(-1, 4)
        verts.setflags(write=False)
        tets.setflags(write=False)
        object.__setattr__(self, 'vertices', verts)
        object.__setattr__(self, 'tets', tets)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    @cached_property
    def boundary_faces(self) -> np.ndarray:
        """Faces owned by exactly one tet, outward oriented for positive tets."""
        faces, _ = _face_table(self.tets)
        return faces

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected tet edges, sorted, shape (E, 2)."""
        pairs = self.tets[:, _TET_EDGES].reshape(-1, 2)
        pairs = np.sort(pairs, axis=1)
        return np.unique(pairs, axis=0)

    def with_vertices(self, vertices: np.ndarray, name: Optional[str] = None) -> 'TetMesh':
        """Same connectivity, new vertex positions (no validation)."""
        return TetMesh(vertices, self.tets, name=name or self.name)


def _face_table(tets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns (boundary_faces, counts) where counts is the multiplicity of every
    unique face. Boundary faces keep the orientation they have in their tet.
    """
    oriented = tets[:, _TET_FACES].reshape(-1, 3)
    keys = np.sort(oriented, axis=1)
    _, first, inverse, counts = np.unique(
        keys, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    boundary = first[counts == 1]
    return oriented[np.sort(boundary)], counts


# =============================================================================
# GEOMETRY
# =============================================================================

def signed_volumes(mesh: TetMesh) -> np.ndarray:
    """Signed volume of every tet: det([x1-x0, x2-x0, x3-x0]) / 6."""
    p = mesh.vertices[mesh.tets]
    edges = p[:, 1:, :] - p[:, :1, :]
    return np.linalg.det(edges) / 6.0


def total_volume(mesh: TetMesh) -> float:
    return float(np.sum(np.abs(signed_volumes(mesh))))


def inverted_count(mesh: TetMesh, volume_eps: float = VOLUME_EPS) -> int:
    """Number of tets with signed volume at or below volume_eps."""
    return int(np.count_nonzero(signed_volumes(mesh) <= volume_eps))


def bounding_box(mesh: TetMesh) -> Tuple[np.ndarray, np.ndarray]:
    return mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)


def bounding_box_center(mesh: TetMesh) -> np.ndarray:
    lo, hi = bounding_box(mesh)
    return 0.5 * (lo + hi)


def bounding_box_diagonal(mesh: TetMesh) -> float:
    lo, hi = bounding_box(mesh)
    return float(np.linalg.norm(hi - lo))


def vertex_adjacency(mesh: TetMesh):
    """Symmetric 0/1 sparse adjacency of the tet edge graph."""
    e = mesh.edges
    n = mesh.n_vertices
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    data = np.ones(rows.size)
    return coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


def mesh_hash(mesh: TetMesh) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.tets).tobytes())
    return h.hexdigest()


def connectivity_hash(mesh: TetMesh) -> str:
    h = hashlib.sha256()
    h.update(str(mesh.n_vertices).encode())
    h.update(np.ascontiguousarray(mesh.tets).tobytes())
    return h.hexdigest()


# =============================================================================
# CONSTRUCTION AND VALIDATION
# =============================================================================

def canonicalize_orientation(vertices: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Swap the last two indices of negatively oriented tets."""
    tets = np.array(tets, dtype=np.int64, copy=True)
    p = np.asarray(vertices, dtype=float)[tets]
    vol = np.linalg.det(p[:, 1:, :] - p[:, :1, :])
    flip = vol < 0
    tets[flip, 2], tets[flip, 3] = tets[flip, 3].copy(), tets[flip, 2].copy()
    return tets


def validate_mesh(mesh: TetMesh, volume_eps: float = VOLUME_EPS) -> TetMesh:
    """
    Check every mesh invariant; raise MeshError on the first violation.

    - V >= 4, indices in [0, V)
    - every signed volume > volume_eps (canonical orientation assumed)
    - no face shared by more than two tets
    - one connected component covering every vertex
    """
    n = mesh.n_vertices
    if n < 4:
        raise MeshError(f"Mesh has {n} vertices; at least 4 required")
    if mesh.n_tets == 0:
        raise MeshError("Mesh has no tetrahedra")
    if not np.all(np.isfinite(mesh.vertices)):
        raise MeshError("Mesh has non-finite vertex coordinates")
    lo, hi = mesh.tets.min(), mesh.tets.max()
    if lo < 0 or hi >= n:
        bad = int(np.argmax((mesh.tets < 0).any(axis=1) | (mesh.tets >= n).any(axis=1)))
        raise MeshError(f"Tet {bad} references vertex index outside [0, {n})")
    if np.any(np.sort(mesh.tets, axis=1)[:, 1:] == np.sort(mesh.tets, axis=1)[:, :-1]):
        raise MeshError("Tet with repeated vertex index")

    vols = signed_volumes(mesh)
    degenerate = np.flatnonzero(vols <= volume_eps)
    if degenerate.size:
        k = int(degenerate[0])
        raise MeshError(
            f"Degenerate or inverted tet {k} (signed volume {vols[k]:.3e} um^3, "
            f"{degenerate.size} total)"
        )

    _, counts = _face_table(mesh.tets)
    if np.any(counts > 2):
        raise MeshError("Non-manifold mesh: a face is shared by more than two tets")

    n_comp, _ = connected_components(vertex_adjacency(mesh), directed=False)
    if n_comp != 1:
        raise MeshError(f"Mesh is not a single compartment ({n_comp} connected components)")
    return mesh


def build_mesh(vertices, tets, name: str = 'mesh', validate: bool = True) -> TetMesh:
    """Canonically orient and (optionally) validate a mesh from raw arrays."""
    vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
    tets = np.asarray(tets, dtype=np.int64).reshape(-1, 4)
    if tets.size and (tets.min() < 0 or tets.max() >= len(vertices)):
        raise MeshError(f"Tet index out of range [0, {len(vertices)})")
    mesh = TetMesh(vertices, canonicalize_orientation(vertices, tets), name=name)
    if validate:
        validate_mesh(mesh)
    return mesh


# =============================================================================
# FILE I/O
# =============================================================================

def _scan_table(path: Path, columns: int, label: str) -> Tuple[list, int]:
    """
    Header integers and data-row count of a TetGen file. meshio does the
    parsing; this catches the structural errors it reports badly.
    """
    if not path.exists():
        raise MeshError(f"File not found: {path}")
    rows = [ln.split('#', 1)[0].split() for ln in path.read_text().splitlines()]
    rows = [r for r in rows if r]
    if not rows:
        raise MeshError(f"{path.name}: empty file")
    try:
        header = [int(tok) for tok in rows[0]]
    except ValueError:
        raise MeshError(f"{path.name}: malformed header '{' '.join(rows[0])}'")
    if len(header) < 2 or header[1] != columns:
        raise MeshError(f"{path.name}: header must declare {columns} columns per {label}")
    return header, len(rows) - 1


def _read_tetgen(node_path: Path, ele_path: Path) -> meshio.Mesh:
    if ele_path == node_path.with_suffix('.ele'):
        return meshio.read(node_path, file_format='tetgen')
    # meshio pairs the files by base name
    with tempfile.TemporaryDirectory() as tmp:
        shutil.copyfile(node_path, Path(tmp) / 'mesh.node')
        shutil.copyfile(ele_path, Path(tmp) / 'mesh.ele')
        return meshio.read(Path(tmp) / 'mesh.node', file_format='tetgen')


def load_mesh(node_path, ele_path=None, name: Optional[str] = None) -> TetMesh:
    """
    Load a TetGen `.node`/`.ele` pair and return a validated, canonically
    oriented TetMesh. `ele_path` defaults to the node path with `.ele` suffix.
    """
    node_path = Path(node_path)
    ele_path = Path(ele_path) if ele_path is not None else node_path.with_suffix('.ele')

    header, n_rows = _scan_table(node_path, 3, 'node')
    if n_rows != header[0]:
        raise MeshError(f"{node_path.name}: header declares {header[0]} nodes, found {n_rows}")
    header, n_rows = _scan_table(ele_path, 4, 'element')
    if n_rows != header[0]:
        raise MeshError(f"{ele_path.name}: header declares {header[0]} elements, found {n_rows}")

    try:
        raw = _read_tetgen(node_path, ele_path)
        tets = raw.cells_dict['tetra']
    except (meshio.ReadError, ValueError, KeyError, AssertionError) as e:
        raise MeshError(f"{node_path.name}: malformed node/element rows ({e})")

    mesh = build_mesh(raw.points[:, :3], tets, name=name or node_path.stem)
    logger.debug("Loaded %s: V=%d, T=%d", node_path.name, mesh.n_vertices, mesh.n_tets)
    return mesh


def save_mesh(mesh: TetMesh, node_path, ele_path=None) -> None:
    """Write a mesh as TetGen files (meshio writes 0-based, 17 significant digits)."""
    node_path = Path(node_path)
    node_path.parent.mkdir(parents=True, exist_ok=True)
    out = meshio.Mesh(np.asarray(mesh.vertices), [('tetra', np.asarray(mesh.tets))])
    meshio.write(node_path, out, file_format='tetgen')
    if ele_path is not None and Path(ele_path) != node_path.with_suffix('.ele'):
        Path(ele_path).parent.mkdir(parents=True, exist_ok=True)
        shutil.move(node_path.with_suffix('.ele'), ele_path)


def write_surface_obj(mesh: TetMesh, path) -> None:
    """Boundary surface as a triangulated Wavefront OBJ."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    surface = meshio.Mesh(np.asarray(mesh.vertices), [('triangle', np.asarray(mesh.boundary_faces))])
    meshio.write(path, surface, file_format='obj')

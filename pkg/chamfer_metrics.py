"""
Chamfer Distances
=================
Point-cloud distance between a reconstruction and its reference.

    d1 = 1/(2n) sum_x |x - NN(x, P2)|     over the n points of P1
    d2 = 1/(2m) sum_y |y - NN(y, P1)|     over the m points of P2
    chamfer = d1 + d2

The modified distance is the minimum chamfer over 48 rigid transforms of the
first mesh about its bounding-box center: the 24 axis-aligned rotations, each
with and without central inversion. dMRI signals cannot tell these apart.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from mesh_io import TetMesh, bounding_box_center, total_volume
from recon_constants import CSV_FLOAT_FORMAT
from recon_errors import MeshError

logger = logging.getLogger(__name__)

Cloud = Union[TetMesh, np.ndarray]


def _points(cloud: Cloud) -> np.ndarray:
    pts = cloud.vertices if isinstance(cloud, TetMesh) else np.asarray(cloud, dtype=float)
    pts = pts.reshape(-1, 3)
    if pts.shape[0] == 0:
        raise MeshError("Point cloud is empty")
    return pts


def _center(cloud: Cloud) -> np.ndarray:
    if isinstance(cloud, TetMesh):
        return bounding_box_center(cloud)
    pts = _points(cloud)
    return 0.5 * (pts.min(axis=0) + pts.max(axis=0))


# =============================================================================
# NEAREST NEIGHBORS
# =============================================================================

def nearest_distances(P1: Cloud, P2: Cloud, method: str = 'kdtree') -> np.ndarray:
    """Distance from every point of P1 to its nearest point in P2."""
    a, b = _points(P1), _points(P2)
    if method == 'kdtree':
        _, idx = cKDTree(b).query(a)
        diff = a - b[idx]
        return np.sqrt((diff ** 2).sum(axis=1))
    if method == 'brute':
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return np.sqrt(d2.min(axis=1))
    raise ValueError(f"Unknown nearest-neighbor method '{method}'")


def chamfer(P1: Cloud, P2: Cloud, method: str = 'kdtree') -> float:
    a, b = _points(P1), _points(P2)
    d1 = nearest_distances(a, b, method).sum() / (2.0 * a.shape[0])
    d2 = nearest_distances(b, a, method).sum() / (2.0 * b.shape[0])
    return float(d1 + d2)


# =============================================================================
# TRANSFORM GROUP
# =============================================================================

def rotation_group() -> List[np.ndarray]:
    """The 24 proper rotations mapping coordinate axes to coordinate axes (identity first)."""
    mats = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            R = np.zeros((3, 3))
            R[np.arange(3), list(perm)] = signs
            if round(np.linalg.det(R)) == 1:
                mats.append(R)
    return mats


def transform_set() -> List[np.ndarray]:
    """Rotations followed by the same rotations composed with central inversion."""
    rots = rotation_group()
    return rots + [-R for R in rots]


def apply_transform(cloud: Cloud, T: np.ndarray, center=None) -> np.ndarray:
    pts = _points(cloud)
    c = _center(cloud) if center is None else np.asarray(center, dtype=float)
    return c + (pts - c) @ T.T


def best_transform(M: Cloud, M_ref: Cloud, method: str = 'kdtree',
                   jobs: int = 1) -> Tuple[float, int]:
    """(minimum chamfer, index into transform_set())."""
    ref = _points(M_ref)
    c = _center(M)
    transforms = transform_set()

    def score(T):
        return chamfer(apply_transform(M, T, c), ref, method)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(score, transforms))
    else:
        values = [score(T) for T in transforms]
    k = int(np.argmin(values))
    return float(values[k]), k


def modified_chamfer(M: Cloud, M_ref: Cloud, method: str = 'kdtree', jobs: int = 1) -> float:
    return best_transform(M, M_ref, method, jobs)[0]


# =============================================================================
# REPORTS
# =============================================================================

def per_vertex_errors(mesh: Cloud, reference: Cloud, align: bool = True) -> pd.DataFrame:
    """
    Nearest-reference distance of every vertex of mesh, after the best
    transform when align is set. Coordinates are the (aligned) vertex positions.
    """
    pts = _points(mesh)
    if align:
        _, k = best_transform(mesh, reference)
        pts = apply_transform(mesh, transform_set()[k])
    dist = nearest_distances(pts, reference)
    return pd.DataFrame({'x': pts[:, 0], 'y': pts[:, 1], 'z': pts[:, 2], 'distance': dist})


def write_per_vertex_csv(mesh: Cloud, reference: Cloud, path, align: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    per_vertex_errors(mesh, reference, align).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def evaluation_report(mesh: TetMesh, reference: TetMesh, jobs: int = 1) -> Dict:
    modified, k = best_transform(mesh, reference, jobs=jobs)
    return {
        'mesh': mesh.name,
        'reference': reference.name,
        'chamfer': chamfer(mesh, reference),
        'modified_chamfer': modified,
        'best_transform': k,
        'volume': total_volume(mesh),
        'reference_volume': total_volume(reference),
    }

"""
Axon Deformation Families
=========================
Canonical cylinder generation plus the three deformation families used to
build ground-truth meshes:

    bend_twist  - lateral displacement growing with squared height, optional twist
    fanning     - progressive tilt of the axis, no torsion
    beading     - periodic radial swelling along the axis

and the scaling / axis-aligned rotation augmentations of the dataset protocol.

All deformations keep connectivity and return validated meshes.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy.spatial import Delaunay

from mesh_io import TetMesh, bounding_box_center, build_mesh, validate_mesh
from recon_constants import (
    CYLINDER_BUDGET_TOLERANCE, CYLINDER_HEIGHT, CYLINDER_MAX_ASPECT,
    CYLINDER_MIN_BUDGET, CYLINDER_RADIUS, CYLINDER_RING_DENSITIES, CYLINDER_VERTEX_BUDGET,
)
from recon_errors import DeformError, MeshError

logger = logging.getLogger(__name__)

DEFORM_KINDS = ('bend_twist', 'fanning', 'beading')
AXES = {'x': 0, 'y': 1, 'z': 2}


# =============================================================================
# DATA STRUCTURES
# =============================================================================

@dataclass(frozen=True)
class DeformSpec:
    """One ground-truth deformation. Unused fields stay at their identity value."""
    kind: str
    bend_coeff: float = 0.0
    twist_coeff: float = 0.0
    fan_angle: float = 0.0          # degrees
    bead_count: int = 0
    bead_amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in DEFORM_KINDS:
            raise DeformError(f"Unknown deformation kind '{self.kind}' (expected one of {DEFORM_KINDS})")
        _check_bend(self.bend_coeff)
        _check_fan(self.fan_angle)
        _check_beads(self.bead_count, self.bead_amplitude)
        if not math.isfinite(self.twist_coeff):
            raise DeformError("twist_coeff must be finite")

    def label(self) -> str:
        if self.kind == 'bend_twist':
            return f"bend{self.bend_coeff:.2f}_twist{self.twist_coeff:.2f}"
        if self.kind == 'fanning':
            return f"fan{self.fan_angle:g}"
        return f"beads{self.bead_count}_amp{self.bead_amplitude:.2f}"

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class Augmentation:
    """Exact affine augmentation: scale(axis, factor), rotate90(axes), rotate180(axis)."""
    kind: str
    axes: Tuple[str, ...]
    factor: float = 1.0

    def __post_init__(self):
        if self.kind not in ('scale', 'rotate90', 'rotate180'):
            raise DeformError(f"Unknown augmentation '{self.kind}'")
        if not self.axes or any(a not in AXES for a in self.axes):
            raise DeformError(f"Invalid augmentation axes {self.axes}")
        if self.kind == 'scale' and not self.factor > 0:
            raise DeformError(f"Scale factor must be > 0, got {self.factor}")

    def label(self) -> str:
        if self.kind == 'scale':
            return f"scale{self.axes[0]}{self.factor:g}"
        return f"{self.kind}{''.join(self.axes)}"


def scale(axis: str, factor: float) -> Augmentation:
    return Augmentation('scale', (axis,), float(factor))


def rotate90(*axes: str) -> Augmentation:
    return Augmentation('rotate90', tuple(axes))


def rotate180(axis: str) -> Augmentation:
    return Augmentation('rotate180', (axis,))


# =============================================================================
# PARAMETER CHECKS
# =============================================================================

def _check_bend(beta: float):
    if not 0.0 <= beta <= 1.0:
        raise DeformError(f"Bend coefficient must lie in [0, 1], got {beta}")


def _check_fan(angle: float):
    if not 0.0 <= angle < 90.0:
        raise DeformError(f"Fan angle must lie in [0, 90) degrees, got {angle}")


def _check_beads(count: int, amplitude: float):
    if int(count) != count or count < 0:
        raise DeformError(f"Bead count must be a non-negative integer, got {count}")
    if not 0.0 <= amplitude <= 0.5:
        raise DeformError(f"Bead amplitude must lie in [0, 0.5], got {amplitude}")


# =============================================================================
# CANONICAL CYLINDER
# =============================================================================

def _disc_points(radius: float, rings: int, per_ring: int = 8) -> np.ndarray:
    """Center point plus `rings` concentric rings with per_ring*k points on ring k."""
    pts = [np.zeros((1, 2))]
    for k in range(1, rings + 1):
        n = per_ring * k
        theta = 2.0 * np.pi * np.arange(n) / n
        r = radius * k / rings
        pts.append(np.column_stack([r * np.cos(theta), r * np.sin(theta)]))
    return np.vstack(pts)


def _disc_size(rings: int, per_ring: int) -> int:
    return 1 + per_ring * rings * (rings + 1) // 2


def _plan_cylinder(radius: float, height: float, vertex_budget: int) -> Tuple[int, int, int]:
    """
    Pick (rings, layers, points per ring step) whose vertex count is within
    tolerance of the budget, preferring layer spacing closest to ring spacing.
    Sparser rings are only tried when 8 per step cannot meet the budget.
    """
    for densities in ((8,), CYLINDER_RING_DENSITIES):
        best = None
        for per_ring in densities:
            rings = 1
            while _disc_size(rings, per_ring) <= vertex_budget / 2:
                n_disc = _disc_size(rings, per_ring)
                layers = max(2, int(round(vertex_budget / n_disc)))
                err = abs(layers * n_disc - vertex_budget) / vertex_budget
                if err <= CYLINDER_BUDGET_TOLERANCE + 1e-12:
                    aspect = (height / (layers - 1)) / (radius / rings)
                    score = (abs(math.log(aspect)), -per_ring)
                    if best is None or score < best[0]:
                        best = (score, rings, layers, per_ring)
                rings += 1
        if best is not None:
            return best[1], best[2], best[3]
    raise DeformError(f"No ring/layer layout within {CYLINDER_BUDGET_TOLERANCE:.0%} "
                      f"of vertex budget {vertex_budget}")


def canonical_cylinder(radius: float = CYLINDER_RADIUS,
                       height: float = CYLINDER_HEIGHT,
                       vertex_budget: int = CYLINDER_VERTEX_BUDGET) -> TetMesh:
    """
    Tetrahedral cylinder along +Z with its base at z=0, centred on the Z axis.

    Each layer is a Delaunay-triangulated disc; consecutive layers are joined
    by prisms split into three tets using the global vertex order, which keeps
    the diagonals of shared quad faces consistent.
    """
    if radius <= 0 or height <= 0:
        raise DeformError(f"Cylinder radius and height must be > 0 (got {radius}, {height})")
    if vertex_budget < CYLINDER_MIN_BUDGET:
        raise DeformError(f"Vertex budget {vertex_budget} too small (minimum {CYLINDER_MIN_BUDGET})")
    aspect = max(height / (2 * radius), 2 * radius / height)
    if aspect > CYLINDER_MAX_ASPECT:
        raise DeformError(f"Cylinder aspect ratio {aspect:.0f}:1 exceeds {CYLINDER_MAX_ASPECT:.0f}:1")

    rings, layers, per_ring = _plan_cylinder(radius, height, vertex_budget)
    disc = _disc_points(radius, rings, per_ring)
    n_disc = len(disc)
    triangles = np.sort(Delaunay(disc).simplices, axis=1)

    z = np.linspace(0.0, height, layers)
    vertices = np.vstack([np.column_stack([disc, np.full(n_disc, zl)]) for zl in z])

    tets = []
    for layer in range(layers - 1):
        lo = triangles + layer * n_disc
        hi = lo + n_disc
        a, b, c = lo[:, 0], lo[:, 1], lo[:, 2]
        a2, b2, c2 = hi[:, 0], hi[:, 1], hi[:, 2]
        tets.append(np.column_stack([a, b, c, c2]))
        tets.append(np.column_stack([a, b, b2, c2]))
        tets.append(np.column_stack([a, a2, b2, c2]))
    tets = np.vstack(tets)

    try:
        mesh = build_mesh(vertices, tets, name='cylinder')
    except MeshError as e:
        raise DeformError(f"Cylinder meshing failed: {e}")
    logger.debug("Canonical cylinder r=%g h=%g: %d rings (%d per step) x %d layers, V=%d",
                 radius, height, rings, per_ring, layers, mesh.n_vertices)
    return mesh


# =============================================================================
# DEFORMATIONS
# =============================================================================

def _normalized_height(mesh: TetMesh) -> Tuple[np.ndarray, float]:
    z = mesh.vertices[:, 2]
    z0 = z.min()
    span = z.max() - z0
    if span <= 0:
        raise DeformError("Mesh has zero extent along Z")
    return (z - z0) / span, float(span)


def _finish(mesh: TetMesh, vertices: np.ndarray, name: str) -> TetMesh:
    out = mesh.with_vertices(vertices, name=name)
    try:
        validate_mesh(out)
    except MeshError as e:
        raise DeformError(f"Deformation '{name}' produced an invalid mesh: {e}")
    return out


def apply_bend_twist(mesh: TetMesh, beta: float, twist: float = 0.0) -> TetMesh:
    """
    Displace every vertex along X by beta * h^2 * H (h = normalized height,
    H = height), then rotate about Z by twist * h * 2*pi. The base is fixed.
    A twist of 1.0 is one full revolution over the height.
    """
    _check_bend(beta)
    h, span = _normalized_height(mesh)
    v = np.array(mesh.vertices, copy=True)
    v[:, 0] += beta * h ** 2 * span

    if twist != 0.0:
        angle = twist * h * 2.0 * np.pi
        c, s = np.cos(angle), np.sin(angle)
        x, y = v[:, 0].copy(), v[:, 1].copy()
        v[:, 0] = c * x - s * y
        v[:, 1] = s * x + c * y
    return _finish(mesh, v, f"{mesh.name}_bend{beta:g}_twist{twist:g}")


def fanning_offset(h: np.ndarray, span: float, fan_angle: float) -> np.ndarray:
    """
    Lateral centroid offset whose slope angle grows linearly from 0 at the base
    to fan_angle at the top: x_c(h) = -H ln(cos(a h)) / a.
    """
    alpha = math.radians(fan_angle)
    if alpha == 0.0:
        return np.zeros_like(h)
    return -span * np.log(np.cos(alpha * h)) / alpha


def apply_fanning(mesh: TetMesh, fan_angle: float) -> TetMesh:
    """Tilt cross-sections outward (+X) so the top axis deviates from Z by fan_angle."""
    _check_fan(fan_angle)
    h, span = _normalized_height(mesh)
    v = np.array(mesh.vertices, copy=True)
    v[:, 0] += fanning_offset(h, span, fan_angle)
    return _finish(mesh, v, f"{mesh.name}_fan{fan_angle:g}")


def beading_profile(h: np.ndarray, bead_count: int, amplitude: float) -> np.ndarray:
    return 1.0 + amplitude * np.sin(np.pi * bead_count * h) ** 2


def apply_beading(mesh: TetMesh, bead_count: int, amplitude: float) -> TetMesh:
    """Scale the radial (XY) coordinate by 1 + amplitude * sin(pi * n * h)^2."""
    _check_beads(bead_count, amplitude)
    h, _ = _normalized_height(mesh)
    v = np.array(mesh.vertices, copy=True)
    v[:, :2] *= beading_profile(h, int(bead_count), amplitude)[:, None]
    return _finish(mesh, v, f"{mesh.name}_beads{bead_count}_amp{amplitude:g}")


def apply_spec(mesh: TetMesh, spec: DeformSpec) -> TetMesh:
    if spec.kind == 'bend_twist':
        return apply_bend_twist(mesh, spec.bend_coeff, spec.twist_coeff)
    if spec.kind == 'fanning':
        return apply_fanning(mesh, spec.fan_angle)
    return apply_beading(mesh, spec.bead_count, spec.bead_amplitude)


def dataset_split(spec: DeformSpec) -> str:
    """
    Disjoint train/test assignment: odd bead counts and odd integer fan
    angles train, even ones test. Bend/twist meshes are not split.
    """
    if spec.kind == 'beading':
        return 'train' if spec.bead_count % 2 else 'test'
    if spec.kind == 'fanning':
        return 'train' if int(round(spec.fan_angle)) % 2 else 'test'
    return 'any'


# =============================================================================
# AUGMENTATIONS
# =============================================================================

def quarter_turn(axis: str, turns: int = 1) -> np.ndarray:
    """Integer rotation matrix for `turns` x 90 degrees about a coordinate axis."""
    i = AXES[axis]
    j, k = [a for a in range(3) if a != i]
    r = np.eye(3)
    c = [1, 0, -1, 0][turns % 4]
    s = [0, 1, 0, -1][turns % 4]
    r[j, j], r[j, k] = c, -s
    r[k, j], r[k, k] = s, c
    return r


def augmentation_matrix(op: Augmentation) -> np.ndarray:
    if op.kind == 'scale':
        m = np.eye(3)
        m[AXES[op.axes[0]], AXES[op.axes[0]]] = op.factor
        return m
    turns = 1 if op.kind == 'rotate90' else 2
    m = np.eye(3)
    for axis in op.axes:
        m = quarter_turn(axis, turns) @ m
    return m


def augment(mesh: TetMesh, op: Augmentation) -> TetMesh:
    """
    Apply an exact affine augmentation. Scaling acts about the origin;
    rotations act about the bounding-box center, which they leave fixed.
    """
    m = augmentation_matrix(op)
    if op.kind == 'scale':
        v = mesh.vertices @ m.T
    else:
        c = bounding_box_center(mesh)
        v = (mesh.vertices - c) @ m.T + c
    return _finish(mesh, v, f"{mesh.name}_{op.label()}")


def augmentation_suite(factors: Sequence[float] = (0.5, 1.5)) -> List[Augmentation]:
    """Scaling on each axis, 90 deg rotations about one/two/three axes, 180 deg rotations."""
    ops = [scale(a, f) for a in 'xyz' for f in factors]
    ops += [rotate90(a) for a in 'xyz']
    ops += [rotate90(a, b) for a, b in (('x', 'y'), ('x', 'z'), ('y', 'z'))]
    ops.append(rotate90('x', 'y', 'z'))
    ops += [rotate180(a) for a in 'xyz']
    return ops

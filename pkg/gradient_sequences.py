"""
Diffusion-Encoding Sequences
============================
Pulsed-gradient spin-echo (PGSE) timing, gradient direction sets and b-values.

The PGSE profile f(t) is piecewise constant:
    +1 on [0, delta], 0 on [delta, Delta], -1 on [Delta, Delta + delta],
    0 on [Delta + delta, T_echo]
so the refocusing integral of f is exactly zero.

A GradientScheme lists measurements (sequence, direction, amplitude). Every
sequence carries exactly one g = 0 reference measurement, used to normalize
the signal.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from recon_constants import (
    BVALUES_DEFAULT_S_MM2, DIFFUSION_TIMES_DEFAULT, DIRECTION_SEED, GAMMA,
    MT_PER_M_TO_MT_PER_UM, N_DIRECTIONS_DEFAULT, S_PER_MM2_TO_MS_PER_UM2,
    SMALL_DELTA_DEFAULT,
)
from recon_errors import SchemeError

logger = logging.getLogger(__name__)


# =============================================================================
# UNIT CONVERSIONS
# =============================================================================

def bvalue_from_s_per_mm2(b: float) -> float:
    return b * S_PER_MM2_TO_MS_PER_UM2


def bvalue_to_s_per_mm2(b: float) -> float:
    return b / S_PER_MM2_TO_MS_PER_UM2


def gradient_from_mT_per_m(g: float) -> float:
    return g * MT_PER_M_TO_MT_PER_UM


# =============================================================================
# PGSE SEQUENCE
# =============================================================================

@dataclass(frozen=True)
class PgseSequence:
    """PGSE timing in ms. T_echo defaults to Delta + delta."""
    delta: float
    Delta: float
    T_echo: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.delta <= self.Delta:
            raise SchemeError(f"PGSE requires 0 < delta <= Delta (got delta={self.delta}, Delta={self.Delta})")
        if self.T_echo is None:
            object.__setattr__(self, 'T_echo', self.Delta + self.delta)
        if self.T_echo < self.Delta + self.delta - 1e-12:
            raise SchemeError(f"T_echo={self.T_echo} shorter than Delta + delta = {self.Delta + self.delta}")

    def breakpoints(self) -> List[float]:
        return [0.0, self.delta, self.Delta, self.Delta + self.delta, self.T_echo]

    def intervals(self) -> List[Tuple[float, float, int]]:
        """Constant-profile intervals (t0, t1, f); zero-length intervals dropped."""
        bp = self.breakpoints()
        out = []
        for (t0, t1), f in zip(zip(bp[:-1], bp[1:]), (1, 0, -1, 0)):
            if t1 - t0 > 0:
                out.append((t0, t1, f))
        return out

    def profile(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        f = np.zeros_like(t)
        f[(t >= 0) & (t < self.delta)] = 1.0
        f[(t >= self.Delta) & (t < self.Delta + self.delta)] = -1.0
        return f

    def refocusing_integral(self) -> float:
        return float(sum((t1 - t0) * f for t0, t1, f in self.intervals()))

    def to_dict(self) -> Dict:
        return {'delta': self.delta, 'Delta': self.Delta, 'T_echo': self.T_echo}


def b_value(seq: PgseSequence, g: float, gamma: float = GAMMA) -> float:
    """b = gamma^2 g^2 delta^2 (Delta - delta/3), in ms/um^2 for g in mT/um."""
    return gamma ** 2 * g ** 2 * seq.delta ** 2 * (seq.Delta - seq.delta / 3.0)


def amplitude_for_b(seq: PgseSequence, b: float, gamma: float = GAMMA) -> float:
    if b < 0:
        raise SchemeError(f"b-value must be >= 0, got {b}")
    return float(np.sqrt(b / (gamma ** 2 * seq.delta ** 2 * (seq.Delta - seq.delta / 3.0))))


# =============================================================================
# DIRECTION SETS
# =============================================================================

def _repulsion_energy(flat: np.ndarray, n: int) -> Tuple[float, np.ndarray]:
    """Antipodally symmetric Coulomb energy of n unit vectors and its gradient."""
    u = flat.reshape(n, 3)
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    x = u / norms
    energy = 0.0
    grad_x = np.zeros_like(x)
    iu = np.triu_indices(n, k=1)
    for sign in (1.0, -1.0):
        diff = x[:, None, :] - sign * x[None, :, :]
        dist = np.linalg.norm(diff, axis=2)
        np.fill_diagonal(dist, np.inf)
        energy += np.sum(1.0 / dist[iu])
        w = diff / dist[:, :, None] ** 3
        # d/dx_i sum_{j} 1/|x_i - s x_j| over both orderings of each pair
        grad_x -= w.sum(axis=1)
        grad_x += sign * w.sum(axis=0)
    grad_x *= 0.5
    grad_u = (grad_x - np.sum(grad_x * x, axis=1, keepdims=True) * x) / norms
    return energy, grad_u.ravel()


def direction_set(n: int, seed: int = DIRECTION_SEED) -> np.ndarray:
    """
    n approximately uniform unit vectors, shape (n, 3).

    n = 3 gives the coordinate axes; otherwise points start from a seeded random
    draw and relax under antipodal electrostatic repulsion. Each vector is
    flipped into the upper hemisphere so the set is reproducible.
    """
    if int(n) != n or n <= 0:
        raise SchemeError(f"Number of directions must be a positive integer, got {n}")
    n = int(n)
    if n == 3:
        return np.eye(3)
    if n == 1:
        return np.array([[0.0, 0.0, 1.0]])

    rng = np.random.default_rng(seed)
    start = rng.normal(size=(n, 3))
    start /= np.linalg.norm(start, axis=1, keepdims=True)
    res = minimize(_repulsion_energy, start.ravel(), args=(n,), jac=True,
                   method='L-BFGS-B', options={'maxiter': 2000, 'gtol': 1e-10})
    dirs = res.x.reshape(n, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    flip = (dirs[:, 2] < 0) | ((dirs[:, 2] == 0) & (dirs[:, 0] < 0))
    dirs[flip] *= -1.0
    logger.debug("direction_set(%d): energy %.6f after %d iterations", n, res.fun, res.nit)
    return dirs


# =============================================================================
# GRADIENT SCHEME
# =============================================================================

@dataclass(frozen=True)
class Measurement:
    seq_id: int
    direction: Tuple[float, float, float]
    g: float                          # mT/um

    @property
    def is_reference(self) -> bool:
        return self.g == 0.0


def _unit(direction) -> Tuple[float, float, float]:
    d = np.asarray(direction, dtype=float).reshape(3)
    norm = np.linalg.norm(d)
    if not np.isfinite(norm) or norm == 0:
        raise SchemeError(f"Invalid gradient direction {direction}")
    d = d / norm
    return (float(d[0]), float(d[1]), float(d[2]))


@dataclass(frozen=True)
class GradientScheme:
    """Ordered measurements over a list of sequences."""
    sequences: Tuple[PgseSequence, ...]
    measurements: Tuple[Measurement, ...]

    def __post_init__(self):
        object.__setattr__(self, 'sequences', tuple(self.sequences))
        object.__setattr__(self, 'measurements', tuple(self.measurements))
        if not self.sequences:
            raise SchemeError("Scheme has no sequences")
        for m in self.measurements:
            if not 0 <= m.seq_id < len(self.sequences):
                raise SchemeError(f"Measurement refers to unknown sequence {m.seq_id}")
            if not m.g >= 0:
                raise SchemeError(f"Gradient amplitude must be >= 0, got {m.g}")
            if abs(np.linalg.norm(m.direction) - 1.0) > 1e-12:
                raise SchemeError(f"Direction {m.direction} is not unit norm")
        for s in range(len(self.sequences)):
            refs = sum(1 for m in self.measurements if m.seq_id == s and m.is_reference)
            if refs != 1:
                raise SchemeError(f"Sequence {s} needs exactly one g = 0 reference, has {refs}")

    def __len__(self) -> int:
        return len(self.measurements)

    def reference_index(self, seq_id: int) -> int:
        for i, m in enumerate(self.measurements):
            if m.seq_id == seq_id and m.is_reference:
                return i
        raise SchemeError(f"No reference for sequence {seq_id}")

    def b_values(self) -> np.ndarray:
        return np.array([b_value(self.sequences[m.seq_id], m.g) for m in self.measurements])

    @classmethod
    def from_amplitudes(cls, sequences: Sequence[PgseSequence], directions,
                        amplitudes: Sequence[float]) -> 'GradientScheme':
        """Same amplitude list for every sequence; zeros are folded into the reference."""
        dirs = [_unit(d) for d in np.atleast_2d(directions)]
        per_seq = [list(amplitudes)] * len(sequences)
        return cls._build(sequences, dirs, per_seq)

    @classmethod
    def from_bvalues(cls, sequences: Sequence[PgseSequence], directions,
                     bvalues: Sequence[float]) -> 'GradientScheme':
        """b-values in ms/um^2, converted to amplitudes per sequence timing."""
        dirs = [_unit(d) for d in np.atleast_2d(directions)]
        per_seq = [[amplitude_for_b(s, b) for b in bvalues] for s in sequences]
        return cls._build(sequences, dirs, per_seq)

    @classmethod
    def _build(cls, sequences, dirs, per_seq) -> 'GradientScheme':
        if not dirs:
            raise SchemeError("Scheme needs at least one direction")
        measurements = []
        for s, amps in enumerate(per_seq):
            if any(not a >= 0 for a in amps):
                raise SchemeError(f"Negative or invalid amplitude in {amps}")
            measurements.append(Measurement(s, dirs[0], 0.0))
            for g in amps:
                if g == 0:
                    continue
                for d in dirs:
                    measurements.append(Measurement(s, d, float(g)))
        return cls(tuple(sequences), tuple(measurements))

    def to_records(self) -> List[Dict]:
        out = []
        for m in self.measurements:
            seq = self.sequences[m.seq_id]
            out.append({'direction': list(m.direction), 'g': m.g, **seq.to_dict()})
        return out


def save_scheme(scheme: GradientScheme, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump({'measurements': scheme.to_records()}, f, indent=2)


def load_scheme(path) -> GradientScheme:
    """Read a scheme JSON; sequences are numbered in order of first appearance."""
    path = Path(path)
    try:
        with open(path) as f:
            records = json.load(f)['measurements']
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise SchemeError(f"Cannot read scheme file {path}: {e}")

    seq_ids: Dict[Tuple[float, float, float], int] = {}
    sequences: List[PgseSequence] = []
    measurements = []
    for rec in records:
        try:
            seq = PgseSequence(float(rec['delta']), float(rec['Delta']), float(rec['T_echo']))
            key = (seq.delta, seq.Delta, seq.T_echo)
            if key not in seq_ids:
                seq_ids[key] = len(sequences)
                sequences.append(seq)
            measurements.append(Measurement(seq_ids[key], _unit(rec['direction']), float(rec['g'])))
        except KeyError as e:
            raise SchemeError(f"Scheme record missing field {e}")
    return GradientScheme(tuple(sequences), tuple(measurements))


def preset_scheme(n_directions: int = N_DIRECTIONS_DEFAULT,
                  diffusion_times: Sequence[float] = DIFFUSION_TIMES_DEFAULT,
                  bvalues_s_mm2: Sequence[float] = BVALUES_DEFAULT_S_MM2,
                  delta: float = SMALL_DELTA_DEFAULT,
                  seed: int = DIRECTION_SEED) -> GradientScheme:
    """Experiment scheme: one PGSE per diffusion time, shared direction set and b-values."""
    sequences = [PgseSequence(delta, float(D)) for D in diffusion_times]
    dirs = direction_set(n_directions, seed=seed)
    bvals = [bvalue_from_s_per_mm2(b) for b in bvalues_s_mm2]
    return GradientScheme.from_bvalues(sequences, dirs, bvals)

"""
Crank-Nicolson Bloch-Torrey Solver
==================================
Direct time stepping of the full FEM system

    M dxi/dt = -(S + Q + R + i*gamma*f(t)*g*J_d) xi,   xi(0) = rho * 1

with the trapezoidal rule. The system matrix is constant on every PGSE
interval, so each distinct profile value gets one sparse LU factorization.
Slow compared with the matrix formalism; used to check its signal.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.sparse.linalg import splu

from fem_assembly import FemMatrices, PhysicsParams, assemble
from gradient_sequences import GradientScheme, PgseSequence
from mesh_io import TetMesh
from mf_signal import SignalSet
from recon_errors import TimeSteppingError

logger = logging.getLogger(__name__)

STEP_DIVISIBILITY_RTOL = 1e-9


def _steps_per_interval(seq: PgseSequence, dt: float) -> list:
    if not dt > 0:
        raise TimeSteppingError(f"dt must be > 0, got {dt}")
    if dt > seq.delta / 10.0 + 1e-15:
        raise TimeSteppingError(f"dt={dt} ms exceeds delta/10 = {seq.delta / 10.0} ms")
    steps = []
    for t0, t1, f in seq.intervals():
        n = int(round((t1 - t0) / dt))
        if n < 1 or abs(n * dt - (t1 - t0)) > STEP_DIVISIBILITY_RTOL * (t1 - t0):
            raise TimeSteppingError(f"dt={dt} ms does not divide interval [{t0}, {t1}] ms")
        steps.append((n, f))
    return steps


def solve_btpde(fem: FemMatrices, params: PhysicsParams, seq: PgseSequence,
                direction, g: float, dt: float,
                weights: Optional[np.ndarray] = None) -> Tuple[np.ndarray, complex]:
    """
    Time-step one measurement to T_echo. Returns (xi(T_echo), signal) with
    signal = xi' w and w = M 1 unless weights are given.
    """
    steps = _steps_per_interval(seq, dt)
    M = fem.M.astype(complex)
    base = (fem.S + fem.Q + fem.R).astype(complex)
    J = fem.J(direction)
    if weights is None:
        weights = np.asarray(fem.M.sum(axis=1)).ravel()

    systems: Dict[int, tuple] = {}
    xi = np.full(fem.size, params.rho, dtype=complex)
    for n, f in steps:
        if f not in systems:
            A = base + 1j * params.gamma * f * g * J
            try:
                lu = splu((M + 0.5 * dt * A).tocsc())
            except RuntimeError as e:
                raise TimeSteppingError(f"Factorization failed for profile value {f}: {e}")
            systems[f] = (lu, (M - 0.5 * dt * A).tocsr())
        lu, rhs_mat = systems[f]
        for _ in range(n):
            xi = lu.solve(rhs_mat @ xi)
        if not np.all(np.isfinite(xi)):
            raise TimeSteppingError(f"Non-finite magnetization after interval with f={f}")
    return xi, complex(xi @ weights)


def simulate_btpde(source: Union[TetMesh, FemMatrices], params: PhysicsParams,
                   scheme: GradientScheme, dt: float, jobs: int = 1) -> SignalSet:
    fem = assemble(source, params) if isinstance(source, TetMesh) else source
    weights = np.asarray(fem.M.sum(axis=1)).ravel()

    def one(m):
        seq = scheme.sequences[m.seq_id]
        return solve_btpde(fem, params, seq, m.direction, m.g, dt, weights)[1]

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(one, scheme.measurements))
    else:
        values = [one(m) for m in scheme.measurements]
    logger.debug("Time-stepped %d measurements at dt=%g ms", len(values), dt)
    return SignalSet(scheme, np.array(values), solver='btpde')


def observed_order(coarse: Sequence[complex], medium: Sequence[complex],
                   fine: Sequence[complex]) -> float:
    """
    Richardson order estimate from signals at dt, dt/2 and dt/4:
    p = log2(|S(dt) - S(dt/2)| / |S(dt/2) - S(dt/4)|).
    """
    c, m, f = (np.atleast_1d(np.asarray(x, dtype=complex)) for x in (coarse, medium, fine))
    num = np.linalg.norm(c - m)
    den = np.linalg.norm(m - f)
    if den == 0.0:
        return float('inf') if num > 0 else float('nan')
    return float(np.log2(num / den))

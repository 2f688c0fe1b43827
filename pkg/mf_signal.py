"""
Matrix-Formalism dMRI Signal
============================
Forward map from a Laplace eigenbasis and a gradient scheme to the complex
dMRI signal. In the eigenbasis the Bloch-Torrey equation becomes

    d nu/dt = -K(t) nu,   K = L + T + i*gamma*g*f(t)*A(d)

with K constant on each PGSE interval, so every interval is one matrix
exponential. nu(0) = rho * moments and S = moments' nu(T_echo).
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import scipy.linalg

from fem_assembly import PhysicsParams
from gradient_sequences import (
    GradientScheme, Measurement, PgseSequence, b_value,
)
from laplace_eigen import LaplaceBasis
from recon_constants import CSV_FLOAT_FORMAT, SIGNAL_CSV_COLUMNS
from recon_errors import PropagationError, SchemeError

logger = logging.getLogger(__name__)

PROPAGATION_SELF_CHECK_TOL = 1e-10


# =============================================================================
# DATA STRUCTURE
# =============================================================================

@dataclass(frozen=True, eq=False)
class SignalSet:
    """Complex signal per measurement of a scheme."""
    scheme: GradientScheme
    values: np.ndarray
    solver: str = 'mf'

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=complex).reshape(-1)
        if vals.shape[0] != len(self.scheme):
            raise SchemeError(f"{vals.shape[0]} signal values for {len(self.scheme)} measurements")
        vals.setflags(write=False)
        object.__setattr__(self, 'values', vals)

    @property
    def reference(self) -> np.ndarray:
        """g = 0 value of each measurement's sequence."""
        refs = {s: self.values[self.scheme.reference_index(s)] for s in range(len(self.scheme.sequences))}
        return np.array([refs[m.seq_id] for m in self.scheme.measurements])

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)

    @property
    def normalized(self) -> np.ndarray:
        return self.magnitude / np.abs(self.reference)

    def same_layout(self, other: 'SignalSet', atol: float = 1e-9) -> bool:
        a, b = self.scheme, other.scheme
        if len(a) != len(b) or len(a.sequences) != len(b.sequences):
            return False
        for sa, sb in zip(a.sequences, b.sequences):
            if not np.allclose(list(sa.to_dict().values()), list(sb.to_dict().values()), atol=atol):
                return False
        for ma, mb in zip(a.measurements, b.measurements):
            if ma.seq_id != mb.seq_id or not np.isclose(ma.g, mb.g, rtol=1e-9, atol=0.0):
                return False
            if not np.allclose(ma.direction, mb.direction, atol=atol):
                return False
        return True


# =============================================================================
# PROPAGATION
# =============================================================================

def propagator(K: np.ndarray, dt: float) -> np.ndarray:
    """exp(-K dt) by scaling and squaring with a Pade approximant."""
    if not dt > 0:
        raise PropagationError(f"Propagation step must be > 0, got {dt}")
    K = np.asarray(K)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise PropagationError(f"K must be square, got shape {K.shape}")
    norm = np.linalg.norm(K, 1) * dt
    if not np.isfinite(norm):
        raise PropagationError(f"Non-finite ||K dt||_1 = {norm}")
    E = scipy.linalg.expm(-K * dt)
    if not np.all(np.isfinite(E)):
        raise PropagationError(f"Matrix exponential overflow (||K dt||_1 = {norm:.3e})")
    return E


def exp_propagate(K: np.ndarray, dt: float, nu: np.ndarray, verify: bool = False) -> np.ndarray:
    """
    exp(-K dt) nu. With verify=True the result is compared with two half steps
    and PropagationError is raised if they disagree beyond 1e-10 relative.
    """
    nu = np.asarray(nu)
    if nu.shape[0] != np.shape(K)[0]:
        raise PropagationError(f"Vector length {nu.shape[0]} does not match K {np.shape(K)}")
    out = propagator(K, dt) @ nu
    if verify:
        half = propagator(K, dt / 2.0)
        check = half @ (half @ nu)
        scale = max(np.linalg.norm(out), np.finfo(float).tiny)
        err = np.linalg.norm(out - check) / scale
        if err > PROPAGATION_SELF_CHECK_TOL:
            raise PropagationError(f"Half-step self-check failed: relative error {err:.3e} "
                                   f"(||K dt||_1 = {np.linalg.norm(K, 1) * dt:.3e})")
    return out


# =============================================================================
# SIMULATION
# =============================================================================

class _SequencePropagators:
    """Free-interval propagators of one sequence, shared by its measurements."""

    def __init__(self, basis: LaplaceBasis, params: PhysicsParams, seq: PgseSequence):
        self.seq = seq
        self.K0 = (basis.L + basis.T).astype(complex)
        self._free: Dict[float, np.ndarray] = {}
        for t0, t1, f in seq.intervals():
            if f == 0 and (t1 - t0) not in self._free:
                self._free[t1 - t0] = propagator(self.K0, t1 - t0)

    def run(self, basis: LaplaceBasis, params: PhysicsParams, m: Measurement,
            nu0: np.ndarray, verify: bool) -> complex:
        nu = nu0
        if m.g == 0.0:
            for t0, t1, _ in self.seq.intervals():
                dt = t1 - t0
                nu = self._free[dt] @ nu if dt in self._free else propagator(self.K0, dt) @ nu
            return complex(basis.moments @ nu)

        K_plus = self.K0 + 1j * params.gamma * m.g * basis.A(m.direction)
        E_plus = E_minus = None
        for t0, t1, f in self.seq.intervals():
            dt = t1 - t0
            if f == 0:
                nu = self._free[dt] @ nu
            elif f > 0:
                if verify:
                    nu = exp_propagate(K_plus, dt, nu, verify=True)
                    continue
                E_plus = propagator(K_plus, dt) if E_plus is None else E_plus
                nu = E_plus @ nu
            else:
                # K0 and A are real: exp(-(K0 - i*c*A) dt) = conj(exp(-(K0 + i*c*A) dt))
                if verify:
                    nu = exp_propagate(np.conj(K_plus), dt, nu, verify=True)
                    continue
                E_minus = np.conj(propagator(K_plus, dt)) if E_minus is None else E_minus
                nu = E_minus @ nu
        return complex(basis.moments @ nu)


def simulate(basis: LaplaceBasis, params: PhysicsParams, scheme: GradientScheme,
             verify: bool = False, jobs: int = 1) -> SignalSet:
    """
    Matrix-formalism signal for every measurement. Measurements are
    independent; with jobs > 1 they run on a thread pool and are gathered in
    scheme order.
    """
    if not np.all(np.isfinite(basis.moments)):
        raise PropagationError("Basis moments are not finite")
    nu0 = params.rho * basis.moments.astype(complex)
    seq_props = [_SequencePropagators(basis, params, s) for s in scheme.sequences]

    def one(m: Measurement) -> complex:
        return seq_props[m.seq_id].run(basis, params, m, nu0, verify)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(one, scheme.measurements))
    else:
        values = [one(m) for m in scheme.measurements]

    signals = SignalSet(scheme, np.array(values), solver='mf')
    _log_monotonicity(signals)
    return signals


def _log_monotonicity(signals: SignalSet) -> None:
    """Report (without failing) magnitude increases with g at fixed sequence and direction."""
    mags = signals.magnitude
    groups: Dict[tuple, List] = {}
    for i, m in enumerate(signals.scheme.measurements):
        if m.g > 0:
            groups.setdefault((m.seq_id, m.direction), []).append((m.g, mags[i]))
    ref = np.abs(signals.reference)
    for (seq_id, direction), pts in groups.items():
        pts.sort()
        series = [ref[signals.scheme.reference_index(seq_id)]] + [p[1] for p in pts]
        if np.any(np.diff(series) > 1e-9 * series[0]):
            logger.debug("Signal magnitude not monotone in g (seq %d, direction %s)",
                         seq_id, np.round(direction, 3))


# =============================================================================
# CSV I/O
# =============================================================================

def signal_table(signals: SignalSet) -> pd.DataFrame:
    scheme = signals.scheme
    normalized = signals.normalized
    rows = []
    for i, m in enumerate(scheme.measurements):
        seq = scheme.sequences[m.seq_id]
        v = signals.values[i]
        rows.append({
            'seq_id': m.seq_id, 'delta': seq.delta, 'Delta': seq.Delta,
            'g': m.g, 'b': b_value(seq, m.g),
            'dir_x': m.direction[0], 'dir_y': m.direction[1], 'dir_z': m.direction[2],
            're': v.real, 'im': v.imag, 'magnitude': abs(v),
            'normalized': normalized[i], 'solver': signals.solver, 'T_echo': seq.T_echo,
        })
    return pd.DataFrame(rows, columns=SIGNAL_CSV_COLUMNS)


def write_signal_csv(signals: SignalSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    signal_table(signals).to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


def read_signal_csv(path, scheme: Optional[GradientScheme] = None) -> SignalSet:
    """
    Read a signal CSV. Without a scheme, sequences are rebuilt from the
    (delta, Delta, T_echo) columns; files without T_echo get Delta + delta.
    """
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise SchemeError(f"Cannot read signal file {path}: {e}")
    missing = [c for c in SIGNAL_CSV_COLUMNS if c not in df.columns and c not in ('solver', 'T_echo')]
    if missing:
        raise SchemeError(f"{path.name}: missing columns {missing}")

    values = df['re'].to_numpy(float) + 1j * df['im'].to_numpy(float)
    solver = str(df['solver'].iloc[0]) if 'solver' in df.columns and len(df) else 'mf'
    if scheme is None:
        if 'T_echo' not in df.columns:
            df['T_echo'] = df['Delta'] + df['delta']
        seqs = (df[['seq_id', 'delta', 'Delta', 'T_echo']].drop_duplicates('seq_id')
                .sort_values('seq_id'))
        if not np.array_equal(seqs['seq_id'].to_numpy(), np.arange(len(seqs))):
            raise SchemeError(f"{path.name}: seq_id values must be 0..n-1")
        sequences = [PgseSequence(float(r.delta), float(r.Delta), float(r.T_echo))
                     for r in seqs.itertuples()]
        measurements = [
            Measurement(int(r.seq_id), (float(r.dir_x), float(r.dir_y), float(r.dir_z)), float(r.g))
            for r in df.itertuples()
        ]
        scheme = GradientScheme(tuple(sequences), tuple(measurements))
    return SignalSet(scheme, values, solver=solver)

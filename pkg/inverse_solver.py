"""
Latent-Space Mesh Reconstruction
================================
Recovers a mesh from a reference signal by descending the signal loss

    loss(z) = k * sum_i (|S(decode(z))_i|_norm - |S_ref,i|_norm)^2

over the spectral latent z. One loss evaluation runs the whole forward
pipeline: decode -> validity check -> FEM assembly -> Laplace basis ->
matrix-formalism signal. Gradients come from finite differences in latent
space; perturbed latents landing on a degenerate mesh score +inf and the step is halved.
"""

import logging
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from chamfer_metrics import modified_chamfer
from fem_assembly import PhysicsParams, assemble
from laplace_eigen import LaplaceBasis, default_length_scale, solve_basis
from mesh_io import TetMesh, inverted_count, mesh_hash, save_mesh, total_volume
from mf_signal import SignalSet, simulate
from recon_constants import (
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, CODEC_LATENT_DIM, CODEC_LATENT_LAYOUT,
    CODEC_N_COEFF, CSV_FLOAT_FORMAT, RECON_CONVERGENCE_TOL, RECON_FD_RETRIES,
    RECON_FD_STEP, RECON_GRADIENT_METHOD, RECON_LEARNING_RATE,
    RECON_LOG_EVERY, RECON_LOSS_MULTIPLIER, RECON_MAX_ITERS, RECON_OPTIMIZER,
    RECON_PATIENCE,
)
from recon_errors import ConfigError, ReconNumericalError, ReconstructionError, SchemeError
from spectral_codec import (
    SpectralCodec, build_codec, decode, encode, from_latent, to_latent,
)

logger = logging.getLogger(__name__)

OPTIMIZERS = ('gradient_descent', 'adaptive_moment')
GRADIENT_METHODS = ('central_fd', 'forward_fd')
BASIS_CACHE_SIZE = 64


# =============================================================================
# CONFIGURATION AND TRACE
# =============================================================================

@dataclass(frozen=True)
class ReconConfig:
    learning_rate: float = RECON_LEARNING_RATE
    loss_multiplier: float = RECON_LOSS_MULTIPLIER
    max_iters: int = RECON_MAX_ITERS
    optimizer: str = RECON_OPTIMIZER
    gradient_method: str = RECON_GRADIENT_METHOD
    fd_step: float = RECON_FD_STEP
    fd_retries: int = RECON_FD_RETRIES
    convergence_tol: float = RECON_CONVERGENCE_TOL
    patience: int = RECON_PATIENCE
    log_every: int = RECON_LOG_EVERY
    jobs: int = 1
    n_eig: Optional[int] = None           # fixed from the initial mesh when None
    n_coeff: int = CODEC_N_COEFF
    latent_dim: int = CODEC_LATENT_DIM
    layout: str = CODEC_LATENT_LAYOUT

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.loss_multiplier > 0:
            raise ConfigError(f"loss_multiplier must be > 0, got {self.loss_multiplier}")
        if not self.fd_step > 0:
            raise ConfigError(f"fd_step must be > 0, got {self.fd_step}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Unknown optimizer '{self.optimizer}' (expected one of {OPTIMIZERS})")
        if self.gradient_method not in GRADIENT_METHODS:
            raise ConfigError(f"Unknown gradient method '{self.gradient_method}'")
        if self.fd_retries < 0 or self.patience < 1 or self.log_every < 1 or self.jobs < 1:
            raise ConfigError("fd_retries must be >= 0; patience, log_every and jobs must be >= 1")
        if self.n_eig is not None and self.n_eig < 1:
            raise ConfigError(f"n_eig must be >= 1, got {self.n_eig}")

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class ReconTrace:
    """One record per accepted iterate."""
    records: List[Dict] = field(default_factory=list)

    def add(self, iteration: int, loss_value: float, z: np.ndarray, volume: float,
            chamfer: Optional[float] = None) -> None:
        self.records.append({
            'iter': iteration, 'loss': float(loss_value), 'volume': float(volume),
            'chamfer': chamfer, 'z': np.array(z, copy=True),
        })

    def __len__(self) -> int:
        return len(self.records)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r['loss'] for r in self.records])

    @property
    def volumes(self) -> np.ndarray:
        return np.array([r['volume'] for r in self.records])

    def best_so_far(self) -> np.ndarray:
        return np.minimum.accumulate(self.losses)

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.losses))

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            row = {'iter': r['iter'], 'loss': r['loss'], 'volume': r['volume'],
                   'chamfer': np.nan if r['chamfer'] is None else r['chamfer']}
            row.update({f"z_{i + 1}": v for i, v in enumerate(r['z'])})
            rows.append(row)
        return pd.DataFrame(rows)


def write_trace_csv(trace: ReconTrace, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace.to_frame().to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    return path


# =============================================================================
# LOSS AND GRADIENT
# =============================================================================

def loss(sim: SignalSet, ref: SignalSet, k: float = RECON_LOSS_MULTIPLIER) -> float:
    """k * squared L2 distance between normalized signal magnitudes."""
    if not sim.same_layout(ref):
        raise SchemeError("Simulated and reference signals use different measurement schemes")
    return float(k * np.sum((sim.normalized - ref.normalized) ** 2))


def gradient(objective: Callable[[np.ndarray], float], z: np.ndarray, cfg: ReconConfig,
             f0: Optional[float] = None) -> np.ndarray:
    """
    Finite-difference gradient of any scalar objective. Perturbed latents are evaluated
    in a fixed order (thread pool when cfg.jobs > 1). A coordinate whose perturbed losses
    are not finite is retried with half the step, at most cfg.fd_retries times.
    """
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ReconstructionError("Latent vector is not finite")
    central = cfg.gradient_method == 'central_fd'
    if not central and f0 is None:
        f0 = objective(z)
    if not central and not np.isfinite(f0):
        raise ReconstructionError("Loss at the current latent is not finite")

    def perturbed(i: int, h: float) -> List[np.ndarray]:
        e = np.zeros_like(z)
        e[i] = h
        return [z + e, z - e] if central else [z + e]

    def estimate(vals: List[float], h: float) -> float:
        return (vals[0] - vals[1]) / (2.0 * h) if central else (vals[0] - f0) / h

    points = [p for i in range(z.size) for p in perturbed(i, cfg.fd_step)]
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            values = list(pool.map(objective, points))
    else:
        values = [objective(p) for p in points]

    per = 2 if central else 1
    grad = np.empty(z.size)
    for i in range(z.size):
        vals = values[per * i: per * (i + 1)]
        h = cfg.fd_step
        retries = 0
        while not all(np.isfinite(vals)):
            if retries == cfg.fd_retries:
                raise ReconstructionError(f"Degenerate mesh when perturbing latent coordinate {i} "
                                          f"(z_{i + 1} = {z[i]:.6g}, last step {h:.3g})")
            h *= 0.5
            retries += 1
            vals = [objective(p) for p in perturbed(i, h)]
        grad[i] = estimate(vals, h)
    return grad


class SignalObjective:
    """
    Latent -> loss through the full forward pipeline. Degenerate decodes and
    numerical failures score +inf. Bases are kept in a small LRU keyed by the
    decoded mesh hash.
    """

    def __init__(self, codec: SpectralCodec, base_C: np.ndarray, ref: SignalSet,
                 params: PhysicsParams, n_eig: int, loss_multiplier: float = RECON_LOSS_MULTIPLIER):
        self.codec = codec
        self.base_C = np.asarray(base_C, dtype=float)
        self.ref = ref
        self.params = params
        self.n_eig = n_eig
        self.k = loss_multiplier
        self._cache: 'OrderedDict[str, LaplaceBasis]' = OrderedDict()
        self._lock = threading.Lock()
        self.evaluations = 0

    def mesh(self, z: np.ndarray) -> TetMesh:
        return decode(self.codec, from_latent(self.codec, z, self.base_C), report=False)

    def basis(self, mesh: TetMesh) -> LaplaceBasis:
        key = mesh_hash(mesh)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        basis = solve_basis(assemble(mesh, self.params), self.params, n_eig=self.n_eig)
        with self._lock:
            self._cache[key] = basis
            if len(self._cache) > BASIS_CACHE_SIZE:
                self._cache.popitem(last=False)
        return basis

    def evaluate(self, z: np.ndarray) -> Tuple[float, TetMesh]:
        with self._lock:
            self.evaluations += 1
        mesh = self.mesh(z)
        if inverted_count(mesh) > 0:
            return float('inf'), mesh
        try:
            sim = simulate(self.basis(mesh), self.params, self.ref.scheme)
        except ReconNumericalError as e:
            logger.debug("Forward simulation failed: %s", e)
            return float('inf'), mesh
        value = loss(sim, self.ref, self.k)
        return (value if np.isfinite(value) else float('inf')), mesh

    def __call__(self, z: np.ndarray) -> float:
        return self.evaluate(z)[0]


# =============================================================================
# OPTIMIZERS
# =============================================================================

class GradientDescent:
    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, z: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return z - self.learning_rate * grad


class AdaptiveMoment:
    """Bias-corrected first/second moment update."""

    def __init__(self, learning_rate: float, beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS):
        self.learning_rate = learning_rate
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, z: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return z - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(cfg: ReconConfig):
    if cfg.optimizer == 'adaptive_moment':
        return AdaptiveMoment(cfg.learning_rate)
    return GradientDescent(cfg.learning_rate)


# =============================================================================
# RECONSTRUCTION LOOP
# =============================================================================

def default_n_eig(mesh: TetMesh, params: PhysicsParams) -> int:
    """Mode count resolved by the default length scale on the initial mesh."""
    fem = assemble(mesh, params)
    return solve_basis(fem, params, length_scale=default_length_scale(mesh)).n_eig


def reconstruct(init_mesh: TetMesh, ref: SignalSet, cfg: Optional[ReconConfig] = None,
                params: Optional[PhysicsParams] = None,
                codec: Optional[SpectralCodec] = None,
                reference_mesh: Optional[TetMesh] = None,
                checkpoint_dir=None) -> Tuple[TetMesh, ReconTrace]:
    """
    Descend the signal loss from init_mesh. Returns the decoded best-loss
    iterate and the trace of accepted iterates.

    A step that lands on a degenerate mesh is undone (back to the best
    iterate) and the learning rate halved; more than cfg.fd_retries
    consecutive failures abort the run.
    """
    cfg = cfg or ReconConfig()
    params = params or PhysicsParams()
    if codec is None:
        codec = build_codec(init_mesh, n_coeff=min(cfg.n_coeff, init_mesh.n_vertices),
                            latent_dim=cfg.latent_dim, layout=cfg.layout)
    base_C = encode(codec, init_mesh)
    z = to_latent(codec, base_C)
    n_eig = cfg.n_eig or default_n_eig(init_mesh, params)
    objective = SignalObjective(codec, base_C, ref, params, n_eig, cfg.loss_multiplier)
    optimizer = make_optimizer(cfg)
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    logger.info("Reconstruction: latent_dim=%d, n_eig=%d, %d measurements, optimizer=%s",
                codec.latent_dim, n_eig, len(ref.scheme), cfg.optimizer)

    trace = ReconTrace()
    best_z, best_loss = z.copy(), float('inf')
    prev_loss = None
    stall = failures = 0

    for it in range(cfg.max_iters):
        value, mesh = objective.evaluate(z)
        if not np.isfinite(value):
            if it == 0:
                raise ReconstructionError(f"Loss of the initial mesh '{init_mesh.name}' is not finite")
            failures += 1
            if failures > cfg.fd_retries:
                raise ReconstructionError(f"{failures} consecutive steps gave degenerate meshes "
                                          f"(iteration {it})")
            optimizer.learning_rate *= 0.5
            z = best_z.copy()
            logger.debug("Iteration %d: degenerate step, learning rate -> %.3g", it, optimizer.learning_rate)
            continue
        failures = 0

        chamfer = modified_chamfer(mesh, reference_mesh) if reference_mesh is not None else None
        trace.add(it, value, z, total_volume(mesh), chamfer)
        if value < best_loss:
            best_loss, best_z = value, z.copy()

        if checkpoint_dir is not None and it % cfg.log_every == 0:
            save_mesh(mesh, checkpoint_dir / f"iter_{it:05d}.node")
        if it % cfg.log_every == 0:
            logger.info("iter %4d  loss %.6e  volume %.4f%s", it, value, total_volume(mesh),
                        "" if chamfer is None else f"  chamfer {chamfer:.4f}")

        if value == 0.0:
            break
        if prev_loss is not None:
            rel = abs(prev_loss - value) / max(prev_loss, np.finfo(float).tiny)
            stall = stall + 1 if rel < cfg.convergence_tol else 0
            if stall >= cfg.patience:
                logger.info("Converged at iteration %d (relative change < %g for %d iterations)",
                            it, cfg.convergence_tol, cfg.patience)
                break
        prev_loss = value

        grad = gradient(objective, z, cfg, f0=value)
        z = optimizer.step(z, grad)

    best = decode(codec, from_latent(codec, best_z, base_C), name='reconstruction')
    logger.info("Best loss %.6e at iteration %d (%d forward evaluations)",
                best_loss, trace.records[trace.best_index]['iter'], objective.evaluations)
    return best, trace

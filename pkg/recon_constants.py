"""
Mesh Reconstruction Constants
=============================
Physical constants, unit conversions and experiment defaults used across modules.

Internal units: micrometers (um), milliseconds (ms), millitesla (mT).
Diffusivity is then in um^2/ms (order 1), b-values in ms/um^2.

Edit the defaults here; every CLI flag falls back to these values.
"""

import math

# =============================================================================
# PHYSICAL CONSTANTS
# =============================================================================

# Gyromagnetic ratio of water protons: 2.67513e8 rad/s/T
GAMMA_SI = 2.67513e8
# rad/s/T -> rad/ms/mT : (1e-3 s/ms) * (1e-3 T/mT)
GAMMA = GAMMA_SI * 1e-3 * 1e-3          # 267.513 rad/(ms*mT)

# b-value conversion: 1 s/mm^2 = 1e3 ms / 1e6 um^2
S_PER_MM2_TO_MS_PER_UM2 = 1e-3

# Gradient conversion: 1 mT/m = 1e-6 mT/um
MT_PER_M_TO_MT_PER_UM = 1e-6

# =============================================================================
# MESH / GEOMETRY
# =============================================================================

VOLUME_EPS = 1e-12                       # um^3, degenerate tet threshold

# Canonical cylinder geometry (configurable)
CYLINDER_RADIUS = 1.0                    # um
CYLINDER_HEIGHT = 5.0                    # um
CYLINDER_VERTEX_BUDGET = 315
CYLINDER_MIN_BUDGET = 20
CYLINDER_MAX_ASPECT = 1000.0
CYLINDER_BUDGET_TOLERANCE = 0.10         # vertex count within 10% of budget
CYLINDER_RING_DENSITIES = (4, 5, 6, 7, 8)  # points added per ring step

# =============================================================================
# PHYSICS DEFAULTS
# =============================================================================

D0_DEFAULT = 2.0                         # um^2/ms (= 2.0e-3 mm^2/s)
T2_DEFAULT = math.inf                    # ms, no relaxation
KAPPA_DEFAULT = 0.0                      # um/ms, impermeable boundary
RHO_DEFAULT = 1.0                        # initial spin density

# =============================================================================
# LAPLACE EIGENBASIS
# =============================================================================

EIG_RESIDUAL_TOL = 1e-8
EIG_DENSE_MAX_VERTICES = 600             # dense generalized eigh below this size
EIG_MAX_MODES = 200                      # cap for length-scale truncation
EIG_MIN_MODES = 2

# =============================================================================
# SEQUENCES / SCHEMES
# =============================================================================

SMALL_DELTA_DEFAULT = 1.0                # ms
DIFFUSION_TIMES_ABLATION = (5.0, 20.0, 45.0, 95.0)   # ms
DIFFUSION_TIMES_DEFAULT = (5.0, 20.0, 45.0)          # 3-sequence default
N_DIRECTIONS_DEFAULT = 30
N_DIRECTIONS_ABLATION = (3, 15, 30, 60)
BVALUES_DEFAULT_S_MM2 = (1000.0,)        # s/mm^2, one shell per sequence
DIRECTION_SEED = 2024

# =============================================================================
# SPECTRAL CODEC
# =============================================================================

CODEC_N_COEFF = 300
CODEC_LATENT_DIM = 16
CODEC_LATENT_LAYOUT = 'mode_major'       # or 'per_axis'
CODEC_INCLUDE_TRANSLATION = False        # mode 1 excluded from latent

# =============================================================================
# RECONSTRUCTION DEFAULTS
# =============================================================================

RECON_LEARNING_RATE = 1e-2
RECON_LOSS_MULTIPLIER = 1e3
RECON_MAX_ITERS = 750
RECON_OPTIMIZER = 'adaptive_moment'      # or 'gradient_descent'
RECON_GRADIENT_METHOD = 'central_fd'     # or 'forward_fd'
RECON_FD_STEP = 1e-3
RECON_FD_RETRIES = 3
RECON_CONVERGENCE_TOL = 1e-6             # relative loss change
RECON_PATIENCE = 50
RECON_LOG_EVERY = 50

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# =============================================================================
# OUTPUT FORMATS
# =============================================================================

CSV_FLOAT_FORMAT = '%.17g'
SIGNAL_CSV_COLUMNS = [
    'seq_id', 'delta', 'Delta', 'g', 'b',
    'dir_x', 'dir_y', 'dir_z',
    're', 'im', 'magnitude', 'normalized', 'solver', 'T_echo',
]

CACHE_ENV_VAR = 'MESHRECON_CACHE_DIR'

# =============================================================================
# ABLATION GRIDS
# =============================================================================

BEND_VALUES = (0.0, 0.1, 0.3, 0.5)
TWIST_VALUES = (0.0, 0.5)
BEAD_COUNTS = (0, 2, 4, 6, 8)
BEAD_AMPLITUDES = (0.3, 0.4)
FAN_ANGLES = (0.0, 32.0, 46.0, 60.0)

# Diffusion-time combinations swept by the 'diffusion_times' preset
DIFFUSION_TIME_COMBINATIONS = (
    (5.0,),
    (20.0,),
    (45.0,),
    (95.0,),
    (5.0, 20.0),
    (5.0, 20.0, 45.0),
    (5.0, 20.0, 45.0, 95.0),
)

# Fixture used by the direction and diffusion-time presets
ABLATION_FIXTURE_BEND = 0.3

# Scaling factors of the augmentation protocol
AUGMENT_SCALE_FACTORS = (0.5, 1.5)

# Iteration budget of one ablation run (full runs use RECON_MAX_ITERS)
ABLATION_ITERS = 100
ABLATION_PRESETS = ('directions', 'diffusion_times', 'bending', 'beading', 'fanning')

"""
Complete Integration: Mesh -> Signal -> Reconstruction
======================================================
Command-line front end for the whole toolkit.

Flow:
    generate     build ground-truth meshes (bend/twist, beading, fanning) + manifest
    simulate     mesh + gradient scheme -> signal CSV (matrix formalism or time stepping)
    reconstruct  reference signal CSV -> reconstructed mesh + trace
    evaluate     mesh vs reference mesh -> chamfer report
    ablate       batch reconstructions over the experiment grids -> results table

Every flag can also be given in a JSON file passed with --config (keys are
flag names with dashes or underscores); flags on the command line win.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.

Usage:
    python integration_pipeline.py generate --bend 0 0.1 0.3 0.5 --twist 0 0.5 --out meshes
    python integration_pipeline.py simulate --mesh meshes/bend0.30_twist0.00.node --out ref.csv
    python integration_pipeline.py reconstruct --reference ref.csv --out recon
    python integration_pipeline.py evaluate --mesh recon/reconstruction.node --reference meshes/bend0.30_twist0.00.node
    python integration_pipeline.py ablate --preset directions --out ablation_directions.csv
"""

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from btpde_solver import simulate_btpde
from chamfer_metrics import evaluation_report, modified_chamfer, write_per_vertex_csv
from deform_families import (
    DeformSpec, apply_spec, augment, augmentation_suite, canonical_cylinder,
    dataset_split,
)
from fem_assembly import PhysicsParams, assemble
from gradient_sequences import (
    GradientScheme, load_scheme, preset_scheme,
    save_scheme,
)
from inverse_solver import ReconConfig, default_n_eig, reconstruct, write_trace_csv
from laplace_eigen import load_or_solve_basis
from mesh_io import TetMesh, load_mesh, save_mesh, total_volume, write_surface_obj
from mf_signal import SignalSet, read_signal_csv, simulate, write_signal_csv
from recon_constants import (
    ABLATION_FIXTURE_BEND, ABLATION_ITERS, ABLATION_PRESETS, AUGMENT_SCALE_FACTORS,
    BEAD_AMPLITUDES, BEAD_COUNTS, BEND_VALUES, BVALUES_DEFAULT_S_MM2,
    CODEC_LATENT_DIM, CODEC_LATENT_LAYOUT, CODEC_N_COEFF, CSV_FLOAT_FORMAT,
    CYLINDER_HEIGHT, CYLINDER_RADIUS, CYLINDER_VERTEX_BUDGET, D0_DEFAULT,
    DIFFUSION_TIME_COMBINATIONS, DIFFUSION_TIMES_DEFAULT, DIRECTION_SEED,
    FAN_ANGLES, N_DIRECTIONS_ABLATION, N_DIRECTIONS_DEFAULT,
    RECON_CONVERGENCE_TOL, RECON_FD_STEP, RECON_GRADIENT_METHOD,
    RECON_LEARNING_RATE, RECON_LOG_EVERY, RECON_LOSS_MULTIPLIER,
    RECON_MAX_ITERS, RECON_OPTIMIZER, RECON_PATIENCE, SMALL_DELTA_DEFAULT,
    T2_DEFAULT, TWIST_VALUES,
)
from recon_errors import ConfigError, ReconNumericalError, ReconValidationError

logger = logging.getLogger(__name__)


# =============================================================================
# CONSOLE OUTPUT
# =============================================================================

def _banner(title: str, lines: List[str]) -> datetime:
    started = datetime.now()
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)
    for line in lines:
        print(f" {line}")
    print(f" Started: {started.strftime('%Y-%m-%d %H:%M:%S')}")
    print("=" * 70 + "\n")
    return started


def _step(n: int, text: str) -> None:
    if n > 1:
        print("\n" + "=" * 70)
    print(f"STEP {n}: {text}")
    print("-" * 70)


def _summary(title: str, started: datetime, lines: List[str]) -> None:
    print("\n" + "=" * 70)
    print(title)
    print("=" * 70)
    for line in lines:
        print(f" {line}")
    finished = datetime.now()
    print(f"\n Completed: {finished.strftime('%Y-%m-%d %H:%M:%S')} "
          f"({(finished - started).total_seconds():.1f} s)")
    print("=" * 70 + "\n")


# =============================================================================
# SHARED PIPELINE PIECES
# =============================================================================

def physics_from_args(args) -> PhysicsParams:
    return PhysicsParams(D0=args.D0, T2=args.T2)


def scheme_from_args(args) -> GradientScheme:
    if getattr(args, 'scheme', None):
        return load_scheme(args.scheme)
    return preset_scheme(n_directions=args.ndir, diffusion_times=args.deltas,
                         bvalues_s_mm2=args.bvals, delta=args.small_delta, seed=args.seed)


def run_simulation(mesh: TetMesh, scheme: GradientScheme, params: PhysicsParams,
                   solver: str = 'mf', dt: Optional[float] = None,
                   n_eig: Optional[int] = None, length_scale: Optional[float] = None,
                   cache_dir=None, jobs: int = 1) -> SignalSet:
    """Forward simulation with either engine. dt defaults to the smallest delta / 10."""
    fem = assemble(mesh, params)
    if solver == 'btpde':
        if dt is None:
            dt = min(s.delta for s in scheme.sequences) / 10.0
        return simulate_btpde(fem, params, scheme, dt, jobs=jobs)
    if solver != 'mf':
        raise ConfigError(f"Unknown solver '{solver}' (expected 'mf' or 'btpde')")
    basis = load_or_solve_basis(mesh, fem, params, n_eig=n_eig,
                                length_scale=length_scale, cache_dir=cache_dir)
    return simulate(basis, params, scheme, jobs=jobs)


def _load_mesh_arg(path: Optional[str], args) -> TetMesh:
    if path:
        return load_mesh(path)
    return canonical_cylinder(args.radius, args.height, args.vertices)


def _output_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"Cannot create output directory {out}: {e}")
    return out


# =============================================================================
# GENERATE
# =============================================================================

def generation_specs(args) -> List[DeformSpec]:
    specs = []
    if args.bend:
        for beta in args.bend:
            for twist in (args.twist or [0.0]):
                specs.append(DeformSpec('bend_twist', bend_coeff=beta, twist_coeff=twist))
    elif args.twist:
        specs += [DeformSpec('bend_twist', twist_coeff=t) for t in args.twist]
    specs += [DeformSpec('beading', bead_count=n, bead_amplitude=args.bead_amplitude)
              for n in (args.beads or [])]
    specs += [DeformSpec('fanning', fan_angle=a) for a in (args.fan or [])]
    return specs


def cmd_generate(args) -> Dict:
    specs = generation_specs(args)
    if not specs:
        raise ConfigError("No deformation requested (give --bend, --twist, --beads or --fan)")
    out = _output_dir(args.out)
    started = _banner("MESH GENERATION", [f"Deformations: {len(specs)}", f"Output: {out}"])

    _step(1, "Building canonical cylinder...")
    base = canonical_cylinder(args.radius, args.height, args.vertices)
    print(f"   V={base.n_vertices}  T={base.n_tets}  volume={total_volume(base):.4f} um^3")

    _step(2, "Applying deformations...")
    augmentations = augmentation_suite(AUGMENT_SCALE_FACTORS) if args.augment else []
    entries = []
    for spec in specs:
        mesh = apply_spec(base, spec)
        variants = [(spec.label(), None, mesh)]
        variants += [(f"{spec.label()}_{op.label()}", op.label(), augment(mesh, op))
                     for op in augmentations]
        for name, aug, variant in variants:
            save_mesh(variant, out / f"{name}.node")
            entries.append({'file': f"{name}.node", 'spec': spec.to_dict(),
                            'split': dataset_split(spec), 'augmentation': aug,
                            'volume': total_volume(variant)})
        print(f"   {spec.label():28s} split={dataset_split(spec):5s} files={len(variants)}")

    manifest = {
        'seed': args.seed,
        'cylinder': {'radius': args.radius, 'height': args.height,
                     'vertex_budget': args.vertices, 'n_vertices': base.n_vertices},
        'meshes': entries,
    }
    with open(out / 'manifest.json', 'w') as f:
        json.dump(manifest, f, indent=2)

    _summary("GENERATION SUMMARY", started, [f"Meshes written: {len(entries)}",
                                              f"Manifest: {out / 'manifest.json'}"])
    return manifest


# =============================================================================
# SIMULATE
# =============================================================================

def cmd_simulate(args) -> SignalSet:
    started = _banner("SIGNAL SIMULATION", [f"Mesh: {args.mesh or 'canonical cylinder'}",
                                            f"Solver: {args.solver}"])
    _step(1, "Loading mesh and scheme...")
    mesh = _load_mesh_arg(args.mesh, args)
    scheme = scheme_from_args(args)
    params = physics_from_args(args)
    print(f"   V={mesh.n_vertices}  volume={total_volume(mesh):.4f} um^3")
    print(f"   {len(scheme.sequences)} sequences, {len(scheme)} measurements")

    _step(2, "Simulating...")
    signals = run_simulation(mesh, scheme, params, solver=args.solver, dt=args.dt,
                             n_eig=args.n_eig, length_scale=args.length_scale,
                             cache_dir=args.cache_dir, jobs=args.jobs)
    path = write_signal_csv(signals, args.out)
    if args.save_scheme:
        save_scheme(scheme, args.save_scheme)

    norm = signals.normalized
    _summary("SIMULATION SUMMARY", started, [
        f"Rows: {len(scheme)}",
        f"Normalized signal range: [{norm.min():.4f}, {norm.max():.4f}]",
        f"Signal CSV: {path}",
    ])
    return signals


# =============================================================================
# RECONSTRUCT
# =============================================================================

def recon_config_from_args(args, max_iters: Optional[int] = None) -> ReconConfig:
    return ReconConfig(
        learning_rate=args.lr, loss_multiplier=args.loss_multiplier,
        max_iters=max_iters or args.max_iters, optimizer=args.optimizer,
        gradient_method=args.gradient_method, fd_step=args.fd_step,
        convergence_tol=args.tol, patience=args.patience, log_every=args.log_every,
        jobs=args.jobs, n_eig=args.n_eig, n_coeff=args.n_coeff,
        latent_dim=args.latent_dim, layout=args.layout,
    )


def cmd_reconstruct(args):
    out = _output_dir(args.out)
    started = _banner("MESH RECONSTRUCTION", [f"Reference signal: {args.reference}",
                                              f"Output: {out}"])
    _step(1, "Loading reference and initial mesh...")
    scheme = load_scheme(args.scheme) if args.scheme else None
    ref = read_signal_csv(args.reference, scheme)
    init = _load_mesh_arg(args.init, args)
    target = load_mesh(args.reference_mesh) if args.reference_mesh else None
    cfg = recon_config_from_args(args)
    params = physics_from_args(args)
    print(f"   {len(ref.scheme)} measurements, init V={init.n_vertices}")

    _step(2, "Optimizing latent vector...")
    mesh, trace = reconstruct(init, ref, cfg, params, reference_mesh=target,
                              checkpoint_dir=out / 'checkpoints')

    save_mesh(mesh, out / 'reconstruction.node')
    write_surface_obj(mesh, out / 'reconstruction.obj')
    write_trace_csv(trace, out / 'trace.csv')
    with open(out / 'config.json', 'w') as f:
        json.dump({'recon': cfg.to_dict(), 'physics': params.to_dict(),
                   'seed': args.seed}, f, indent=2, default=str)

    losses = trace.losses
    lines = [f"Iterations: {len(trace)}",
             f"Initial loss: {losses[0]:.6e}",
             f"Best loss: {losses.min():.6e} (iteration {trace.records[trace.best_index]['iter']})"]
    if target is not None:
        lines.append(f"Modified chamfer to reference: {modified_chamfer(mesh, target):.6f}")
    lines.append(f"Mesh: {out / 'reconstruction.node'}")
    _summary("RECONSTRUCTION SUMMARY", started, lines)
    return mesh, trace


# =============================================================================
# EVALUATE
# =============================================================================

def cmd_evaluate(args) -> Dict:
    started = _banner("MESH EVALUATION", [f"Mesh: {args.mesh}", f"Reference: {args.reference}"])
    mesh = load_mesh(args.mesh)
    reference = load_mesh(args.reference)
    report = evaluation_report(mesh, reference, jobs=args.jobs)
    if args.heatmap:
        write_per_vertex_csv(mesh, reference, args.heatmap)
        report['heatmap'] = str(args.heatmap)
    if args.out:
        path = Path(args.out)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(report, f, indent=2)
    _summary("EVALUATION SUMMARY", started, [
        f"Chamfer:          {report['chamfer']:.6f}",
        f"Modified chamfer: {report['modified_chamfer']:.6f} (transform {report['best_transform']})",
        f"Volume:           {report['volume']:.4f} vs {report['reference_volume']:.4f} um^3",
    ])
    return report


# =============================================================================
# ABLATE
# =============================================================================

def ablation_tasks(preset: str, seeds: int, base_seed: int) -> List[Dict]:
    """One task per (grid point, seed) of a preset."""
    bent = {'kind': 'bend_twist', 'bend_coeff': ABLATION_FIXTURE_BEND}
    grid = []
    if preset == 'directions':
        grid = [(f"ndir{n}", bent, n, DIFFUSION_TIMES_DEFAULT) for n in N_DIRECTIONS_ABLATION]
    elif preset == 'diffusion_times':
        grid = [("dt" + "-".join(f"{d:g}" for d in combo), bent, N_DIRECTIONS_DEFAULT, combo)
                for combo in DIFFUSION_TIME_COMBINATIONS]
    elif preset == 'bending':
        for beta in BEND_VALUES:
            for twist in TWIST_VALUES:
                spec = DeformSpec('bend_twist', bend_coeff=beta, twist_coeff=twist)
                grid.append((spec.label(), spec.to_dict(), N_DIRECTIONS_DEFAULT, DIFFUSION_TIMES_DEFAULT))
    elif preset == 'beading':
        for count in BEAD_COUNTS:
            spec = DeformSpec('beading', bead_count=count, bead_amplitude=BEAD_AMPLITUDES[0])
            grid.append((spec.label(), spec.to_dict(), N_DIRECTIONS_DEFAULT, DIFFUSION_TIMES_DEFAULT))
    elif preset == 'fanning':
        for angle in FAN_ANGLES:
            spec = DeformSpec('fanning', fan_angle=angle)
            grid.append((spec.label(), spec.to_dict(), N_DIRECTIONS_DEFAULT, DIFFUSION_TIMES_DEFAULT))
    else:
        raise ConfigError(f"Unknown ablation preset '{preset}' (expected one of {ABLATION_PRESETS})")

    return [{'preset': preset, 'label': label, 'spec': spec, 'n_directions': ndir,
             'diffusion_times': tuple(times), 'seed': base_seed + s}
            for label, spec, ndir, times in grid for s in range(seeds)]


def run_ablation_task(task: Dict, iters: int = ABLATION_ITERS,
                      vertex_budget: int = CYLINDER_VERTEX_BUDGET,
                      bvalues_s_mm2=BVALUES_DEFAULT_S_MM2) -> Dict:
    """Straight cylinder -> deformed target reconstruction for one grid point."""
    params = PhysicsParams()
    init = canonical_cylinder(vertex_budget=vertex_budget)
    target = apply_spec(init, DeformSpec(**task['spec']))
    scheme = preset_scheme(task['n_directions'], task['diffusion_times'], bvalues_s_mm2,
                           seed=task['seed'])
    n_eig = default_n_eig(init, params)
    ref = run_simulation(target, scheme, params, n_eig=n_eig)
    cfg = ReconConfig(max_iters=iters, n_eig=n_eig)
    mesh, trace = reconstruct(init, ref, cfg, params)
    return {
        'preset': task['preset'], 'label': task['label'], 'seed': task['seed'],
        'n_directions': task['n_directions'],
        'diffusion_times': "-".join(f"{d:g}" for d in task['diffusion_times']),
        'iterations': len(trace),
        'initial_loss': float(trace.losses[0]),
        'final_loss': float(trace.losses.min()),
        'initial_chamfer': modified_chamfer(init, target),
        'modified_chamfer': modified_chamfer(mesh, target),
    }


def _ablation_worker(payload):
    task, iters, budget, bvals = payload
    return run_ablation_task(task, iters, budget, bvals)


def cmd_ablate(args) -> pd.DataFrame:
    tasks = ablation_tasks(args.preset, args.seeds, args.seed)
    started = _banner("ABLATION", [f"Preset: {args.preset}", f"Runs: {len(tasks)}",
                                   f"Iterations per run: {args.iters}", f"Workers: {args.jobs}"])
    _step(1, "Running reconstructions...")
    payloads = [(t, args.iters, args.vertices, tuple(args.bvals)) for t in tasks]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablation_worker, payloads))
    else:
        rows = [_ablation_worker(p) for p in payloads]
    for row in rows:
        print(f"   {row['label']:28s} seed={row['seed']:<6d} loss {row['initial_loss']:.3e} -> "
              f"{row['final_loss']:.3e}  chamfer {row['initial_chamfer']:.4f} -> {row['modified_chamfer']:.4f}")

    table = pd.DataFrame(rows)
    path = Path(args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
    _summary("ABLATION SUMMARY", started, [f"Rows: {len(table)}", f"Table: {path}"])
    return table


# =============================================================================
# COMMAND LINE INTERFACE
# =============================================================================

def _add_cylinder_flags(p):
    p.add_argument('--radius', type=float, default=CYLINDER_RADIUS, help='cylinder radius (um)')
    p.add_argument('--height', type=float, default=CYLINDER_HEIGHT, help='cylinder height (um)')
    p.add_argument('--vertices', type=int, default=CYLINDER_VERTEX_BUDGET, help='cylinder vertex budget')


def _add_physics_flags(p):
    p.add_argument('--D0', type=float, default=D0_DEFAULT, help='diffusivity (um^2/ms)')
    p.add_argument('--T2', type=float, default=T2_DEFAULT, help='T2 relaxation (ms)')
    p.add_argument('--n-eig', type=int, default=None, help='fixed number of Laplace modes')


def _add_scheme_flags(p):
    p.add_argument('--scheme', default=None, help='scheme JSON (overrides --ndir/--deltas/--bvals)')
    p.add_argument('--ndir', type=int, default=N_DIRECTIONS_DEFAULT, help='gradient directions')
    p.add_argument('--deltas', type=float, nargs='+', default=list(DIFFUSION_TIMES_DEFAULT),
                   help='diffusion times Delta (ms)')
    p.add_argument('--bvals', type=float, nargs='+', default=list(BVALUES_DEFAULT_S_MM2),
                   help='b-values (s/mm^2)')
    p.add_argument('--small-delta', type=float, default=SMALL_DELTA_DEFAULT, help='pulse duration delta (ms)')


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog='integration_pipeline', formatter_class=fmt,
                                     description='dMRI mesh simulation and reconstruction')
    parser.add_argument('--config', default=None, help='JSON file of flag defaults')
    parser.add_argument('--seed', type=int, default=DIRECTION_SEED, help='seed for direction sets')
    parser.add_argument('--jobs', type=int, default=1, help='parallel workers')
    parser.add_argument('--log-level', default='info',
                        choices=['debug', 'info', 'warning', 'error'])
    parser.add_argument('--cache-dir', default=None, help='basis/codec cache directory')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('generate', formatter_class=fmt, help='build deformed meshes')
    p.add_argument('--bend', type=float, nargs='*', default=[], help='bend coefficients')
    p.add_argument('--twist', type=float, nargs='*', default=[], help='twist coefficients')
    p.add_argument('--beads', type=int, nargs='*', default=[], help='bead counts')
    p.add_argument('--bead-amplitude', type=float, default=BEAD_AMPLITUDES[0])
    p.add_argument('--fan', type=float, nargs='*', default=[], help='fan angles (deg)')
    p.add_argument('--augment', action='store_true', help='also write scaled/rotated copies')
    _add_cylinder_flags(p)
    p.add_argument('--out', default='meshes', help='output directory')

    p = sub.add_parser('simulate', formatter_class=fmt, help='mesh -> signal CSV')
    p.add_argument('--mesh', default=None, help='.node file (canonical cylinder if omitted)')
    _add_scheme_flags(p)
    _add_physics_flags(p)
    _add_cylinder_flags(p)
    p.add_argument('--solver', choices=['mf', 'btpde'], default='mf')
    p.add_argument('--dt', type=float, default=None, help='time step for btpde (ms); delta/10 if omitted')
    p.add_argument('--length-scale', type=float, default=None, help='resolved length scale (um)')
    p.add_argument('--save-scheme', default=None, help='also write the scheme as JSON')
    p.add_argument('--out', default='signals.csv', help='signal CSV')

    p = sub.add_parser('reconstruct', formatter_class=fmt, help='signal CSV -> mesh')
    p.add_argument('--reference', required=True, help='reference signal CSV')
    p.add_argument('--scheme', default=None, help='scheme JSON (else rebuilt from the CSV)')
    p.add_argument('--init', default=None, help='initial .node (canonical cylinder if omitted)')
    p.add_argument('--reference-mesh', default=None, help='ground-truth .node for chamfer tracking')
    p.add_argument('--lr', type=float, default=RECON_LEARNING_RATE)
    p.add_argument('--loss-multiplier', type=float, default=RECON_LOSS_MULTIPLIER)
    p.add_argument('--max-iters', type=int, default=RECON_MAX_ITERS)
    p.add_argument('--optimizer', choices=['adaptive_moment', 'gradient_descent'], default=RECON_OPTIMIZER)
    p.add_argument('--gradient-method', choices=['central_fd', 'forward_fd'], default=RECON_GRADIENT_METHOD)
    p.add_argument('--fd-step', type=float, default=RECON_FD_STEP)
    p.add_argument('--tol', type=float, default=RECON_CONVERGENCE_TOL, help='relative loss change')
    p.add_argument('--patience', type=int, default=RECON_PATIENCE)
    p.add_argument('--log-every', type=int, default=RECON_LOG_EVERY)
    p.add_argument('--n-coeff', type=int, default=CODEC_N_COEFF)
    p.add_argument('--latent-dim', type=int, default=CODEC_LATENT_DIM)
    p.add_argument('--layout', choices=['mode_major', 'per_axis'], default=CODEC_LATENT_LAYOUT)
    _add_physics_flags(p)
    _add_cylinder_flags(p)
    p.add_argument('--out', default='reconstruction', help='output directory')

    p = sub.add_parser('evaluate', formatter_class=fmt, help='chamfer report')
    p.add_argument('--mesh', required=True, help='.node of the mesh to score')
    p.add_argument('--reference', required=True, help='.node of the reference mesh')
    p.add_argument('--heatmap', default=None, help='per-vertex distance CSV')
    p.add_argument('--out', default=None, help='report JSON')

    p = sub.add_parser('ablate', formatter_class=fmt, help='batch reconstructions')
    p.add_argument('--preset', choices=list(ABLATION_PRESETS), required=True)
    p.add_argument('--iters', type=int, default=ABLATION_ITERS)
    p.add_argument('--seeds', type=int, default=1, help='repetitions with consecutive seeds')
    p.add_argument('--vertices', type=int, default=CYLINDER_VERTEX_BUDGET, help='cylinder vertex budget')
    p.add_argument('--bvals', type=float, nargs='+', default=list(BVALUES_DEFAULT_S_MM2),
                   help='b-values (s/mm^2)')
    p.add_argument('--out', default='ablation.csv', help='results CSV')
    return parser


def _subparsers(parser: argparse.ArgumentParser) -> Dict[str, argparse.ArgumentParser]:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return dict(action.choices)
    return {}


def apply_config_file(parser: argparse.ArgumentParser, path) -> None:
    """Install JSON values as parser defaults so explicit flags still override them."""
    try:
        with open(path) as f:
            config = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    if not isinstance(config, dict):
        raise ConfigError(f"Config {path} must hold a JSON object")
    config = {k.replace('-', '_'): v for k, v in config.items()}

    parsers = [parser] + list(_subparsers(parser).values())
    known = {a.dest for p in parsers for a in p._actions}
    unknown = sorted(set(config) - known - {'config'})
    if unknown:
        raise ConfigError(f"Unknown config keys: {unknown}")
    for p in parsers:
        dests = {a.dest for a in p._actions}
        p.set_defaults(**{k: v for k, v in config.items() if k in dests and k != 'config'})


COMMANDS = {
    'generate': cmd_generate,
    'simulate': cmd_simulate,
    'reconstruct': cmd_reconstruct,
    'evaluate': cmd_evaluate,
    'ablate': cmd_ablate,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument('--config', default=None)
        known, _ = pre.parse_known_args(argv)
        if known.config:
            apply_config_file(parser, known.config)
        args = parser.parse_args(argv)
        logging.basicConfig(level=args.log_level.upper(),
                            format='%(asctime)s %(levelname)s %(name)s: %(message)s')
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        COMMANDS[args.command](args)
    except ReconValidationError as e:
        print(f"Error: {e}", file=sys.stderr)
        return ReconValidationError.exit_code
    except ReconNumericalError as e:
        print(f"Numerical failure: {e}", file=sys.stderr)
        return ReconNumericalError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

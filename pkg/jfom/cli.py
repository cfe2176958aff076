"""Command-line workflows: solve, certify, warmstart, export-heatmap and compare.

Every command is non-interactive. Validation failures exit with status 2, any other
failure with status 1.
"""
import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

import jax.numpy as jnp
import numpy as np
import toml
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from jfom import io
from jfom.certificates import Certificate, certified_lower_bound, estimate_feasibility
from jfom.config import RunConfig, load_config
from jfom.errors import FomError, ProvenanceError, ValidationError
from jfom.problems import ControlProblem, PerturbationBudget, RiccatiOracle, penalty_bound, perturb
from jfom.rollout import ControlParameterization, Partition, segmented_rollout
from jfom.saddle import (
    compare,
    dual_update,
    evaluate_gap,
    pruned_search,
    receding_horizon_step,
    summarize_search,
)

logger = logging.getLogger('jfom')

EXIT_OK, EXIT_FAILURE, EXIT_VALIDATION = 0, 1, 2


def _setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(message)s',
        handlers=[RichHandler(console=Console(stderr=True), show_path=False, show_time=False)],
        force=True,
    )


def _float_pair(text: str) -> List[float]:
    return [float(v) for v in text.split(',') if v.strip()]


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, 'config', None) else RunConfig()
    if getattr(args, 'seed', None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, 'tau', None) is not None:
        cfg = cfg._replace(search=cfg.search._replace(tau=args.tau))
    if getattr(args, 'lam', None) is not None:
        cfg = cfg._replace(search=cfg.search._replace(lam=args.lam))
    if getattr(args, 'out', None):
        cfg = cfg._replace(output=cfg.output._replace(directory=args.out))
    if getattr(args, 'grid', None):
        cfg = cfg._replace(output=cfg.output._replace(heatmap_grid=tuple(int(v) for v in args.grid.split(','))))
    return cfg


def _prepare_output(cfg: RunConfig, command: str, extra: Optional[dict] = None) -> str:
    directory = cfg.output.directory
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, 'config.toml'), 'w') as f:
        toml.dump(cfg.to_dict(), f)
    io.write_manifest(os.path.join(directory, 'manifest.toml'), cfg.hash, {
        'search': cfg.search.seed,
        'sampling': cfg.sampling.seed
    }, command, extra)
    return directory


def _oracle_cost(problem: ControlProblem) -> Optional[float]:
    if problem.param('kind') != 'lqr':
        return None
    return RiccatiOracle(problem).optimal_cost()


def cmd_solve(args) -> int:
    cfg = _resolve_config(args)
    problem = cfg.problem.build()
    basis = cfg.basis.build(problem)
    plan = cfg.sampling.plan()
    partition = Partition.uniform(problem.t0, problem.T, cfg.rollout.segments)
    theta = ControlParameterization.constant(problem, cfg.rollout.knots)
    mu0 = problem.initial_measure
    out = _prepare_output(cfg, 'solve', {'problem': problem.name})

    cert = Certificate.zeros(basis)
    records, searched, dual_reports = [], [], []
    for round_ in range(cfg.dual.alternations):
        theta, _, trace = pruned_search(problem, cert, theta, partition, cfg.search, integrator=cfg.rollout.integrator,
                                        step=cfg.rollout.step)
        records.extend(dict(round=round_, **record._asdict()) for record in trace)
        searched.extend(trace)
        _, pair = segmented_rollout(problem, theta, partition, integrator=cfg.rollout.integrator, step=cfg.rollout.step)
        cert, dual_report = dual_update(basis, pair, problem, plan, init_psi=cert if round_ > 0 else None,
                                        config=cfg.dual)
        dual_reports.append(dual_report)
        logger.info("round %d: J=%.6g, dual objective %.6g (%s)", round_, trace[-1].J, dual_report.objective,
                    dual_report.chosen)

    _, pair = segmented_rollout(problem, theta, partition, integrator=cfg.rollout.integrator, step=cfg.rollout.step)
    gap = evaluate_gap(pair, cert, mu0, problem)
    io.save_knots(os.path.join(out, 'knots.txt'), np.asarray(theta.knots), theta.t0, theta.T)
    io.save_certificate(os.path.join(out, 'certificate.toml'), cert, problem.name)
    io.save_report(os.path.join(out, 'gap.toml'), gap, 'gap')
    io.save_report(os.path.join(out, 'dual.toml'), dual_reports[-1], 'dual')
    summary = summarize_search(searched, cfg.search)
    io.save_report(os.path.join(out, 'search.toml'), summary, 'search')
    if summary.pruning_fallback:
        logger.warning("pruning fell back to an unpruned search: the initial knots were not admissible")
    io.save_pair(os.path.join(out, 'pair'), pair)
    io.write_trace(os.path.join(out, 'trace.jsonl'), records)

    table = Table(title=f"solve: {problem.name}")
    for column in ('J', 'underline J', 'gap', 'residual', 'identity gap'):
        table.add_column(column, justify='right')
    table.add_row(*(f"{v:.6g}" for v in (gap.J, gap.underline_J, gap.gap, gap.residual, gap.identity_gap)))
    Console().print(table)
    oracle = _oracle_cost(problem)
    if oracle is not None:
        logger.info("Riccati optimum %.6g; realized cost is %.2f%% above", oracle, 100 * (gap.J - oracle) / oracle)
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg = _resolve_config(args)
    problem = cfg.problem.build()
    cert, produced_for = io.load_certificate(args.certificate)
    if produced_for and produced_for != problem.name:
        logger.warning("certificate was produced for %s, checking it against %s", produced_for, problem.name)
    mu0 = problem.initial_measure
    report = estimate_feasibility(cert, problem, cfg.sampling.plan())
    lower = certified_lower_bound(cert, mu0, problem.horizon)
    mass = float(mu0.total_mass)
    degradation = problem.horizon * mass * cert.eps + mass * cert.eps_T

    table = Table(title=f"certify: {problem.name}")
    for column in ('', 'running', 'terminal'):
        table.add_column(column, justify='right')
    table.add_row('sampled estimate', f"{report.eps_hat:.3e}", f"{report.eps_T_hat:.3e}")
    table.add_row('declared', f"{cert.eps:.3e}", f"{cert.eps_T:.3e}")
    Console().print(table)
    Console().print(f"lower bound {lower:.9g} (degradation {degradation:.3e} = eps (T - t0) mu0(X) + eps_T mu0(X))")
    oracle = _oracle_cost(problem)
    if oracle is not None:
        Console().print(f"Riccati optimum {oracle:.9g}")
    if report.eps_hat > cert.eps or report.eps_T_hat > cert.eps_T:
        raise ValidationError(f"declared tolerances ({cert.eps:.3e}, {cert.eps_T:.3e}) are below the sampled "
                              f"estimates ({report.eps_hat:.3e}, {report.eps_T_hat:.3e})")
    return EXIT_OK


def heatmap_values(cert: Certificate, block: Optional[int], xs: np.ndarray, ys: np.ndarray, t: float,
                   at: Sequence[float] = ()) -> np.ndarray:
    """v on the (x, y) grid: a two-dimensional block, or the full certificate with the other coordinates fixed."""
    field = cert.block(block) if block is not None else cert
    extra = len(at)
    if field.dim_x != 2 + extra:
        raise ValueError(f"slice dimension mismatch: certificate has dim_x={field.dim_x}, "
                         f"grid fixes {extra} coordinate(s) besides (x, y)")
    gx, gy = np.meshgrid(xs, ys, indexing='ij')
    points = np.concatenate([gx.reshape(-1, 1), gy.reshape(-1, 1), np.tile(np.asarray(at, dtype=float), (gx.size, 1))],
                            axis=1)
    values = field.evaluate(jnp.full(len(points), t), jnp.asarray(points)).value
    return np.asarray(values).reshape(gx.shape)


def _heatmap_axes(problem: ControlProblem, block: Optional[int], counts, extent: Optional[Sequence[float]]):
    if extent is None:
        dims = problem.blocks[block] if block is not None and problem.blocks else (0, 1)
        if len(dims) < 2:
            raise ValueError(f"block {block} has a single coordinate; pass --extent")
        box = problem.state_box
        extent = (box.lo[dims[0]], box.hi[dims[0]], box.lo[dims[1]], box.hi[dims[1]])
    if len(extent) != 4 or len(counts) != 2:
        raise ValueError("grid needs two counts and an extent xmin,xmax,ymin,ymax")
    return np.linspace(extent[0], extent[1], counts[0]), np.linspace(extent[2], extent[3], counts[1])


def _parse_block(text: Optional[str]) -> Optional[int]:
    if text is None or text == 'full':
        return None
    return int(text)


def cmd_export_heatmap(args) -> int:
    cfg = _resolve_config(args)
    problem = cfg.problem.build()
    cert, _ = io.load_certificate(args.certificate)
    block = _parse_block(args.block)
    extent = _float_pair(args.extent) if args.extent else None
    xs, ys = _heatmap_axes(problem, block, cfg.output.heatmap_grid, extent)
    t = problem.t0 if args.time is None else args.time
    values = heatmap_values(cert, block, xs, ys, t, _float_pair(args.at) if args.at else ())
    io.write_heatmap(args.output, xs, ys, values)
    logger.info("wrote %dx%d grid to %s", len(xs), len(ys), args.output)
    return EXIT_OK


def localize_difference(before: np.ndarray, after: np.ndarray, discs: Sequence[Sequence[float]]) -> dict:
    """Location of the largest pointwise change between two heat maps and its distance to each disc."""
    if before.shape != after.shape or not np.allclose(before[:, :2], after[:, :2]):
        raise ValueError("heat maps are on different grids")
    diff = np.abs(after[:, 2] - before[:, 2])
    i = int(np.argmax(diff))
    location = before[i, :2]
    distances = [float(np.hypot(location[0] - cx, location[1] - cy)) for cx, cy, _ in discs]
    return {
        'max_difference': float(diff[i]),
        'location': [float(v) for v in location],
        'distances': distances,
        'radii': [float(r) for _, _, r in discs],
    }


def cmd_warmstart(args) -> int:
    cfg = _resolve_config(args)
    problem = cfg.problem.build()
    cert, _ = io.load_certificate(args.certificate)
    if args.shift > 0 and not problem.time_homogeneous:
        raise ValueError(f"problem {problem.name!r} is not time homogeneous; refusing to shift its certificate")

    delta_l = args.budget_l
    if args.target_config:
        target = load_config(args.target_config).problem.build()
        if delta_l is None:
            delta_l = max(penalty_bound(problem), penalty_bound(target))
            logger.info("running cost budget from the obstacle penalty bound: %.6g", delta_l)
    else:
        target = None
    budget = PerturbationBudget.new(args.budget_f or 0.0, delta_l or 0.0, args.budget_g or 0.0)
    if target is None:
        target = perturb(problem, budget, cfg.sampling.seed)

    plan = cfg.sampling.plan()
    warm = receding_horizon_step(cert, target, args.shift, budget, plan)
    window = warm.problem
    out = _prepare_output(cfg, 'warmstart', {'problem': target.name, 'shift': args.shift, 'budget': list(budget)})
    io.save_certificate(os.path.join(out, 'warm_certificate.toml'), warm.certificate, target.name)

    check = estimate_feasibility(warm.certificate, window, plan)
    passes = check.eps_hat <= warm.certificate.eps and check.eps_T_hat <= warm.certificate.eps_T
    logger.info("warm certificate on the changed problem: eps_hat=%.3e <= %.3e, eps_T_hat=%.3e <= %.3e: %s",
                check.eps_hat, warm.certificate.eps, check.eps_T_hat, warm.certificate.eps_T,
                'pass' if passes else 'FAIL')

    partition = Partition.uniform(window.t0, window.T, cfg.rollout.segments)
    theta = ControlParameterization.constant(window, cfg.rollout.knots)
    _, pair = segmented_rollout(window, theta, partition, integrator=cfg.rollout.integrator, step=cfg.rollout.step)
    warm_cert, warm_report = dual_update(cert.basis, pair, window, plan, warm.certificate.eps, warm.certificate.eps_T,
                                         init_psi=warm.certificate, config=cfg.dual)
    _, cold_report = dual_update(cert.basis, pair, window, plan, warm.certificate.eps, warm.certificate.eps_T,
                                 config=cfg.dual._replace(proximal=0.0), t_shift=warm.certificate.t_shift)
    io.save_certificate(os.path.join(out, 'certificate.toml'), warm_cert, target.name)
    comparison = {
        'warm_start': {
            'feasible_before_update': passes,
            'g_v': warm.g_v,
            'tolerances': warm.breakdown._asdict(),
        },
        'warm': {
            'iterations_to_feasibility': warm_report.iterations_to_feasibility,
            'objective': warm_report.objective
        },
        'cold': {
            'iterations_to_feasibility': cold_report.iterations_to_feasibility,
            'objective': cold_report.objective
        },
    }

    discs_before, discs_after = problem.param('obstacles', ()), target.param('obstacles', ())
    if cert.basis.blocks and problem.blocks and len(problem.blocks[0]) == 2:
        xs, ys = _heatmap_axes(problem, 0, cfg.output.heatmap_grid, None)
        before = heatmap_values(cert, 0, xs, ys, problem.t0)
        after = heatmap_values(warm_cert, 0, xs, ys, window.t0)
        io.write_heatmap(os.path.join(out, 'heatmap_before.csv'), xs, ys, before)
        io.write_heatmap(os.path.join(out, 'heatmap_after.csv'), xs, ys, after)
        if discs_after:
            located = localize_difference(io.read_heatmap(os.path.join(out, 'heatmap_before.csv')),
                                          io.read_heatmap(os.path.join(out, 'heatmap_after.csv')), discs_after)
            located['distances_before'] = [
                float(np.hypot(located['location'][0] - cx, located['location'][1] - cy)) for cx, cy, _ in discs_before
            ]
            comparison['heatmap'] = located
            logger.info("largest value change %.3g at (%.3f, %.3f)", located['max_difference'], *located['location'])

    with open(os.path.join(out, 'comparison.toml'), 'w') as f:
        toml.dump(comparison, f)
    Console().print(f"warm start: iterations to feasibility {warm_report.iterations_to_feasibility} (warm) vs "
                    f"{cold_report.iterations_to_feasibility} (cold)")
    if not passes:
        raise ValidationError("warm-started certificate fails its degraded tolerances on the changed problem")
    return EXIT_OK


def cmd_compare(args) -> int:
    entries, problems = [], set()
    mu0 = horizon = None
    for directory in args.results:
        cfg = load_config(os.path.join(directory, 'config.toml'))
        problem = cfg.problem.build()
        problems.add(problem.name)
        cert, _ = io.load_certificate(os.path.join(directory, 'certificate.toml'))
        pair = io.load_pair(os.path.join(directory, 'pair'))
        label = os.path.basename(os.path.normpath(directory))
        entries.append((label, cert, evaluate_gap(pair, cert, problem.initial_measure, problem)))
        mu0, horizon = problem.initial_measure, problem.horizon
    if len(problems) > 1:
        raise ValueError(f"results belong to different problems: {sorted(problems)}")
    rows = compare(entries, mu0, horizon)
    table = Table(title='certified comparison')
    for column in ('rank', 'label', 'underline P', 'underline J', 'J', 'gap'):
        table.add_column(column, justify='right')
    for row in rows:
        table.add_row(str(row.rank), row.label, *(f"{v:.6g}" for v in (row.underline_P, row.underline_J, row.J, row.gap)))
    Console().print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='jfom', description='Featurized occupation measure workflows.')
    parser.add_argument('-v', '--verbose', action='store_true', help='debug logging and tracebacks')
    parser.add_argument('--quiet', action='store_true', help='warnings and errors only')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, out=True):
        p.add_argument('--config', help='TOML run configuration')
        p.add_argument('--seed', type=int, help='overrides the search and sampling seeds')
        if out:
            p.add_argument('--out', help='output directory')

    solve = sub.add_parser('solve', help='alternate pruned search and dual updates')
    common(solve)
    solve.add_argument('--tau', type=float, help='pruning tolerance (inf disables pruning)')
    solve.add_argument('--lambda', dest='lam', type=float, help='residual penalty weight')
    solve.set_defaults(func=cmd_solve)

    certify = sub.add_parser('certify', help='validate a certificate and print its lower bound')
    common(certify, out=False)
    certify.add_argument('certificate')
    certify.set_defaults(func=cmd_certify)

    warm = sub.add_parser('warmstart', help='shift and degrade a certificate for a changed problem')
    common(warm)
    warm.add_argument('certificate')
    warm.add_argument('--shift', type=float, default=0.0)
    warm.add_argument('--budget-f', type=float)
    warm.add_argument('--budget-l', type=float)
    warm.add_argument('--budget-g', type=float)
    warm.add_argument('--target-config', help='config of the changed problem (default: seeded perturbation)')
    warm.add_argument('--grid', help='heat-map counts NX,NY')
    warm.set_defaults(func=cmd_warmstart)

    heat = sub.add_parser('export-heatmap', help='write v on a 2D grid as CSV')
    common(heat, out=False)
    heat.add_argument('certificate')
    heat.add_argument('output')
    heat.add_argument('--block', help="block index or 'full'", default='full')
    heat.add_argument('--grid', help='counts NX,NY')
    heat.add_argument('--extent', help='xmin,xmax,ymin,ymax')
    heat.add_argument('--time', type=float)
    heat.add_argument('--at', help='values of the remaining coordinates for a full certificate')
    heat.set_defaults(func=cmd_export_heatmap)

    cmp_ = sub.add_parser('compare', help='certified comparison of result directories')
    cmp_.add_argument('results', nargs='+')
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose, args.quiet)
    try:
        return args.func(args)
    except (ValidationError, ProvenanceError, ValueError) as e:
        logger.error("%s", e, exc_info=args.verbose)
        return EXIT_VALIDATION
    except (FomError, RuntimeError, OSError) as e:
        logger.error("%s", e, exc_info=args.verbose)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())

#!/usr/bin/env python

"""
prismcert: certified robustness of LSTM classifiers.
The script reads a network and a dataset and tries to prove, for every selected sample,
that no input in an L-infinity ball around it changes the predicted class.
The products inside each LSTM cell are bounded by pairs of planes chosen by linear programming;
optionally, the planes are refined by dividing their region and optimizing convex weights.

Commands:
    verify: verification report and accuracy summary for one or more epsilon values
    sweep-alpha: mean certified margin of the hybrid relaxation over a grid of alpha values
    sweep-strategy: accuracy and margin comparison of division strategies
    gen-model: seeded random network and matching jsonl dataset
    check: brute-force checks of the geometry, the LP solver and the relaxations

Output files are written with the prefix given by -o.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import sys
import os
import argparse
from pbr.version import VersionInfo
import logging.handlers

import numpy as np
import pandas as pd

from prismcert.model import read_network, write_network, random_network, predict
from prismcert.data import load_dataset, write_jsonl, FORMATS, JSONL
from prismcert.lp import solve, OPTIMAL
from prismcert.relax import RelaxConfig, Box2, relax, prism_volume, METHODS, KINDS, HYBRID, DEFAULT_ALPHA
from prismcert.refine import Schedule, STRATEGIES, NONE
from prismcert.verifier import VerifyConfig, PerturbationSpec, verify_dataset
from prismcert.stats import summarize_report, compare_margins, is_monotone
from prismcert.oracle import regular_poly_prism, poly_prism_volume_exact, poly_prism_volume_formula, \
    coplanar_corner_identities, degenerate_top, surface_proxy_degenerate_check, lp_vertex_enumeration, \
    dense_grid_soundness, random_lp, random_prism_pair
from prismcert.utils import default_cores

logger = logging.getLogger('prismcert')
logger.setLevel(logging.INFO)

# handler to sys.stdout
sh = logging.StreamHandler(sys.stdout)
sh.setLevel(logging.INFO)
formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')
sh.setFormatter(formatter)
logger.addHandler(sh)

COMMANDS = ('verify', 'sweep-alpha', 'sweep-strategy', 'gen-model', 'check')
DEFAULT_ALPHAS = [0.0, 0.25, 0.5, DEFAULT_ALPHA, 0.75, 1.0]


def set_prismcert():
    """This parser gets input settings for running prismcert.
    The first argument is the command; the other settings are flags.
    Networks are JSON model documents as written by gen-model."""
    parser = argparse.ArgumentParser(
        description='Certify robustness of LSTM classifiers against L-infinity perturbations. '
                    'Product nonlinearities are bounded by plane pairs chosen by linear programming.')
    parser.add_argument('command',
                        choices=COMMANDS,
                        help='Task to carry out.')
    parser.add_argument('-m', '--model',
                        dest='model',
                        help='Location of the JSON model document.',
                        default=None, required=False)
    parser.add_argument('-d', '--dataset',
                        dest='dataset',
                        help='Location of the dataset: a jsonl file, or the IDX image file.',
                        default=None, required=False)
    parser.add_argument('-labels', '--labels',
                        dest='labels',
                        help='Location of the IDX label file.',
                        default=None, required=False)
    parser.add_argument('-format', '--dataset_format',
                        dest='fmt',
                        choices=FORMATS,
                        help='Dataset format. Default: jsonl.',
                        default=JSONL, required=False)
    parser.add_argument('-o', '--output',
                        dest='fp',
                        help='Output filename. Specify full file path without extension.',
                        default=None, required=False)
    parser.add_argument('-e', '--epsilon',
                        dest='epsilon',
                        type=float,
                        nargs='+',
                        help='Radii of the L-infinity perturbation. \n'
                             'You can specify multiple values. Default: 0.01.',
                        default=[0.01], required=False)
    parser.add_argument('-clip', '--clip',
                        dest='clip',
                        action='store_true',
                        help='If flagged, perturbed inputs are clipped to [0, 1].',
                        default=False, required=False)
    parser.add_argument('-method', '--method',
                        dest='method',
                        choices=METHODS,
                        help='Objective of the plane relaxation. Default: hybrid.',
                        default=HYBRID, required=False)
    parser.add_argument('-alpha', '--alpha',
                        dest='alpha',
                        type=float,
                        help='Weight of the centroid height in the hybrid objective. Default: 0.674.',
                        default=DEFAULT_ALPHA, required=False)
    parser.add_argument('-alphas', '--alpha_grid',
                        dest='alphas',
                        type=float,
                        nargs='+',
                        help='Alpha values for sweep-alpha.',
                        default=None, required=False)
    parser.add_argument('-step', '--alpha_step',
                        dest='step',
                        type=float,
                        help='If given, sweep-alpha uses the grid 0, step, ..., 1 instead of -alphas.',
                        default=None, required=False)
    parser.add_argument('-s', '--strategy',
                        dest='strategy',
                        choices=STRATEGIES,
                        help='Division strategy for multi-plane refinement. Default: none.',
                        default=NONE, required=False)
    parser.add_argument('-strategies', '--strategy_grid',
                        dest='strategies',
                        choices=STRATEGIES,
                        nargs='+',
                        help='Strategies for sweep-strategy. By default, all strategies.',
                        default=list(STRATEGIES), required=False)
    parser.add_argument('-density', '--sample_density',
                        dest='density',
                        type=int,
                        help='Sample points per axis in the relaxation program, at least 3. Default: 10.',
                        default=10, required=False)
    parser.add_argument('-grid', '--offset_grid',
                        dest='grid',
                        type=int,
                        help='Grid points per axis of the soundness offset, at least 16. Default: 64.',
                        default=64, required=False)
    parser.add_argument('-lr', '--learning_rate',
                        dest='lr',
                        type=float,
                        help='Initial step size of the weight optimization. Default: 0.05.',
                        default=0.05, required=False)
    parser.add_argument('-iters', '--max_iters',
                        dest='iters',
                        type=int,
                        help='Iterations of the weight optimization. Default: 100.',
                        default=100, required=False)
    parser.add_argument('-frames', '--refine_frames',
                        dest='refine_frames',
                        type=int,
                        help='Number of final frames whose planes are refined. Default: 1.',
                        default=1, required=False)
    parser.add_argument('-t', '--timeout',
                        dest='timeout',
                        type=float,
                        help='Seconds per sample. Default: 120.',
                        default=120.0, required=False)
    parser.add_argument('-n', '--num_samples',
                        dest='n',
                        type=int,
                        help='Number of samples to verify. Default: 100.',
                        default=100, required=False)
    parser.add_argument('-seed', '--seed',
                        dest='seed',
                        type=int,
                        help='Seed for sample selection, generated models and checks. Default: 0.',
                        default=0, required=False)
    parser.add_argument('-shape', '--model_shape',
                        dest='shape',
                        type=int,
                        nargs=5,
                        metavar=('FRAMES', 'INPUT', 'HIDDEN', 'LAYERS', 'CLASSES'),
                        help='Shape of the network made by gen-model. Default: 4 4 4 1 3.',
                        default=[4, 4, 4, 1, 3], required=False)
    parser.add_argument('-size', '--dataset_size',
                        dest='size',
                        type=int,
                        help='Number of samples in the dataset made by gen-model. Default: 20.',
                        default=20, required=False)
    parser.add_argument('-cases', '--check_cases',
                        dest='cases',
                        type=int,
                        help='Seeded cases per check. Default: 100.',
                        default=100, required=False)
    parser.add_argument('-core', '-processor_cores',
                        dest='core',
                        type=int,
                        required=False,
                        help='Number of processing cores to use. \n '
                             'By default, PRISMCERT_CORES or CPU count - 1. ',
                        default=None)
    parser.add_argument('-version', '--version',
                        dest='version',
                        required=False,
                        help='Version number.',
                        action='store_true',
                        default=False)
    return parser


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    if '-version' in argv or '--version' in argv:
        info = VersionInfo('prismcert')
        logger.info('Version ' + info.version_string())
        return 0
    args = vars(set_prismcert().parse_args(argv))
    if not args['fp']:
        logger.info('No file path given, writing to current directory.')
        args['fp'] = os.path.join(os.getcwd(), 'prismcert')
    args['core'] = default_cores(args['core'])
    tasks = {'verify': run_verify, 'sweep-alpha': run_alpha_sweep, 'sweep-strategy': run_strategy_sweep,
             'gen-model': run_gen_model, 'check': run_check}
    code = tasks[args['command']](args)
    if code == 0:
        logger.info('prismcert completed ' + args['command'] + '.')
    return code


def run_verify(args):
    """
    Verifies the dataset at every epsilon and writes the report and the accuracy summary.

    :param args: Settings for running prismcert
    :return: Exit code
    """
    setup = _setup(args)
    if setup is None:
        return 1
    net, dataset, cfg, specs = setup
    try:
        report = pd.concat([verify_dataset(net, dataset.sequences, dataset.labels, spec, cfg,
                                           num_samples=args['n'], seed=args['seed'], core=args['core'])
                            for spec in specs], ignore_index=True)
        report.to_csv(args['fp'] + '_report.csv', index=False)
        logger.info('Verification report exported to: ' + args['fp'] + '_report.csv')
        summary = summarize_report(report)
        summary.to_csv(args['fp'] + '_summary.csv', index=False)
        for _, row in summary.iterrows():
            logger.info('epsilon ' + str(row['epsilon']) + ': ' + str(row['robust']) + ' / ' +
                        str(row['samples']) + ' certified (accuracy ' + str(round(row['accuracy'], 4)) + ').')
        is_monotone(summary)
    except Exception:
        logger.error('Could not complete the verification run!', exc_info=True)
        return 1
    return 0


def run_alpha_sweep(args):
    """
    Computes the mean certified margin of the hybrid relaxation for every alpha in the grid
    and reports the alpha with the largest mean margin per epsilon.

    :param args: Settings for running prismcert
    :return: Exit code
    """
    setup = _setup(args)
    if setup is None:
        return 1
    net, dataset, cfg, specs = setup
    if args['step']:
        alphas = list(np.round(np.arange(0, 1 + args['step'] / 2, args['step']), 10))
    else:
        alphas = args['alphas'] or DEFAULT_ALPHAS
    try:
        rows = list()
        for alpha in alphas:
            point = VerifyConfig(relax=cfg.relax.replace(method=HYBRID, alpha=float(alpha)), strategy=cfg.strategy,
                                 schedule=cfg.schedule, timeout=cfg.timeout, refine_frames=cfg.refine_frames)
            for spec in specs:
                report = verify_dataset(net, dataset.sequences, dataset.labels, spec, point,
                                        num_samples=args['n'], seed=args['seed'], core=args['core'])
                summary = summarize_report(report)
                rows.append({'alpha': float(alpha), 'epsilon': spec.epsilon,
                             'mean_margin': float(report['min_margin'].mean()),
                             'robust': int(summary['robust'].sum()),
                             'accuracy': float(summary['accuracy'].iloc[0])})
                logger.info('alpha ' + str(alpha) + ', epsilon ' + str(spec.epsilon) + ': mean margin ' +
                            str(rows[-1]['mean_margin']) + '.')
        curve = pd.DataFrame(rows, columns=['alpha', 'epsilon', 'mean_margin', 'robust', 'accuracy'])
        curve['best'] = False
        for epsilon, group in curve.groupby('epsilon'):
            if group['mean_margin'].notna().any():
                best = group['mean_margin'].idxmax()
                curve.loc[best, 'best'] = True
                logger.info('Best alpha at epsilon ' + str(epsilon) + ': ' + str(curve.loc[best, 'alpha']) + '.')
        curve.to_csv(args['fp'] + '_alpha_sweep.csv', index=False)
        logger.info('Alpha sweep exported to: ' + args['fp'] + '_alpha_sweep.csv')
    except Exception:
        logger.error('Could not complete the alpha sweep!', exc_info=True)
        return 1
    return 0


def run_strategy_sweep(args):
    """
    Verifies the dataset with every division strategy
    and compares the margins of each strategy against the undivided relaxation.

    :param args: Settings for running prismcert
    :return: Exit code
    """
    setup = _setup(args)
    if setup is None:
        return 1
    net, dataset, cfg, specs = setup
    strategies = list(args['strategies'])
    if NONE not in strategies:
        strategies.insert(0, NONE)
    try:
        reports = dict()
        for strategy in strategies:
            point = VerifyConfig(relax=cfg.relax, strategy=strategy, schedule=cfg.schedule, timeout=cfg.timeout,
                                 refine_frames=cfg.refine_frames)
            reports[strategy] = pd.concat([verify_dataset(net, dataset.sequences, dataset.labels, spec, point,
                                                          num_samples=args['n'], seed=args['seed'],
                                                          core=args['core'])
                                           for spec in specs], ignore_index=True)
        summary = summarize_report(pd.concat(list(reports.values()), ignore_index=True))
        summary.to_csv(args['fp'] + '_strategy_sweep.csv', index=False)
        comparisons = list()
        for strategy in strategies:
            if strategy == NONE:
                continue
            comparison = compare_margins(reports[strategy], reports[NONE])
            comparison.insert(0, 'strategy', strategy)
            comparisons.append(comparison)
        if comparisons:
            pd.concat(comparisons, ignore_index=True).to_csv(args['fp'] + '_comparison.csv', index=False)
        logger.info('Strategy sweep exported to: ' + args['fp'] + '_strategy_sweep.csv')
    except Exception:
        logger.error('Could not complete the strategy sweep!', exc_info=True)
        return 1
    return 0


def run_gen_model(args):
    """
    Writes a seeded random network and a jsonl dataset labelled by that network.

    :param args: Settings for running prismcert
    :return: Exit code
    """
    frames, width, hidden, layers, classes = args['shape']
    try:
        net = random_network(frames, width, hidden, layers, classes, seed=args['seed'])
        write_network(net, args['fp'] + '_model.json')
        if args['size'] > 0:
            rng = np.random.default_rng(args['seed'])
            sequences = rng.uniform(0, 1, (args['size'], frames, width))
            write_jsonl(args['fp'] + '_data.jsonl', sequences, predict(net, sequences))
    except Exception:
        logger.error('Could not generate the model!', exc_info=True)
        return 1
    return 0


def run_check(args):
    """
    Runs the brute-force checks with seeded cases and writes one row per check.

    :param args: Settings for running prismcert
    :return: Exit code, 1 if any check failed
    """
    rng = np.random.default_rng(args['seed'])
    cases = args['cases']
    rows = list()
    try:
        failures = 0
        for _ in range(cases):
            prism = regular_poly_prism(int(rng.integers(3, 9)), rng)
            exact = poly_prism_volume_exact(prism)
            failures += abs(exact - poly_prism_volume_formula(prism)) > 1e-9 * abs(exact)
        rows.append(('prism_formula', cases, int(failures)))
        failures = 0
        for _ in range(cases):
            box = _random_box(rng)
            pair, prism = random_prism_pair(box, rng)
            exact = poly_prism_volume_exact(prism)
            failures += abs(prism_volume(pair, box) - exact) > 1e-9 * abs(exact)
        rows.append(('prism_volume', cases, int(failures)))
        failures = 0
        for _ in range(cases):
            box = _random_box(rng)
            failures += not coplanar_corner_identities(tuple(rng.normal(0, 3, 3)), box).ok
        rows.append(('corner_identities', cases, int(failures)))
        failures = 0
        for _ in range(cases):
            plane, box = degenerate_top(*rng.uniform(0.1, 3, 4))
            failures += not surface_proxy_degenerate_check(plane, box).ok
        rows.append(('degenerate_top', cases, int(failures)))
        failures = 0
        for _ in range(cases):
            problem = random_lp(rng, int(rng.integers(2, 4)), int(rng.integers(1, 6)))
            ours, oracle = solve(problem), lp_vertex_enumeration(problem)
            failures += ours.status != oracle.status or \
                (ours.status == OPTIMAL and abs(ours.objective_value - oracle.objective_value) >
                 1e-7 * max(1.0, abs(oracle.objective_value)))
        rows.append(('lp_oracle', cases, int(failures)))
        boxes = [_random_box(rng) for _ in range(max(1, cases // 10))]
        for method in METHODS:
            cfg = RelaxConfig(method=method, sample_density=args['density'], offset_grid=args['grid'])
            for kind in KINDS:
                pairs = [relax(box, kind, cfg) for box in boxes]
                failures = sum(dense_grid_soundness(pair, box, kind, tol=1e-12) > 0
                               for pair, box in zip(pairs, boxes))
                rows.append(('soundness_' + method + '_' + kind, len(boxes), int(failures)))
                failures = sum(not (coplanar_corner_identities(pair.lower_plane, box, tol=1e-9).ok and
                                    coplanar_corner_identities(pair.upper_plane, box, tol=1e-9).ok)
                               for pair, box in zip(pairs, boxes))
                rows.append(('identities_' + method + '_' + kind, len(boxes), int(failures)))
    except Exception:
        logger.error('Could not complete the checks!', exc_info=True)
        return 1
    checks = pd.DataFrame(rows, columns=['check', 'cases', 'failures'])
    checks.to_csv(args['fp'] + '_check.csv', index=False)
    logger.info('Checks exported to: ' + args['fp'] + '_check.csv')
    if checks['failures'].sum() > 0:
        logger.error('Failed checks: ' + ', '.join(checks[checks['failures'] > 0]['check']))
        return 1
    return 0


def _setup(args):
    """
    Reads the network and dataset and validates the settings.
    Returns None after logging the error if anything is invalid, so no report is written.
    """
    try:
        if not args['model'] or not args['dataset']:
            raise ValueError('Both a model (-m) and a dataset (-d) are required.')
        net = read_network(args['model'])
        dataset = load_dataset(args['dataset'], args['fmt'], num_frames=net.num_frames, labels_path=args['labels'])
        if tuple(dataset.frame_shape) != (net.num_frames, net.input_dim):
            raise ValueError('Dataset frames have shape ' + str(dataset.frame_shape) + ' but the network reads (' +
                             str(net.num_frames) + ', ' + str(net.input_dim) + ').')
        relax_cfg = RelaxConfig(method=args['method'], alpha=args['alpha'], sample_density=args['density'],
                                offset_grid=args['grid'])
        cfg = VerifyConfig(relax=relax_cfg, strategy=args['strategy'],
                           schedule=Schedule(learning_rate=args['lr'], max_iters=args['iters']),
                           timeout=args['timeout'], refine_frames=args['refine_frames'])
        clip = (0.0, 1.0) if args['clip'] else None
        specs = [PerturbationSpec(e, clip) for e in args['epsilon']]
    except (OSError, ValueError):
        logger.error('Could not set up the run!', exc_info=True)
        return None
    return net, dataset, cfg, specs


def _random_box(rng):
    cx, cy = rng.normal(0, 2, 2)
    hx, hy = rng.uniform(1e-3, 4, 2)
    return Box2(cx - hx, cx + hx, cy - hy, cy + hy)


if __name__ == '__main__':
    sys.exit(main())

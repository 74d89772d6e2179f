"""
The verifier module answers robustness queries for single samples and whole datasets.

A sample is robust when, for every other label p, the lower bound of
logit_t - logit_p over the perturbation ball is nonnegative.
Bounds come from the abstract domain with single-plane relaxations.
When a division strategy is configured, labels that fail are retried with
multi-plane relaxations whose weights are optimized per label.
The method is sound but incomplete: verdicts are Robust, Unknown, Timeout or Misclassified.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import logging.handlers
import multiprocessing as mp
import time
from collections import namedtuple

import numpy as np
import pandas as pd

from prismcert.model import predict, ModelError
from prismcert.domain import input_state, initial_carry, abstract_frames, backsubstitute, LinExpr, \
    DomainError, PRODUCTS
from prismcert.relax import RelaxConfig, PlanePair, relax
from prismcert.refine import Schedule, LambdaWeights, CandidateCache, optimize_lambda, combine, \
    candidate_count, check_strategy, NONE, LOWER, UPPER
from prismcert.utils import _verify_parallel

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ROBUST = 'Robust'
UNKNOWN = 'Unknown'
TIMEOUT = 'Timeout'
MISCLASSIFIED = 'Misclassified'

REPORT_COLUMNS = ['sample_index', 'true_label', 'verdict', 'min_margin', 'worst_label', 'elapsed_s',
                  'method', 'alpha', 'strategy', 'epsilon']

VerificationResult = namedtuple('VerificationResult', ['verdict', 'margins', 'elapsed', 'config_echo',
                                                       'sample_index', 'true_label'])


class PerturbationSpec(object):
    """
    L-infinity ball of radius epsilon, optionally intersected with a data range.
    """

    def __init__(self, epsilon, clip_range=None):
        if not np.isfinite(epsilon) or epsilon < 0:
            raise DomainError('epsilon must be a nonnegative number, got ' + str(epsilon) + '.')
        if clip_range is not None:
            clip_range = (float(clip_range[0]), float(clip_range[1]))
            if clip_range[0] > clip_range[1]:
                raise DomainError('Clip range ' + str(clip_range) + ' is not ordered.')
        self.epsilon = float(epsilon)
        self.clip_range = clip_range


class VerifyConfig(object):
    """
    Settings of a verification run.

    :param relax: RelaxConfig of the plane relaxations
    :param strategy: Division strategy; none disables multi-plane refinement
    :param schedule: Schedule of the weight optimization
    :param timeout: Seconds per sample
    :param refine_frames: Number of final frames whose products get optimized weights; None for all
    :param refine_all_labels: If true, labels that already verify are refined as well
    """

    def __init__(self, relax=None, strategy=NONE, schedule=None, timeout=120.0, refine_frames=1,
                 refine_all_labels=False):
        check_strategy(strategy)
        if timeout <= 0:
            raise ValueError('Timeout must be positive, got ' + str(timeout) + '.')
        if refine_frames is not None and int(refine_frames) < 1:
            raise ValueError('refine_frames must be positive or None.')
        self.relax = relax or RelaxConfig()
        self.strategy = strategy
        self.schedule = schedule or Schedule()
        self.timeout = float(timeout)
        self.refine_frames = None if refine_frames is None else int(refine_frames)
        self.refine_all_labels = bool(refine_all_labels)

    def config_echo(self):
        echo = {'method': self.relax.method, 'alpha': self.relax.alpha, 'strategy': self.strategy,
                'sample_density': self.relax.sample_density, 'offset_grid': self.relax.offset_grid,
                'timeout': self.timeout, 'refine_frames': self.refine_frames}
        echo.update(self.schedule.as_dict())
        return echo


class _Deadline(Exception):
    """Raised inside the abstract pipeline once the sample's time is up."""


def margins(net, state, h_gen, true_label):
    """
    Lower bounds of logit_t - logit_p for all labels p != t,
    as expressions over the final hidden generation of the last layer.

    :param net: LstmNetwork
    :param state: AbstractState
    :param h_gen: Generation of the final hidden state
    :param true_label: Class t
    :return: Dictionary label -> lower bound
    """
    others = [p for p in range(net.num_classes) if p != true_label]
    if not others:
        return dict()
    coeffs = net.W_out[true_label] - net.W_out[others]
    const = net.b_out[true_label] - net.b_out[others]
    lo, _ = backsubstitute(state, LinExpr.over(h_gen, coeffs, const))
    return {p: float(v) for p, v in zip(others, lo)}


def margin(net, sample, true_label, p, spec, cfg, planes_source=None):
    """
    Certified lower bound of logit_t - logit_p over the perturbation ball.

    :param net: LstmNetwork
    :param sample: Sequence of shape (num_frames, input_dim)
    :param true_label: Class t
    :param p: Adversarial class
    :param spec: PerturbationSpec
    :param cfg: RelaxConfig
    :param planes_source: Optional plane callback, see domain.lstm_abstract_step
    :return: Lower bound
    """
    if p == true_label:
        raise ValueError('The adversarial label must differ from the true label.')
    _check_label(net, p)
    state, h_gen = _propagate(net, sample, spec, cfg, planes_source)
    return margins(net, state, h_gen, true_label)[p]


def verify_sample(net, sample, true_label, spec, cfg=None, sample_index=-1):
    """
    Verifies one sample.
    Misclassified samples are skipped. The single-plane bounds decide first;
    with a division strategy, failing labels are refined one by one
    starting from the single-plane weights.

    :param net: LstmNetwork
    :param sample: Sequence of shape (num_frames, input_dim)
    :param true_label: Class t
    :param spec: PerturbationSpec
    :param cfg: VerifyConfig
    :param sample_index: Index written to the result
    :return: VerificationResult
    """
    cfg = cfg or VerifyConfig()
    _check_label(net, true_label)
    start = time.monotonic()
    deadline = start + cfg.timeout
    echo = cfg.config_echo()
    sample = np.asarray(sample, dtype=float)
    if predict(net, sample) != true_label:
        return VerificationResult(MISCLASSIFIED, dict(), time.monotonic() - start, echo, sample_index, true_label)
    found = dict()
    try:
        state = input_state(sample, spec.epsilon, spec.clip_range)
        carry = initial_carry(state, net)
        split = net.num_frames if cfg.strategy == NONE else _first_refined_frame(net, cfg)
        single = _timed_relax(cfg.relax, deadline)
        carry = abstract_frames(net, state, carry, range(split), cfg.relax, single)
        suffix = state.fork()
        final = abstract_frames(net, suffix, carry, range(split, net.num_frames), cfg.relax, single)
        found = margins(net, suffix, final[-1][0], true_label)
        if cfg.strategy != NONE:
            found = _refine_labels(net, state, carry, split, true_label, found, cfg, deadline)
    except _Deadline:
        logger.warning('Sample ' + str(sample_index) + ' exceeded the timeout of ' + str(cfg.timeout) + ' s.')
        return VerificationResult(TIMEOUT, found, time.monotonic() - start, echo, sample_index, true_label)
    if all(v >= 0 for v in found.values()):
        verdict = ROBUST
    elif time.monotonic() >= deadline:
        verdict = TIMEOUT
    else:
        verdict = UNKNOWN
    return VerificationResult(verdict, found, time.monotonic() - start, echo, sample_index, true_label)


def verify_dataset(net, sequences, labels, spec, cfg=None, num_samples=100, seed=0, core=1):
    """
    Verifies the first num_samples samples of a seeded shuffle of the dataset.
    Misclassified samples stay in the report and count as failures.

    :param net: LstmNetwork
    :param sequences: Array of shape (n, num_frames, input_dim)
    :param labels: Array of n labels
    :param spec: PerturbationSpec
    :param cfg: VerifyConfig
    :param num_samples: Number of samples to verify
    :param seed: Seed of the shuffle
    :param core: Number of worker processes
    :return: pandas DataFrame with one row per sample, sorted by sample index
    """
    cfg = cfg or VerifyConfig()
    sequences = np.asarray(sequences, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if len(sequences) == 0:
        raise ModelError('The dataset contains no samples.')
    if len(sequences) != len(labels):
        raise ModelError('Got ' + str(len(sequences)) + ' sequences but ' + str(len(labels)) + ' labels.')
    order = np.random.default_rng(seed).permutation(len(sequences))[:num_samples]
    jobs = [{'net': net, 'sample': sequences[i], 'label': int(labels[i]), 'spec': spec, 'cfg': cfg,
             'index': int(i)} for i in order]
    if core > 1 and len(jobs) > 1:
        with mp.Pool(core) as pool:
            results = pool.map(_verify_parallel, jobs)
    else:
        results = [_verify_parallel(job) for job in jobs]
    report = pd.DataFrame([_report_row(result, cfg, spec) for result in results], columns=REPORT_COLUMNS)
    report = report.sort_values('sample_index').reset_index(drop=True)
    robust = int(np.sum(report['verdict'] == ROBUST))
    logger.info('Verified ' + str(robust) + ' of ' + str(len(report)) + ' samples at epsilon ' +
                str(spec.epsilon) + ' (' + cfg.relax.method + ', ' + cfg.strategy + ').')
    return report


def label_objective(net, sample, true_label, p, spec, cfg=None):
    """
    The margin of label p as a function of the plane weights of the refined frames,
    as optimized by verify_sample.

    :param net: LstmNetwork
    :param sample: Sequence of shape (num_frames, input_dim)
    :param true_label: Class t
    :param p: Adversarial class
    :param spec: PerturbationSpec
    :param cfg: VerifyConfig with a division strategy
    :return: Objective LambdaWeights -> margin, and the single-plane weights
    """
    cfg = cfg or VerifyConfig()
    if cfg.strategy == NONE:
        raise ValueError('A division strategy is needed to refine the margin.')
    if p == true_label:
        raise ValueError('The adversarial label must differ from the true label.')
    _check_label(net, true_label)
    _check_label(net, p)
    deadline = time.monotonic() + cfg.timeout
    state = input_state(np.asarray(sample, dtype=float), spec.epsilon, spec.clip_range)
    carry = initial_carry(state, net)
    split = _first_refined_frame(net, cfg)
    carry = abstract_frames(net, state, carry, range(split), cfg.relax, _timed_relax(cfg.relax, deadline))
    position, init = _weight_layout(net, split, cfg)
    cache = CandidateCache(cfg.strategy, cfg.relax)
    return _label_objective(net, state, carry, split, true_label, p, position, cache, cfg, deadline), init


def _refine_labels(net, state, carry, split, true_label, found, cfg, deadline):
    """
    Optimizes the plane weights of the refined frames separately for every failing label.
    """
    position, init = _weight_layout(net, split, cfg)
    cache = CandidateCache(cfg.strategy, cfg.relax)
    refined = dict(found)
    for p, value in found.items():
        if value >= 0 and not cfg.refine_all_labels:
            continue
        objective = _label_objective(net, state, carry, split, true_label, p, position, cache, cfg, deadline)
        _, best = optimize_lambda(objective, init, cfg.schedule, deadline=deadline)
        refined[p] = max(value, best)
        logger.debug('Label ' + str(p) + ': margin ' + str(value) + ' refined to ' + str(refined[p]) + '.')
    return refined


def _weight_layout(net, split, cfg):
    keys = [(t, k, product, unit) for t in range(split, net.num_frames)
            for k, layer in enumerate(net.layers) for product in PRODUCTS for unit in range(layer.hidden_dim)]
    position = {key: 2 * i for i, key in enumerate(keys)}
    size = candidate_count(cfg.strategy)
    return position, LambdaWeights.initial([size] * (2 * len(keys)))


def _label_objective(net, state, carry, split, true_label, p, position, cache, cfg, deadline):
    def objective(weights):
        fork = state.fork()

        def source(key, box, kind):
            _check_deadline(deadline)
            candidates = cache.get(key, box, kind)
            i = position[key]
            return PlanePair.from_planes(combine(candidates, weights.block(i), LOWER),
                                         combine(candidates, weights.block(i + 1), UPPER))

        final = abstract_frames(net, fork, carry, range(split, net.num_frames), cfg.relax, source)
        return margins(net, fork, final[-1][0], true_label)[p]
    return objective


def _propagate(net, sample, spec, cfg, planes_source):
    state = input_state(np.asarray(sample, dtype=float), spec.epsilon, spec.clip_range)
    carry = initial_carry(state, net)
    carry = abstract_frames(net, state, carry, range(net.num_frames), cfg, planes_source)
    return state, carry[-1][0]


def _first_refined_frame(net, cfg):
    if cfg.refine_frames is None:
        return 0
    return max(0, net.num_frames - cfg.refine_frames)


def _timed_relax(cfg, deadline):
    def source(key, box, kind):
        _check_deadline(deadline)
        return relax(box, kind, cfg)
    return source


def _check_deadline(deadline):
    if time.monotonic() >= deadline:
        raise _Deadline()


def _check_label(net, label):
    if not 0 <= int(label) < net.num_classes:
        raise ModelError('Label ' + str(label) + ' is outside the ' + str(net.num_classes) + ' classes.')


def _report_row(result, cfg, spec):
    if result.margins:
        worst = min(result.margins, key=lambda p: (result.margins[p], p))
        min_margin = result.margins[worst]
    else:
        worst, min_margin = -1, np.nan
    return {'sample_index': result.sample_index, 'true_label': result.true_label, 'verdict': result.verdict,
            'min_margin': min_margin, 'worst_label': worst, 'elapsed_s': result.elapsed,
            'method': cfg.relax.method, 'alpha': cfg.relax.alpha, 'strategy': cfg.strategy,
            'epsilon': spec.epsilon}

"""
The refine module contains the multi-plane refinement of the product relaxations.

The box of a product neuron is divided into sub-regions by a fixed strategy.
Each sub-region yields its own plane pair, which is then shifted until it is sound
over the whole box. A neuron's final lower (upper) plane is a convex combination
of the undivided plane and the sub-region planes; the weights are chosen by
projected gradient ascent on the robustness margin.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import logging.handlers
import time
from collections import namedtuple

import numpy as np

from prismcert.relax import Box2, Region2, relax, relax_distance, relax_volume, relax_hybrid, \
    soundness_offset, DISTANCE, VOLUME

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

NONE = 'none'
TRI_UP_2 = '2-tri-up'
TRI_DOWN_2 = '2-tri-down'
TRI_4 = '4-tri'
REC_VEC_2 = '2-rec-vec'
REC_HOR_2 = '2-rec-hor'
REC_4 = '4-rec'
REC_9 = '9-rec'
REC_16 = '16-rec'
STRATEGIES = (NONE, TRI_UP_2, TRI_DOWN_2, TRI_4, REC_VEC_2, REC_HOR_2, REC_4, REC_9, REC_16)

_PIECES = {NONE: 0, TRI_UP_2: 2, TRI_DOWN_2: 2, TRI_4: 4, REC_VEC_2: 2, REC_HOR_2: 2,
           REC_4: 4, REC_9: 9, REC_16: 16}
_GRIDS = {REC_4: 2, REC_9: 3, REC_16: 4}

SIMPLEX_TOL = 1e-9
MAX_STEP_SCALE = 16.0

CandidateSet = namedtuple('CandidateSet', ['box', 'regions', 'lower_planes', 'upper_planes'])
CandidateSet.__doc__ = """
Candidate planes of one neuron. Entry 0 is the plane pair of the undivided box;
every candidate is sound over the whole box.
"""

LOWER = 'lower'
UPPER = 'upper'


class RefineError(ValueError):
    """Raised for unknown strategies, weights off the simplex and invalid schedules."""


class Schedule(object):
    """
    Step sizes and stopping rules of the projected gradient ascent.
    The step size is learning_rate * decay ** (iteration // decay_every),
    scaled by backtrack after every rejected trial and by growth after every accepted one.
    """

    def __init__(self, learning_rate=0.05, decay=0.7, decay_every=20, max_iters=100, patience=15, fd_step=1e-4,
                 backtrack=0.5, growth=1.25):
        if learning_rate <= 0 or not 0 < decay <= 1:
            raise RefineError('Learning rate must be positive and decay must lie in (0, 1].')
        if int(decay_every) < 1 or int(max_iters) < 0 or int(patience) < 1:
            raise RefineError('decay_every and patience must be positive, max_iters nonnegative.')
        if fd_step <= 0:
            raise RefineError('Finite-difference step must be positive.')
        if not 0 < backtrack < 1 or growth < 1:
            raise RefineError('backtrack must lie in (0, 1) and growth must be at least 1.')
        self.learning_rate = float(learning_rate)
        self.decay = float(decay)
        self.decay_every = int(decay_every)
        self.max_iters = int(max_iters)
        self.patience = int(patience)
        self.fd_step = float(fd_step)
        self.backtrack = float(backtrack)
        self.growth = float(growth)

    def step_size(self, iteration):
        return self.learning_rate * self.decay ** (iteration // self.decay_every)

    def as_dict(self):
        return {'learning_rate': self.learning_rate, 'decay': self.decay, 'decay_every': self.decay_every,
                'max_iters': self.max_iters, 'patience': self.patience, 'fd_step': self.fd_step,
                'backtrack': self.backtrack, 'growth': self.growth}


class LambdaWeights(object):
    """
    Concatenated weight vectors, one simplex block per relaxed neuron and side.
    """

    def __init__(self, values, sizes):
        self.values = np.array(values, dtype=float)
        self.sizes = [int(x) for x in sizes]
        if sum(self.sizes) != len(self.values):
            raise RefineError('Block sizes add up to ' + str(sum(self.sizes)) + ' but there are ' +
                              str(len(self.values)) + ' weights.')
        starts = np.concatenate([[0], np.cumsum(self.sizes)]).astype(int)
        self.blocks = [slice(a, b) for a, b in zip(starts[:-1], starts[1:])]
        self._owner = np.repeat(np.arange(len(self.sizes)), self.sizes)

    @classmethod
    def initial(cls, sizes):
        """
        Puts all weight of every block on its first candidate.
        """
        values = np.zeros(sum(sizes))
        values[np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)] = 1.0
        return cls(values, sizes)

    def __len__(self):
        return len(self.values)

    def block(self, k):
        return self.values[self.blocks[k]]

    def replace(self, values):
        return LambdaWeights(values, self.sizes)

    def project(self, values=None):
        """
        Projects every block onto its simplex.
        """
        values = self.values if values is None else np.array(values, dtype=float)
        projected = np.empty_like(values)
        for block in self.blocks:
            projected[block] = project_simplex(values[block])
        return self.replace(projected)

    def nudge(self, i, delta):
        """
        Moves coordinate i by delta and projects only its block.
        """
        values = self.values.copy()
        block = self.blocks[self._owner[i]]
        values[i] += delta
        values[block] = project_simplex(values[block])
        return self.replace(values)


def project_simplex(v):
    """
    Euclidean projection onto the probability simplex by sorting.

    :param v: Vector
    :return: Vector with nonnegative entries summing to 1
    """
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    cumulative = np.cumsum(u)
    ranks = np.arange(1, len(v) + 1)
    rho = ranks[u - (cumulative - 1) / ranks > 0][-1]
    theta = (cumulative[rho - 1] - 1) / rho
    return np.maximum(v - theta, 0.0)


def check_strategy(strategy):
    if strategy not in STRATEGIES:
        raise RefineError('Unknown division strategy ' + str(strategy) + '. Choose from ' +
                          ', '.join(STRATEGIES) + '.')


def candidate_count(strategy):
    """
    Number of candidates per neuron: the undivided box plus one per sub-region.
    """
    check_strategy(strategy)
    return 1 + _PIECES[strategy]


def divide(box, strategy):
    """
    Partitions a box into sub-regions.
    Diagonal splits: 2-tri-up cuts from (l_x, l_y) to (u_x, u_y),
    2-tri-down from (l_x, u_y) to (u_x, l_y).
    2-rec-vec cuts along the vertical midline x = center, 2-rec-hor along y = center.
    Grids are listed row by row starting at (l_x, l_y).

    :param box: Box2
    :param strategy: Strategy name
    :return: List of Region2
    """
    check_strategy(strategy)
    if strategy == NONE:
        return [Region2.rectangle(box)]
    if box.area <= 0 or any(box.flat_axes()):
        logger.warning('Cannot divide the degenerate box ' + str(tuple(box)) + '; keeping it whole.')
        return [Region2.rectangle(box)]
    p1, p2, p3, p4 = [tuple(x) for x in box.corners]
    mx, my = box.center
    if strategy == TRI_UP_2:
        return [Region2.triangle(p1, p2, p4), Region2.triangle(p1, p4, p3)]
    if strategy == TRI_DOWN_2:
        return [Region2.triangle(p1, p2, p3), Region2.triangle(p2, p4, p3)]
    if strategy == TRI_4:
        center = (mx, my)
        return [Region2.triangle(p1, p2, center), Region2.triangle(p2, p4, center),
                Region2.triangle(p4, p3, center), Region2.triangle(p3, p1, center)]
    if strategy == REC_VEC_2:
        return [Region2.rectangle(Box2(box.l_x, mx, box.l_y, box.u_y)),
                Region2.rectangle(Box2(mx, box.u_x, box.l_y, box.u_y))]
    if strategy == REC_HOR_2:
        return [Region2.rectangle(Box2(box.l_x, box.u_x, box.l_y, my)),
                Region2.rectangle(Box2(box.l_x, box.u_x, my, box.u_y))]
    n = _GRIDS[strategy]
    xs = np.linspace(box.l_x, box.u_x, n + 1)
    ys = np.linspace(box.l_y, box.u_y, n + 1)
    return [Region2.rectangle(Box2(xs[i], xs[i + 1], ys[j], ys[j + 1])) for j in range(n) for i in range(n)]


def candidate_planes(box, kind, strategy, cfg):
    """
    Computes the candidate plane pairs of a neuron.
    Candidate 0 is exactly the single-plane relaxation of the box.
    Sub-region candidates are fitted on their sub-region and offset over the whole box.
    Boxes that cannot be divided repeat candidate 0, so every set has candidate_count(strategy) entries.

    :param box: Box2
    :param kind: sigtanh or sigmul
    :param strategy: Strategy name
    :param cfg: RelaxConfig
    :return: CandidateSet
    """
    count = candidate_count(strategy)
    whole = Region2.rectangle(box)
    base = relax(box, kind, cfg)
    if count == 1 or box.area <= 0 or any(box.flat_axes()):
        regions = [whole] * count
        pairs = [base] * count
    else:
        regions = [whole] + divide(box, strategy)
        pairs = [base] + [soundness_offset(_fit(region, kind, cfg), whole, kind, cfg) for region in regions[1:]]
    return CandidateSet(box, regions, [p.lower_plane for p in pairs], [p.upper_plane for p in pairs])


def combine(candidates, weights, side):
    """
    Convex combination of the candidate planes of one side.

    :param candidates: CandidateSet
    :param weights: Vector on the simplex with one weight per candidate
    :param side: lower or upper
    :return: Plane coefficients (A, B, C)
    """
    if side not in (LOWER, UPPER):
        raise RefineError('Side must be lower or upper, got ' + str(side) + '.')
    weights = np.asarray(weights, dtype=float)
    planes = candidates.lower_planes if side == LOWER else candidates.upper_planes
    if len(weights) != len(planes):
        raise RefineError('Got ' + str(len(weights)) + ' weights for ' + str(len(planes)) + ' candidates.')
    if np.min(weights) < -SIMPLEX_TOL or abs(np.sum(weights) - 1) > SIMPLEX_TOL:
        raise RefineError('Weights are not on the probability simplex: ' + str(weights.tolist()) + '.')
    return tuple(float(x) for x in np.dot(np.maximum(weights, 0.0), np.array(planes)))


class CandidateCache(object):
    """
    Candidate sets per neuron key and box.
    A set is only reused for the exact box it was computed for,
    so an objective built on the cache depends on the weights alone.
    """

    def __init__(self, strategy, cfg):
        check_strategy(strategy)
        self.strategy = strategy
        self.cfg = cfg
        self._sets = dict()

    def get(self, key, box, kind):
        entry = (key, kind, tuple(box))
        cached = self._sets.get(entry)
        if cached is None:
            cached = candidate_planes(Box2(*box), kind, self.strategy, self.cfg)
            self._sets[entry] = cached
        return cached

    def __len__(self):
        return len(self._sets)


def optimize_lambda(objective, init, schedule=None, deadline=None):
    """
    Maximizes objective(weights) by projected gradient ascent.
    Gradients are central finite differences taken through the projection,
    so every evaluated point lies on the simplex.
    An update is kept only if it strictly improves the objective.
    The scheduled step is scaled on top: a rejected trial shrinks the scale by schedule.backtrack
    before the next trial along the same gradient, an accepted one grows it by schedule.growth.
    Stops when the objective is nonnegative, after max_iters iterations,
    after patience rejected updates in a row, on a zero gradient or at the deadline.

    :param objective: Callable LambdaWeights -> float, deterministic in the weights
    :param init: LambdaWeights
    :param schedule: Schedule
    :param deadline: Optional time.monotonic() value after which no new iteration starts
    :return: Best LambdaWeights and its objective value
    """
    schedule = schedule or Schedule()
    best = init
    best_value = objective(init)
    gradient = None
    scale = 1.0
    stale = 0
    for iteration in range(schedule.max_iters):
        if best_value >= 0:
            break
        if deadline is not None and time.monotonic() >= deadline:
            logger.debug('Weight optimization reached its deadline after ' + str(iteration) + ' iterations.')
            break
        if gradient is None:
            gradient = _gradient(objective, best, schedule.fd_step)
            if not np.any(gradient):
                break
        candidate = best.project(best.values + scale * schedule.step_size(iteration) * gradient)
        value = objective(candidate)
        if value > best_value:
            best, best_value = candidate, value
            gradient = None
            scale = min(scale * schedule.growth, MAX_STEP_SCALE)
            stale = 0
        else:
            scale *= schedule.backtrack
            stale += 1
            if stale >= schedule.patience:
                break
    return best, best_value


def _gradient(objective, weights, step):
    gradient = np.zeros(len(weights))
    for i in range(len(weights)):
        gradient[i] = (objective(weights.nudge(i, step)) - objective(weights.nudge(i, -step))) / (2 * step)
    return gradient


def _fit(region, kind, cfg):
    if cfg.method == DISTANCE:
        return relax_distance(region, kind, cfg, offset=False)
    if cfg.method == VOLUME:
        return relax_volume(region, kind, cfg, offset=False)
    return relax_hybrid(region, kind, cfg, offset=False)

"""
The domain module contains the symbolic interval domain that carries an L-infinity ball
through an LSTM network.

An AbstractState is a list of generations. Generation 0 holds the flattened input sequence;
every later generation is a vector of neurons created by an affine map,
a relaxed product of two earlier neurons, or a constant.
Each neuron stores a numeric interval and a lower and upper linear bound
over neurons of earlier generations.
Generations form a DAG: a cell update reads h_{t-1} and c_{t-1}, which may lie
several generations back. Backsubstitution therefore replaces the highest referenced
generation first until only the input generation remains,
which is then evaluated exactly over the input box.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import logging.handlers
from collections import namedtuple

import numpy as np

from prismcert.relax import Box2, relax, SIG_TANH, SIG_MUL

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

FORGET = 'forget'
INPUT = 'input'
OUTPUT = 'output'
PRODUCTS = (FORGET, INPUT, OUTPUT)

CROSS_TOL = 1e-9

NeuronBounds = namedtuple('NeuronBounds', ['lo', 'hi', 'sym_lo', 'sym_hi'])


class DomainError(ValueError):
    """Raised for invalid perturbations, shape mismatches and non-finite bounds."""


class LinExpr(object):
    """
    Batch of linear expressions sum_g terms[g] @ x_g + const,
    where x_g is the neuron vector of generation g.
    """

    def __init__(self, terms, const):
        const = np.atleast_1d(np.array(const, dtype=float))
        self.terms = dict()
        for gen, coeffs in terms.items():
            coeffs = np.atleast_2d(np.array(coeffs, dtype=float))
            if coeffs.shape[0] != len(const):
                raise DomainError('Coefficients for generation ' + str(gen) + ' have ' + str(coeffs.shape[0]) +
                                  ' rows, expected ' + str(len(const)) + '.')
            if not np.all(np.isfinite(coeffs)):
                raise DomainError('Coefficients for generation ' + str(gen) + ' are not finite.')
            self.terms[int(gen)] = coeffs
        if not np.all(np.isfinite(const)):
            raise DomainError('Constant of a linear expression is not finite.')
        self.const = const

    @classmethod
    def over(cls, gen, coeffs, const=0.0):
        """
        Expressions over a single generation.

        :param gen: Generation index
        :param coeffs: Vector or matrix with one row per expression
        :param const: Scalar or vector
        :return: LinExpr
        """
        coeffs = np.atleast_2d(np.array(coeffs, dtype=float))
        const = np.broadcast_to(np.array(const, dtype=float), (coeffs.shape[0],))
        return cls({gen: coeffs}, const)

    def __len__(self):
        return len(self.const)

    def row(self, j):
        return LinExpr({g: m[j:j + 1] for g, m in self.terms.items()}, self.const[j:j + 1])

    @property
    def generations(self):
        return sorted(self.terms)


class Generation(object):
    """
    Neuron vector with numeric intervals and symbolic bounds.
    The input generation has no symbolic bounds.
    """

    def __init__(self, lo, hi, sym_lo, sym_hi, provenance):
        self.lo = lo
        self.hi = hi
        self.sym_lo = sym_lo
        self.sym_hi = sym_hi
        self.provenance = provenance

    def __len__(self):
        return len(self.lo)


class AbstractState(object):
    """
    Generations of one verification query.
    Generations are never modified once added, so forks share them.
    """

    def __init__(self, input_lo, input_hi):
        input_lo = np.array(input_lo, dtype=float).ravel()
        input_hi = np.array(input_hi, dtype=float).ravel()
        if input_lo.shape != input_hi.shape:
            raise DomainError('Input bounds differ in shape.')
        if not (np.all(np.isfinite(input_lo)) and np.all(np.isfinite(input_hi))):
            raise DomainError('Input bounds must be finite.')
        if np.any(input_lo > input_hi):
            raise DomainError('Input lower bounds exceed upper bounds.')
        self.generations = [Generation(input_lo, input_hi, None, None, 'input')]

    @property
    def input_box(self):
        return self.generations[0].lo, self.generations[0].hi

    @property
    def provenance(self):
        return [x.provenance for x in self.generations]

    def __len__(self):
        return len(self.generations)

    def interval(self, gen):
        generation = self.generations[gen]
        return generation.lo, generation.hi

    def bounds(self, gen, j):
        """
        Returns the NeuronBounds of neuron j in generation gen.
        Input neurons are bounded by themselves.
        """
        generation = self.generations[gen]
        if generation.sym_lo is None:
            unit = np.zeros(len(generation))
            unit[j] = 1.0
            own = LinExpr.over(gen, unit)
            return NeuronBounds(generation.lo[j], generation.hi[j], own, own)
        return NeuronBounds(generation.lo[j], generation.hi[j],
                            generation.sym_lo.row(j), generation.sym_hi.row(j))

    def add(self, sym_lo, sym_hi, provenance):
        """
        Appends a generation and computes its intervals by backsubstitution.

        :param sym_lo: LinExpr with one row per new neuron
        :param sym_hi: LinExpr with one row per new neuron
        :param provenance: Name of the operation that created it
        :return: Index of the new generation
        """
        if len(sym_lo) != len(sym_hi):
            raise DomainError('Lower and upper bounds describe different numbers of neurons.')
        index = len(self.generations)
        for expr in (sym_lo, sym_hi):
            for gen, coeffs in expr.terms.items():
                if not 0 <= gen < index:
                    raise DomainError('Bound references generation ' + str(gen) + ', which does not precede ' +
                                      str(index) + '.')
                if coeffs.shape[1] != len(self.generations[gen]):
                    raise DomainError('Bound over generation ' + str(gen) + ' has ' + str(coeffs.shape[1]) +
                                      ' columns, expected ' + str(len(self.generations[gen])) + '.')
        lo = _concretize(self, sym_lo, upper=False)
        hi = _concretize(self, sym_hi, upper=True)
        crossed = lo - hi > CROSS_TOL * (1.0 + np.maximum(np.abs(lo), np.abs(hi)))
        if np.any(crossed):
            raise DomainError(provenance + ' bounds cross at neurons ' + str(np.flatnonzero(crossed).tolist()) +
                              ': lower ' + str(lo[crossed].tolist()) + ', upper ' + str(hi[crossed].tolist()) + '.')
        # planes that touch on a point can cross by a rounding error
        lo, hi = np.minimum(lo, hi), np.maximum(lo, hi)
        self.generations.append(Generation(lo, hi, sym_lo, sym_hi, provenance))
        return index

    def add_constant(self, values, provenance='constant'):
        values = np.atleast_1d(np.array(values, dtype=float))
        expr = LinExpr(dict(), values)
        return self.add(expr, expr, provenance)

    def fork(self):
        """
        Returns a state that shares all current generations;
        generations added to the fork are not visible here.
        """
        other = AbstractState.__new__(AbstractState)
        other.generations = list(self.generations)
        return other


def input_state(x, epsilon, clip=None):
    """
    Builds the state of the L-infinity ball around a flattened input.

    :param x: Input values, any shape; flattened in row-major order
    :param epsilon: Radius of the ball
    :param clip: Optional (lower, upper) data range the ball is intersected with
    :return: AbstractState
    """
    if not np.isfinite(epsilon) or epsilon < 0:
        raise DomainError('epsilon must be a nonnegative number, got ' + str(epsilon) + '.')
    x = np.array(x, dtype=float).ravel()
    lo = x - epsilon
    hi = x + epsilon
    if clip is not None:
        lo = np.clip(lo, clip[0], clip[1])
        hi = np.clip(hi, clip[0], clip[1])
    return AbstractState(lo, hi)


def backsubstitute(state, expr):
    """
    Bounds a linear expression over the input box.
    For the upper bound, neurons with a positive coefficient are replaced by their upper bound
    and neurons with a negative coefficient by their lower bound; the lower bound is mirrored.

    :param state: AbstractState
    :param expr: LinExpr
    :return: Arrays lo and hi with one entry per expression
    """
    return _concretize(state, expr, upper=False), _concretize(state, expr, upper=True)


def interval_step(state, expr):
    """
    Bounds a linear expression with the stored intervals of the generations it references,
    without substituting their symbolic bounds.

    :param state: AbstractState
    :param expr: LinExpr
    :return: Arrays lo and hi
    """
    lo = expr.const.copy()
    hi = expr.const.copy()
    for gen, coeffs in expr.terms.items():
        g_lo, g_hi = state.interval(gen)
        pos = np.maximum(coeffs, 0)
        neg = np.minimum(coeffs, 0)
        lo += pos @ g_lo + neg @ g_hi
        hi += pos @ g_hi + neg @ g_lo
    return lo, hi


def affine(state, W, b, sources, provenance='affine'):
    """
    Adds the generation W @ [sources] + b.
    Its lower and upper bounds are the same exact expression.

    :param state: AbstractState
    :param W: Matrix with one column per selected source neuron
    :param b: Bias vector
    :param sources: List of (generation, indices) tuples; indices None selects the whole generation
    :param provenance: Name of the new generation
    :return: Index of the new generation
    """
    W = np.atleast_2d(np.array(W, dtype=float))
    b = np.atleast_1d(np.array(b, dtype=float))
    if len(b) != W.shape[0]:
        raise DomainError('Bias has length ' + str(len(b)) + ', expected ' + str(W.shape[0]) + '.')
    selected = [_select(state, source) for source in sources]
    width = sum(len(idx) for _, idx in selected)
    if W.shape[1] != width:
        raise DomainError('Matrix has ' + str(W.shape[1]) + ' columns but the sources have ' +
                          str(width) + ' neurons.')
    terms = dict()
    start = 0
    for gen, idx in selected:
        coeffs = terms.setdefault(gen, np.zeros((W.shape[0], len(state.generations[gen]))))
        np.add.at(coeffs, (slice(None), idx), W[:, start:start + len(idx)])
        start += len(idx)
    expr = LinExpr(terms, b)
    return state.add(expr, expr, provenance)


def hadamard_relax(state, xs, ys, kind, cfg, planes_override=None, provenance=None):
    """
    Adds the element-wise relaxed product of two neuron vectors.
    Neuron j is bounded by the plane pair chosen over the box of (x_j, y_j):
    A_l x_j + B_l y_j + C_l <= z_j <= A_u x_j + B_u y_j + C_u.

    :param state: AbstractState
    :param xs: (generation, indices) of the sigmoid argument
    :param ys: (generation, indices) of the second argument
    :param kind: sigtanh or sigmul
    :param cfg: RelaxConfig
    :param planes_override: Sequence of PlanePair, or callable (unit, box) -> PlanePair
    :param provenance: Name of the new generation
    :return: Index of the new generation
    """
    x_gen, x_idx = _select(state, xs)
    y_gen, y_idx = _select(state, ys)
    if len(x_idx) != len(y_idx):
        raise DomainError('Product operands have ' + str(len(x_idx)) + ' and ' + str(len(y_idx)) + ' neurons.')
    x_lo, x_hi = state.interval(x_gen)
    y_lo, y_hi = state.interval(y_gen)
    n = len(x_idx)
    lower = {x_gen: np.zeros((n, len(state.generations[x_gen])))}
    lower.setdefault(y_gen, np.zeros((n, len(state.generations[y_gen]))))
    upper = {g: m.copy() for g, m in lower.items()}
    c_lo = np.zeros(n)
    c_hi = np.zeros(n)
    for j, (ix, iy) in enumerate(zip(x_idx, y_idx)):
        bounds = (x_lo[ix], x_hi[ix], y_lo[iy], y_hi[iy])
        if not np.all(np.isfinite(bounds)):
            raise DomainError('Product operand ' + str(j) + ' has non-finite bounds.')
        box = Box2(*bounds)
        if planes_override is None:
            pair = relax(box, kind, cfg)
        elif callable(planes_override):
            pair = planes_override(j, box)
        else:
            pair = planes_override[j]
        lower[x_gen][j, ix] += pair.A_l
        lower[y_gen][j, iy] += pair.B_l
        upper[x_gen][j, ix] += pair.A_u
        upper[y_gen][j, iy] += pair.B_u
        c_lo[j] = pair.C_l
        c_hi[j] = pair.C_u
    return state.add(LinExpr(lower, c_lo), LinExpr(upper, c_hi), provenance or kind)


def lstm_abstract_step(state, layer, frame_inputs, prev_h_gen, prev_c_gen, cfg, planes_source=None,
                       position=(0, 0)):
    """
    Abstract version of one LSTM cell update.
    The gate pre-activations are exact affine generations. The cell state is
    the exact sum of the relaxed products sigmoid(f) * c_{t-1} and sigmoid(i) * tanh(C);
    the hidden state is the relaxed product sigmoid(o) * tanh(c_t).

    :param state: AbstractState
    :param layer: LstmLayer
    :param frame_inputs: (generation, indices) of the layer input at this frame
    :param prev_h_gen: Generation of h_{t-1}
    :param prev_c_gen: Generation of c_{t-1}
    :param cfg: RelaxConfig
    :param planes_source: Optional callable (key, box, kind) -> PlanePair,
        with key = (frame, layer, product, unit)
    :param position: (frame, layer) used in the keys
    :return: Generations of h_t and c_t
    """
    frame, depth = position
    sources = [(prev_h_gen, None), frame_inputs]
    tag = 't' + str(frame) + '/l' + str(depth) + '/'
    f_pre, i_pre, C_pre, o_pre = [affine(state, W, b, sources, provenance=tag + name)
                                  for (W, b), name in zip(layer.gates(), ('f', 'i', 'C', 'o'))]

    def planes(product, kind):
        if planes_source is None:
            return None
        return lambda unit, box: planes_source((frame, depth, product, unit), box, kind)

    forget = hadamard_relax(state, (f_pre, None), (prev_c_gen, None), SIG_MUL, cfg,
                            planes(FORGET, SIG_MUL), provenance=tag + FORGET)
    update = hadamard_relax(state, (i_pre, None), (C_pre, None), SIG_TANH, cfg,
                            planes(INPUT, SIG_TANH), provenance=tag + INPUT)
    hidden = layer.hidden_dim
    c_gen = affine(state, np.hstack([np.eye(hidden), np.eye(hidden)]), np.zeros(hidden),
                   [(forget, None), (update, None)], provenance=tag + 'c')
    h_gen = hadamard_relax(state, (o_pre, None), (c_gen, None), SIG_TANH, cfg,
                           planes(OUTPUT, SIG_TANH), provenance=tag + 'h')
    return h_gen, c_gen


def initial_carry(state, net):
    """
    Adds the zero initial states of every layer.

    :return: List of (h generation, c generation) per layer
    """
    carry = list()
    for k, layer in enumerate(net.layers):
        h = state.add_constant(np.zeros(layer.hidden_dim), provenance='h0/l' + str(k))
        c = state.add_constant(np.zeros(layer.hidden_dim), provenance='c0/l' + str(k))
        carry.append((h, c))
    return carry


def abstract_frames(net, state, carry, frames, cfg, planes_source=None):
    """
    Propagates the given frames through all layers.

    :param net: LstmNetwork
    :param state: AbstractState whose input generation holds the flattened sequence
    :param carry: List of (h generation, c generation) per layer before the first frame
    :param frames: Iterable of frame indices
    :param cfg: RelaxConfig
    :param planes_source: Optional plane callback, see lstm_abstract_step
    :return: Carry after the last frame
    """
    carry = list(carry)
    width = net.input_dim
    for t in frames:
        signal = (0, np.arange(t * width, (t + 1) * width))
        for k, layer in enumerate(net.layers):
            h, c = lstm_abstract_step(state, layer, signal, carry[k][0], carry[k][1], cfg,
                                      planes_source=planes_source, position=(t, k))
            carry[k] = (h, c)
            signal = (h, None)
    return carry


def classify(net, state, carry):
    return affine(state, net.W_out, net.b_out, [(carry[-1][0], None)], provenance='logits')


def abstract_forward(net, state, cfg, planes_source=None):
    """
    Propagates the input ball through the whole network.

    :param net: LstmNetwork
    :param state: AbstractState from input_state over the flattened sequence
    :param cfg: RelaxConfig
    :param planes_source: Optional plane callback, see lstm_abstract_step
    :return: Generation index of the logits
    """
    expected = net.num_frames * net.input_dim
    if len(state.generations[0]) != expected:
        raise DomainError('Input generation has ' + str(len(state.generations[0])) + ' neurons, the network reads ' +
                          str(expected) + '.')
    carry = initial_carry(state, net)
    carry = abstract_frames(net, state, carry, range(net.num_frames), cfg, planes_source)
    return classify(net, state, carry)


def _select(state, source):
    gen, idx = source
    if not 0 <= gen < len(state.generations):
        raise DomainError('Generation ' + str(gen) + ' does not exist.')
    size = len(state.generations[gen])
    if idx is None:
        return gen, np.arange(size)
    idx = np.atleast_1d(np.array(idx, dtype=int))
    if np.any(idx < 0) or np.any(idx >= size):
        raise DomainError('Neuron indices out of range for generation ' + str(gen) + '.')
    return gen, idx


def _concretize(state, expr, upper):
    """
    Substitutes symbolic bounds from the highest generation downwards
    and evaluates the remaining input terms over the input box.
    """
    terms = {g: m.copy() for g, m in expr.terms.items()}
    const = expr.const.copy()
    while terms and max(terms) > 0:
        gen = max(terms)
        coeffs = terms.pop(gen)
        generation = state.generations[gen]
        pos = np.maximum(coeffs, 0)
        neg = np.minimum(coeffs, 0)
        first, second = (generation.sym_hi, generation.sym_lo) if upper else (generation.sym_lo, generation.sym_hi)
        for weights, bound in ((pos, first), (neg, second)):
            const += weights @ bound.const
            for src, matrix in bound.terms.items():
                if src in terms:
                    terms[src] += weights @ matrix
                else:
                    terms[src] = weights @ matrix
    if 0 in terms:
        lo, hi = state.input_box
        pos = np.maximum(terms[0], 0)
        neg = np.minimum(terms[0], 0)
        const += (pos @ hi + neg @ lo) if upper else (pos @ lo + neg @ hi)
    return const

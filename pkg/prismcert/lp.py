"""
The lp module contains a dense two-phase simplex solver for the small linear programs
produced by the plane relaxations.
The programs have at most a few dozen decision variables and a few hundred constraints,
so a dense tableau with Bland's anti-cycling rule is sufficient and fully deterministic.

Problems are stated over sign-free variables with optional bounds.
Internally, every variable is shifted to its lower bound, mirrored at its upper bound
or split as v = v+ - v- when it is free.
Each constraint row is scaled by its largest absolute coefficient before pivoting.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import logging.handlers
from collections import namedtuple

import numpy as np

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

LE = '<='
GE = '>='
EQ = '='

OPTIMAL = 'optimal'
INFEASIBLE = 'infeasible'
UNBOUNDED = 'unbounded'
NUMERICAL = 'numerical'

FEASIBILITY_TOL = 1e-8
_PIVOT_TOL = 1e-11
_COST_TOL = 1e-11

LpSolution = namedtuple('LpSolution', ['status', 'values', 'objective_value'])


class LpError(ValueError):
    """Raised for malformed linear programs."""


class LpProblem(object):
    """
    Linear program: minimize objective . v subject to the constraints and variable bounds.
    Constraints are (row, rhs, sense) tuples with sense one of '<=', '>=', '='.
    Bounds are (lower, upper) tuples; use -inf / inf for missing bounds.
    """

    def __init__(self, objective, constraints, bounds=None):
        self.objective = np.array(objective, dtype=float)
        self.num_vars = len(self.objective)
        self.constraints = list()
        for row, rhs, sense in constraints:
            row = np.array(row, dtype=float)
            if len(row) != self.num_vars:
                raise LpError('Constraint row has ' + str(len(row)) + ' entries, expected ' +
                              str(self.num_vars) + '.')
            if sense not in (LE, GE, EQ):
                raise LpError('Unknown constraint sense ' + str(sense) + '.')
            if not np.isfinite(rhs) or not np.all(np.isfinite(row)):
                raise LpError('Constraints must be finite.')
            self.constraints.append((row, float(rhs), sense))
        if bounds is None:
            bounds = [(0.0, np.inf)] * self.num_vars
        if len(bounds) != self.num_vars:
            raise LpError('Expected ' + str(self.num_vars) + ' bounds, got ' + str(len(bounds)) + '.')
        self.bounds = [(float(lo), float(hi)) for lo, hi in bounds]
        if not np.all(np.isfinite(self.objective)):
            raise LpError('Objective must be finite.')

    def with_objective(self, objective):
        return LpProblem(objective, self.constraints, self.bounds)


def solve(problem):
    """
    Solves a linear program with the two-phase simplex method.
    Infeasible and unbounded programs are reported through the status field.

    :param problem: LpProblem
    :return: LpSolution
    """
    for lo, hi in problem.bounds:
        if lo > hi:
            return LpSolution(INFEASIBLE, None, np.nan)
    shift, mapping, cols = _standardize(problem.bounds)
    rows, rhs, senses = list(), list(), list()
    for row, b, sense in problem.constraints:
        rows.append(row @ mapping)
        rhs.append(b - row @ shift)
        senses.append(sense)
    for j, (lo, hi) in enumerate(problem.bounds):
        if np.isfinite(lo) and np.isfinite(hi):
            # shifted variable cannot exceed the width of its bound interval
            row = np.zeros(cols)
            row[np.flatnonzero(mapping[j])[0]] = 1.0
            rows.append(row)
            rhs.append(hi - lo)
            senses.append(LE)
    cost = problem.objective @ mapping
    offset = problem.objective @ shift
    status, std_values = _two_phase(cost, rows, rhs, senses)
    if status != OPTIMAL:
        return LpSolution(status, None, np.nan)
    values = shift + mapping @ std_values
    if not _check_solution(problem, values):
        logger.warning('Simplex solution failed the post-hoc feasibility check.')
        return LpSolution(NUMERICAL, values, np.nan)
    return LpSolution(OPTIMAL, values, float(problem.objective @ values))


def encode_abs_terms(problem, terms, weights):
    """
    Adds weighted absolute values of linear expressions to the objective.
    For each expression a . v + k, an auxiliary variable t >= 0 is appended with
    t >= a . v + k and t >= -(a . v + k); w * t is added to the objective.
    At an optimum, t equals |a . v + k| whenever w > 0.

    :param problem: LpProblem
    :param terms: List of (coefficients, constant) tuples over the existing variables
    :param weights: Nonnegative weight per term
    :return: New LpProblem with len(terms) extra variables
    """
    weights = np.array(weights, dtype=float)
    if len(weights) != len(terms):
        raise LpError('Expected one weight per absolute-value term.')
    if np.any(weights < 0):
        raise LpError('Absolute-value terms need nonnegative weights.')
    n = problem.num_vars
    k = len(terms)
    objective = np.concatenate([problem.objective, weights])
    constraints = [(np.concatenate([row, np.zeros(k)]), rhs, sense) for row, rhs, sense in problem.constraints]
    for i, (coeffs, constant) in enumerate(terms):
        coeffs = np.array(coeffs, dtype=float)
        if len(coeffs) != n:
            raise LpError('Absolute-value term ' + str(i) + ' is not over the existing variables.')
        aux = np.zeros(k)
        aux[i] = 1.0
        constraints.append((np.concatenate([-coeffs, aux]), float(constant), GE))
        constraints.append((np.concatenate([coeffs, aux]), -float(constant), GE))
    bounds = list(problem.bounds) + [(0.0, np.inf)] * k
    return LpProblem(objective, constraints, bounds)


def _standardize(bounds):
    """
    Maps the original variables onto nonnegative standard-form variables: v = shift + mapping @ s.

    :param bounds: List of (lower, upper) tuples
    :return: shift vector, mapping matrix, number of standard variables
    """
    columns = list()
    shift = np.zeros(len(bounds))
    for j, (lo, hi) in enumerate(bounds):
        if np.isfinite(lo):
            shift[j] = lo
            columns.append((j, 1.0))
        elif np.isfinite(hi):
            shift[j] = hi
            columns.append((j, -1.0))
        else:
            columns.append((j, 1.0))
            columns.append((j, -1.0))
    mapping = np.zeros((len(bounds), len(columns)))
    for k, (j, sign) in enumerate(columns):
        mapping[j, k] = sign
    return shift, mapping, len(columns)


def _two_phase(cost, rows, rhs, senses):
    """
    Runs phase 1 and phase 2 on a problem over nonnegative variables.

    :return: Status and values of the standard-form variables
    """
    n = len(cost)
    A, b, kinds = list(), list(), list()
    for row, value, sense in zip(rows, rhs, senses):
        scale = np.max(np.abs(row)) if len(row) else 0.0
        if scale == 0:
            # empty rows are either trivially satisfied or contradictory
            if (sense == LE and value < -FEASIBILITY_TOL) or (sense == GE and value > FEASIBILITY_TOL) or \
                    (sense == EQ and abs(value) > FEASIBILITY_TOL):
                return INFEASIBLE, None
            continue
        row = row / scale
        value = value / scale
        if value < 0:
            row, value = -row, -value
            sense = {LE: GE, GE: LE, EQ: EQ}[sense]
        A.append(row)
        b.append(value)
        kinds.append(sense)
    m = len(A)
    if m == 0:
        if np.any(cost < -_COST_TOL):
            return UNBOUNDED, None
        return OPTIMAL, np.zeros(n)
    num_slack = sum(1 for x in kinds if x != EQ)
    num_art = sum(1 for x in kinds if x != LE)
    width = n + num_slack + num_art
    T = np.zeros((m + 1, width + 1))
    T[:m, :n] = np.array(A)
    T[:m, -1] = b
    basis = list()
    slack = n
    art = n + num_slack
    artificial = list()
    for i, kind in enumerate(kinds):
        if kind == LE:
            T[i, slack] = 1.0
            basis.append(slack)
            slack += 1
        elif kind == GE:
            T[i, slack] = -1.0
            slack += 1
            T[i, art] = 1.0
            basis.append(art)
            artificial.append(art)
            art += 1
        else:
            T[i, art] = 1.0
            basis.append(art)
            artificial.append(art)
            art += 1
    limit = 50 * (m + width) + 1000
    if artificial:
        # phase 1: minimize the sum of the artificial variables
        T[-1, :] = 0.0
        T[-1, n + num_slack:width] = 1.0
        for i, j in enumerate(basis):
            if j >= n + num_slack:
                T[-1, :] -= T[i, :]
        status = _simplex(T, basis, width, limit)
        if status != OPTIMAL:
            return NUMERICAL, None
        if -T[-1, -1] > FEASIBILITY_TOL:
            return INFEASIBLE, None
        T, basis = _drive_out_artificials(T, basis, n + num_slack)
    # phase 2 on the columns without artificials
    keep = n + num_slack
    T = np.hstack([T[:, :keep], T[:, -1:]])
    T[-1, :] = 0.0
    T[-1, :n] = cost
    for i, j in enumerate(basis):
        if j < n and cost[j] != 0:
            T[-1, :] -= cost[j] * T[i, :]
    status = _simplex(T, basis, keep, limit)
    if status != OPTIMAL:
        return status, None
    values = np.zeros(keep)
    for i, j in enumerate(basis):
        values[j] = T[i, -1]
    return OPTIMAL, np.maximum(values[:n], 0.0)


def _simplex(T, basis, width, limit):
    """
    Pivots the tableau in place until optimality, using Bland's rule.
    The last row holds the reduced costs and minus the objective value.
    """
    for _ in range(limit):
        reduced = T[-1, :width]
        candidates = np.flatnonzero(reduced < -_COST_TOL)
        if len(candidates) == 0:
            return OPTIMAL
        col = candidates[0]
        column = T[:-1, col]
        rows = np.flatnonzero(column > _PIVOT_TOL)
        if len(rows) == 0:
            return UNBOUNDED
        ratios = T[rows, -1] / column[rows]
        best = np.min(ratios)
        ties = rows[ratios <= best + 1e-12 * max(1.0, abs(best))]
        row = min(ties, key=lambda i: basis[i])
        _pivot(T, row, col)
        basis[row] = col
    return NUMERICAL


def _pivot(T, row, col):
    T[row, :] /= T[row, col]
    factors = T[:, col].copy()
    factors[row] = 0.0
    T -= np.outer(factors, T[row, :])


def _drive_out_artificials(T, basis, first_artificial):
    """
    Removes artificial variables that are still basic (at zero level) after phase 1.
    Rows without a usable pivot are redundant and are deleted.
    """
    redundant = list()
    for i, j in enumerate(basis):
        if j < first_artificial:
            continue
        row = T[i, :first_artificial]
        candidates = np.flatnonzero(np.abs(row) > _PIVOT_TOL)
        if len(candidates) == 0:
            redundant.append(i)
            continue
        _pivot(T, i, candidates[0])
        basis[i] = candidates[0]
    if redundant:
        keep = [i for i in range(len(basis)) if i not in redundant]
        T = T[keep + [T.shape[0] - 1], :]
        basis = [basis[i] for i in keep]
    return T, basis


def _check_solution(problem, values):
    """
    Verifies constraints and bounds after row normalization.
    """
    for lo, hi, v in zip([b[0] for b in problem.bounds], [b[1] for b in problem.bounds], values):
        if v < lo - FEASIBILITY_TOL * max(1.0, abs(lo)) or v > hi + FEASIBILITY_TOL * max(1.0, abs(hi)):
            return False
    for row, rhs, sense in problem.constraints:
        scale = max(np.max(np.abs(row)), 1e-300)
        gap = (row @ values - rhs) / scale
        tol = FEASIBILITY_TOL * max(1.0, abs(rhs) / scale)
        if (sense == LE and gap > tol) or (sense == GE and gap < -tol) or (sense == EQ and abs(gap) > tol):
            return False
    return True

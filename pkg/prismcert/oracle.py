"""
The oracle module contains brute-force checks that are independent of the verifier:
exact and sampled volumes of truncated poly-prisms, the corner identities of planes over boxes,
the degenerate-top surface bounds, an LP oracle by vertex enumeration,
dense-grid soundness counts for plane pairs and a sampling attack on LSTM networks.
These functions are brute force and slow; they are meant for tests and the check command.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import logging.handlers
from collections import namedtuple
from itertools import combinations

import numpy as np

from prismcert.lp import LpProblem, LpSolution, LE, GE, EQ, OPTIMAL, INFEASIBLE, UNBOUNDED
from prismcert.model import forward, predict
from prismcert.relax import Box2, PlanePair, as_region, eval_bivariate

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

IdentityCheck = namedtuple('IdentityCheck', ['opposite_gap', 'mean_gap', 'ok'])
DegenerateCheck = namedtuple('DegenerateCheck', ['proxy', 'expected_proxy', 'area', 'lower_bound',
                                                 'upper_bound', 'ok'])


class PolyPrism(object):
    """
    Solid between a convex polygon in the plane z = 0 and a plane above it.
    Vertices are stored counterclockwise; heights are the plane values at the vertices.
    """

    def __init__(self, base, plane):
        base = np.array(base, dtype=float)
        if base.ndim != 2 or base.shape[1] != 2 or len(base) < 3:
            raise ValueError('A poly-prism needs at least three base vertices in the plane.')
        if _polygon_area(base) < 0:
            base = base[::-1]
        edges = np.roll(base, -1, axis=0) - base
        turns = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
        if np.any(turns <= 0):
            raise ValueError('Base vertices are not in strictly convex position.')
        self.base = base
        self.plane = tuple(float(v) for v in plane)
        self.heights = self.top(base[:, 0], base[:, 1])
        if np.any(self.heights < 0):
            raise ValueError('The top plane dips below the base.')

    def top(self, x, y):
        A, B, C = self.plane
        return A * np.asarray(x) + B * np.asarray(y) + C

    @property
    def area(self):
        return _polygon_area(self.base)

    def __len__(self):
        return len(self.base)


def regular_poly_prism(n, rng, min_height=0.1):
    """
    Random affine image of a regular n-gon under a random plane that stays above the base.
    Affine images keep the vertex mean at the area centroid.

    :param n: Number of vertices
    :param rng: numpy Generator
    :param min_height: Smallest height of the top plane over the base
    :return: PolyPrism
    """
    angles = 2 * np.pi * np.arange(n) / n + rng.uniform(0, 2 * np.pi)
    polygon = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    transform = rng.normal(0, 1, (2, 2))
    while abs(np.linalg.det(transform)) < 0.1:
        transform = rng.normal(0, 1, (2, 2))
    base = polygon @ transform.T + rng.uniform(-3, 3, 2)
    A, B = rng.normal(0, 1, 2)
    C = -np.min(A * base[:, 0] + B * base[:, 1]) + min_height + rng.uniform(0, 2)
    return PolyPrism(base, (A, B, C))


def random_prism_pair(box, rng, min_gap=0.01):
    """
    Random plane pair whose gap stays at least min_gap over the box,
    together with the poly-prism over the box whose top is the gap plane.

    :param box: Box2 with positive area
    :param rng: numpy Generator
    :param min_gap: Smallest gap between the planes at the corners
    :return: PlanePair and PolyPrism
    """
    lower = rng.normal(0, 1, 3)
    gap = rng.normal(0, 1, 3)
    corners = box.corners
    gap[2] = -np.min(gap[0] * corners[:, 0] + gap[1] * corners[:, 1]) + min_gap + rng.uniform(0, 2)
    pair = PlanePair.from_planes(tuple(lower), tuple(lower + gap))
    return pair, PolyPrism(corners[[0, 1, 3, 2]], gap)


def poly_prism_volume_exact(prism):
    """
    Volume by tetrahedra. The base is fanned around its vertex mean G; the solid over each
    fan triangle (G, P_i, P_i+1) is a truncated triangular prism, which splits into three tetrahedra.

    :param prism: PolyPrism
    :return: Volume
    """
    center = prism.base.mean(axis=0)
    g_bottom = np.array([center[0], center[1], 0.0])
    g_top = np.array([center[0], center[1], float(prism.top(*center))])
    volume = 0.0
    n = len(prism)
    for i in range(n):
        j = (i + 1) % n
        a, b, c = g_bottom, _lift(prism.base[i], 0.0), _lift(prism.base[j], 0.0)
        a2, b2, c2 = g_top, _lift(prism.base[i], prism.heights[i]), _lift(prism.base[j], prism.heights[j])
        volume += _tetrahedron(a, b, c, a2) + _tetrahedron(b, c, a2, b2) + _tetrahedron(c, a2, b2, c2)
    return volume


def poly_prism_volume_formula(prism):
    """
    Mean vertex height times base area.
    Equals the exact volume whenever the vertex mean of the base is its area centroid,
    which holds for triangles, parallelograms and affine images of regular polygons.
    """
    return float(np.mean(prism.heights) * prism.area)


def poly_prism_volume_monte_carlo(prism, n, rng):
    """
    Hit-or-miss estimate of the volume in the bounding box of the prism.

    :param prism: PolyPrism
    :param n: Number of samples
    :param rng: numpy Generator
    :return: Estimate and its standard error
    """
    lo = prism.base.min(axis=0)
    hi = prism.base.max(axis=0)
    z_max = float(np.max(prism.heights))
    box_volume = float(np.prod(hi - lo) * z_max)
    points = rng.uniform(lo, hi, (n, 2))
    z = rng.uniform(0, z_max, n)
    hits = _inside_convex(prism.base, points) & (z <= prism.top(points[:, 0], points[:, 1]))
    share = np.mean(hits)
    return box_volume * share, box_volume * np.sqrt(share * (1 - share) / n)


def coplanar_corner_identities(plane, box, tol=1e-12):
    """
    Checks z_1 + z_4 = z_2 + z_3 for opposite corners
    and (z_1 + z_2 + z_3 + z_4) / 4 = z_0 at the center.

    :param plane: (A, B, C)
    :param box: Box2
    :param tol: Tolerance relative to the largest corner value
    :return: IdentityCheck
    """
    A, B, C = plane
    corners = box.corners
    z1, z2, z3, z4 = A * corners[:, 0] + B * corners[:, 1] + C
    cx, cy = box.center
    z0 = A * cx + B * cy + C
    scale = max(1.0, abs(z1), abs(z2), abs(z3), abs(z4))
    opposite = (z1 + z4) - (z2 + z3)
    mean = (z1 + z2 + z3 + z4) / 4 - z0
    return IdentityCheck(opposite, mean, abs(opposite) <= tol * scale and abs(mean) <= tol * scale)


def degenerate_top(a, b, z2, z3):
    """
    Plane over [0, a] x [0, b] that is 0 at (a, b), z2 at (a, 0), z3 at (0, b)
    and z2 + z3 at the origin.

    :return: Plane (A, B, C) and Box2
    """
    return (-z3 / a, -z2 / b, z2 + z3), Box2(0.0, a, 0.0, b)


def surface_proxy_degenerate_check(plane, box, tol=1e-9):
    """
    For a top plane whose smallest corner value is 0, the corner deviation sum
    equals twice the larger of the two middle corner values z_2, and the area of the top face
    lies between ab / sqrt(3) + min(a, b) z_2 / sqrt(3) and ab + sqrt(a^2 + b^2) z_2.
    On square boxes the lower bound equals ab / sqrt(3) + (a + b) z_2 / (2 sqrt(3)).
    The area is computed exactly from two triangles with Heron's formula.

    :param plane: (A, B, C)
    :param box: Box2
    :param tol: Relative tolerance of the checks
    :return: DegenerateCheck
    """
    A, B, C = plane
    corners = box.corners
    z = A * corners[:, 0] + B * corners[:, 1] + C
    cx, cy = box.center
    z0 = A * cx + B * cy + C
    proxy = float(np.sum(np.abs(z - z0)))
    # the larger of the two corners between the maximum and the zero corner
    middle = float(np.sort(z)[2])
    expected = 2.0 * middle
    top = np.column_stack([corners, z])
    area = _heron(top[0], top[1], top[3]) + _heron(top[0], top[3], top[2])
    a = box.u_x - box.l_x
    b = box.u_y - box.l_y
    lower = a * b / np.sqrt(3) + min(a, b) * middle / np.sqrt(3)
    upper = a * b + np.sqrt(a ** 2 + b ** 2) * middle
    scale = tol * max(1.0, upper)
    ok = abs(proxy - expected) <= scale and lower - scale <= area <= upper + scale
    return DegenerateCheck(proxy, expected, area, lower, upper, ok)


def lp_vertex_enumeration(problem, tol=1e-9):
    """
    Solves a small bounded-below LP by enumerating every intersection of n constraint boundaries.
    Unboundedness is detected by minimizing the objective over the recession cone cut to [-1, 1]^n.

    :param problem: LpProblem with at most 8 variables
    :param tol: Feasibility tolerance
    :return: LpSolution
    """
    n = problem.num_vars
    if n > 8:
        raise ValueError('Vertex enumeration is limited to 8 variables.')
    rows, rhs, equalities = _inequalities(problem)
    best = _best_vertex(problem.objective, rows, rhs, equalities, tol)
    if best is None:
        return LpSolution(INFEASIBLE, None, np.nan)
    cone_rows = [r for r in rows] + [np.eye(n)[k] for k in range(n)] + [-np.eye(n)[k] for k in range(n)]
    cone_rhs = [0.0] * len(rows) + [1.0] * (2 * n)
    direction = _best_vertex(problem.objective, cone_rows, cone_rhs, [(e, 0.0) for e, _ in equalities], tol)
    if direction is not None and problem.objective @ direction < -1e-7:
        return LpSolution(UNBOUNDED, None, np.nan)
    return LpSolution(OPTIMAL, best, float(problem.objective @ best))


def random_lp(rng, num_vars, num_constraints, bound=5.0):
    """
    Random LP with box bounds [-bound, bound] on every variable, so it is never unbounded.
    About one constraint in ten is an equality; many draws are infeasible.

    :param rng: numpy Generator
    :param num_vars: Number of variables
    :param num_constraints: Number of constraints
    :param bound: Half-width of the variable bounds
    :return: LpProblem
    """
    constraints = list()
    for _ in range(num_constraints):
        sense = rng.choice([LE, GE, EQ], p=[0.45, 0.45, 0.1])
        constraints.append((rng.normal(0, 1, num_vars), float(rng.normal(0, 2)), str(sense)))
    return LpProblem(rng.normal(0, 1, num_vars), constraints, [(-bound, bound)] * num_vars)


def dense_grid_soundness(pair, region, kind, grid_n=257, tol=0.0):
    """
    Counts grid points of the region where lower <= f <= upper fails.

    :param pair: PlanePair
    :param region: Box2 or Region2
    :param kind: sigtanh or sigmul
    :param grid_n: Points per axis
    :param tol: Allowed violation
    :return: Number of violations
    """
    if grid_n < 2:
        raise ValueError('grid_n must be at least 2.')
    region = as_region(region)
    box = region.box
    gx, gy = np.meshgrid(np.linspace(box.l_x, box.u_x, grid_n), np.linspace(box.l_y, box.u_y, grid_n),
                         indexing='ij')
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    points = points[region.contains(points)]
    values = eval_bivariate(kind, points[:, 0], points[:, 1])
    below = pair.lower(points[:, 0], points[:, 1]) > values + tol
    above = pair.upper(points[:, 0], points[:, 1]) < values - tol
    return int(np.sum(below | above))


def grid_attack(net, sample, true_label, spec, samples=100000, seed=0, batch=4096):
    """
    Searches the perturbation ball for a misclassified input.
    Each coordinate sits at -epsilon or +epsilon with probability 0.5 and is uniform otherwise.

    :param net: LstmNetwork
    :param sample: Sequence of shape (num_frames, input_dim)
    :param true_label: Class t
    :param spec: PerturbationSpec
    :param samples: Number of perturbed inputs
    :param seed: Seed of the sampler
    :param batch: Inputs per forward pass
    :return: A misclassified input, or None
    """
    sample = np.asarray(sample, dtype=float)
    if predict(net, sample) != true_label:
        return sample
    if spec.epsilon == 0:
        return None
    rng = np.random.default_rng(seed)
    eps = spec.epsilon
    done = 0
    while done < samples:
        size = min(batch, samples - done)
        shape = (size,) + sample.shape
        noise = rng.uniform(-eps, eps, shape)
        corner = rng.random(shape) < 0.5
        noise[corner] = np.where(rng.random(int(corner.sum())) < 0.5, -eps, eps)
        perturbed = sample + noise
        if spec.clip_range is not None:
            perturbed = np.clip(perturbed, spec.clip_range[0], spec.clip_range[1])
        labels = np.argmax(forward(net, perturbed), axis=-1)
        wrong = np.flatnonzero(labels != true_label)
        if len(wrong):
            return perturbed[wrong[0]]
        done += size
    return None


def _inequalities(problem):
    """
    Rewrites constraints and bounds as rows r with r . v <= rhs, plus equality rows.
    """
    rows, rhs, equalities = list(), list(), list()
    for row, b, sense in problem.constraints:
        if sense == LE:
            rows.append(row)
            rhs.append(b)
        elif sense == GE:
            rows.append(-row)
            rhs.append(-b)
        else:
            equalities.append((row, b))
    for k, (lo, hi) in enumerate(problem.bounds):
        unit = np.zeros(problem.num_vars)
        unit[k] = 1.0
        if np.isfinite(lo):
            rows.append(-unit)
            rhs.append(-lo)
        if np.isfinite(hi):
            rows.append(unit)
            rhs.append(hi)
    return rows, rhs, equalities


def _best_vertex(objective, rows, rhs, equalities, tol):
    n = len(objective)
    free = n - len(equalities)
    if free < 0:
        free = 0
    eq_rows = [e for e, _ in equalities]
    eq_rhs = [b for _, b in equalities]
    best, best_value = None, np.inf
    G = np.array(rows).reshape(-1, n)
    h = np.array(rhs, dtype=float)
    for subset in combinations(range(len(rows)), free):
        M = np.array(eq_rows + [rows[i] for i in subset]).reshape(-1, n)
        if M.shape[0] != n or abs(np.linalg.det(M)) < 1e-12:
            continue
        v = np.linalg.solve(M, np.array(eq_rhs + [rhs[i] for i in subset], dtype=float))
        scale = tol * (1.0 + np.abs(h))
        if len(h) and np.any(G @ v - h > scale):
            continue
        if any(abs(e @ v - b) > tol * (1.0 + abs(b)) for e, b in equalities):
            continue
        value = objective @ v
        if value < best_value - 1e-12:
            best, best_value = v, value
    return best


def _lift(point, z):
    return np.array([point[0], point[1], z])


def _tetrahedron(a, b, c, d):
    return abs(np.linalg.det(np.array([b - a, c - a, d - a]))) / 6.0


def _polygon_area(vertices):
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _inside_convex(base, points):
    inside = np.ones(len(points), dtype=bool)
    for i in range(len(base)):
        p, q = base[i], base[(i + 1) % len(base)]
        cross = (q[0] - p[0]) * (points[:, 1] - p[1]) - (q[1] - p[1]) * (points[:, 0] - p[0])
        inside &= cross >= 0
    return inside


def _heron(p, q, r):
    a2 = np.sum((q - r) ** 2)
    b2 = np.sum((p - r) ** 2)
    c2 = np.sum((p - q) ** 2)
    return 0.25 * np.sqrt(max((a2 + b2 + c2) ** 2 - 2 * (a2 ** 2 + b2 ** 2 + c2 ** 2), 0.0))

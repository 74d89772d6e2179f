"""
The relax module computes pairs of linear planes that enclose the bivariate surfaces
occurring in an LSTM cell:
    sigtanh: f(x, y) = sigmoid(x) * tanh(y)
    sigmul:  f(x, y) = sigmoid(x) * y
over a rectangle or a triangle in the (x, y) plane.

Three objectives are available for the linear program that picks the planes:
1. distance: two independent programs minimizing the summed vertical gap at sampled points
2. volume: one program minimizing the volume of the prism between the planes
3. hybrid: one program minimizing alpha * centroid height + (1 - alpha) * corner deviation sum

Programs only constrain the planes at sampled points.
The soundness offset afterwards shifts each plane until it provably encloses the surface,
using interval bounds on the partial derivatives of f and a refined grid of cells.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import logging.handlers
from collections import namedtuple

import numpy as np
from scipy.special import expit

from prismcert.lp import LpProblem, solve, encode_abs_terms, LE, GE, OPTIMAL

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

SIG_TANH = 'sigtanh'
SIG_MUL = 'sigmul'
KINDS = (SIG_TANH, SIG_MUL)

DISTANCE = 'distance'
VOLUME = 'volume'
HYBRID = 'hybrid'
METHODS = (DISTANCE, VOLUME, HYBRID)

DEFAULT_ALPHA = 0.674

# widths at or below this (relative) size are treated as a collapsed axis
_DEGENERATE = 1e-12
_MAX_CELLS = 200000


class RelaxError(ValueError):
    """Raised for invalid regions or relaxation settings."""


class Box2(namedtuple('Box2', ['l_x', 'u_x', 'l_y', 'u_y'])):
    """
    Axis-aligned rectangle [l_x, u_x] x [l_y, u_y].
    Corners are ordered (l_x, l_y), (u_x, l_y), (l_x, u_y), (u_x, u_y),
    so corners 1 and 4 as well as 2 and 3 are opposite.
    """
    __slots__ = ()

    def __new__(cls, l_x, u_x, l_y, u_y):
        values = [float(v) for v in (l_x, u_x, l_y, u_y)]
        if not np.all(np.isfinite(values)):
            raise RelaxError('Box bounds must be finite, got ' + str(values) + '.')
        if values[0] > values[1] or values[2] > values[3]:
            raise RelaxError('Box bounds are not ordered: ' + str(values) + '.')
        return super(Box2, cls).__new__(cls, *values)

    @property
    def center(self):
        return 0.5 * (self.l_x + self.u_x), 0.5 * (self.l_y + self.u_y)

    @property
    def area(self):
        return (self.u_x - self.l_x) * (self.u_y - self.l_y)

    @property
    def corners(self):
        return np.array([[self.l_x, self.l_y], [self.u_x, self.l_y],
                         [self.l_x, self.u_y], [self.u_x, self.u_y]])

    def flat_axes(self):
        """
        Returns whether the x and y axes have collapsed to a single value.
        """
        return (_is_flat(self.l_x, self.u_x), _is_flat(self.l_y, self.u_y))

    def is_point(self):
        return all(self.flat_axes())

    def contains(self, other):
        return self.l_x <= other.l_x and other.u_x <= self.u_x and \
            self.l_y <= other.l_y and other.u_y <= self.u_y


class Region2(object):
    """
    Rectangle or triangle in the plane.
    Use Region2.rectangle(box) or Region2.triangle(p0, p1, p2) to construct one.
    """
    RECTANGLE = 'rectangle'
    TRIANGLE = 'triangle'

    def __init__(self, shape, vertices, box):
        self.shape = shape
        self.vertices = vertices
        self.box = box

    @classmethod
    def rectangle(cls, box):
        return cls(cls.RECTANGLE, box.corners, box)

    @classmethod
    def triangle(cls, p0, p1, p2):
        vertices = np.array([p0, p1, p2], dtype=float)
        if vertices.shape != (3, 2) or not np.all(np.isfinite(vertices)):
            raise RelaxError('A triangle needs three finite points in the plane.')
        edges = vertices - np.roll(vertices, 1, axis=0)
        diameter = np.max(np.sum(edges ** 2, axis=1))
        if _signed_area(vertices) <= 0:
            # counterclockwise order keeps edge normals pointing outward
            vertices = vertices[[0, 2, 1]]
        if abs(_signed_area(vertices)) <= 1e-12 * diameter:
            raise RelaxError('Triangle vertices are collinear: ' + str(vertices.tolist()) + '.')
        box = Box2(vertices[:, 0].min(), vertices[:, 0].max(), vertices[:, 1].min(), vertices[:, 1].max())
        return cls(cls.TRIANGLE, vertices, box)

    @property
    def corners(self):
        return self.vertices

    @property
    def centroid(self):
        if self.shape == self.RECTANGLE:
            return self.box.center
        return tuple(self.vertices.mean(axis=0))

    @property
    def area(self):
        if self.shape == self.RECTANGLE:
            return self.box.area
        return abs(_signed_area(self.vertices))

    def is_point(self):
        return self.box.is_point()

    def contains(self, points, tol=1e-12):
        """
        Tests which points lie in the region.

        :param points: Array of shape (n, 2)
        :param tol: Relative tolerance on the boundary
        :return: Boolean array
        """
        points = np.atleast_2d(points)
        scale = tol * (1.0 + np.max(np.abs(self.box)))
        if self.shape == self.RECTANGLE:
            return (points[:, 0] >= self.box.l_x - scale) & (points[:, 0] <= self.box.u_x + scale) & \
                   (points[:, 1] >= self.box.l_y - scale) & (points[:, 1] <= self.box.u_y + scale)
        normals, offsets = self._edges()
        return np.all(points @ normals.T - offsets <= scale, axis=1)

    def may_intersect(self, centers, hx, hy):
        """
        Conservative test whether axis-aligned cells with the given centers and half-widths
        touch the region. Never discards a cell that intersects it.
        """
        centers = np.atleast_2d(centers)
        if self.shape == self.RECTANGLE:
            return np.ones(len(centers), dtype=bool)
        normals, offsets = self._edges()
        reach = np.abs(normals[:, 0]) * hx + np.abs(normals[:, 1]) * hy
        scale = 1e-12 * (1.0 + np.max(np.abs(self.box)))
        return np.all(centers @ normals.T - offsets <= reach + scale, axis=1)

    def _edges(self):
        start = self.vertices
        end = np.roll(self.vertices, -1, axis=0)
        direction = end - start
        normals = np.stack([direction[:, 1], -direction[:, 0]], axis=1)
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        return normals, np.sum(normals * start, axis=1)


class PlanePair(namedtuple('PlanePair', ['A_l', 'B_l', 'C_l', 'A_u', 'B_u', 'C_u'])):
    """
    Lower plane A_l * x + B_l * y + C_l and upper plane A_u * x + B_u * y + C_u.
    """
    __slots__ = ()

    def lower(self, x, y):
        return self.A_l * np.asarray(x) + self.B_l * np.asarray(y) + self.C_l

    def upper(self, x, y):
        return self.A_u * np.asarray(x) + self.B_u * np.asarray(y) + self.C_u

    @property
    def lower_plane(self):
        return self.A_l, self.B_l, self.C_l

    @property
    def upper_plane(self):
        return self.A_u, self.B_u, self.C_u

    @classmethod
    def from_planes(cls, lower, upper):
        return cls(*(tuple(float(v) for v in lower) + tuple(float(v) for v in upper)))


class RelaxConfig(object):
    """
    Settings of the plane relaxation.

    :param method: distance, volume or hybrid
    :param alpha: Weight of the centroid height in the hybrid objective
    :param sample_density: Sample points per axis of the linear program
    :param offset_grid: Grid points per axis of the soundness offset
    :param offset_rounds: Cell refinement rounds of the soundness offset
    :param offset_tol: Slack allowed by the offset refinement before a cell is discarded
    """

    def __init__(self, method=HYBRID, alpha=DEFAULT_ALPHA, sample_density=10, offset_grid=64,
                 offset_rounds=6, offset_tol=1e-5):
        if method not in METHODS:
            raise RelaxError('Unknown relaxation method ' + str(method) + '. Choose from ' +
                             ', '.join(METHODS) + '.')
        if not 0 <= alpha <= 1:
            raise RelaxError('alpha must lie in [0, 1], got ' + str(alpha) + '.')
        if int(sample_density) < 3:
            raise RelaxError('sample_density must be at least 3.')
        if int(offset_grid) < 16:
            raise RelaxError('offset_grid must be at least 16.')
        self.method = method
        self.alpha = float(alpha)
        self.sample_density = int(sample_density)
        self.offset_grid = int(offset_grid)
        self.offset_rounds = int(offset_rounds)
        self.offset_tol = float(offset_tol)

    def replace(self, **changes):
        settings = self.as_dict()
        settings.update(changes)
        return RelaxConfig(**settings)

    def as_dict(self):
        return {'method': self.method, 'alpha': self.alpha, 'sample_density': self.sample_density,
                'offset_grid': self.offset_grid, 'offset_rounds': self.offset_rounds,
                'offset_tol': self.offset_tol}


def as_region(region):
    if isinstance(region, Region2):
        return region
    if isinstance(region, Box2):
        return Region2.rectangle(region)
    raise RelaxError('Expected a Box2 or Region2, got ' + type(region).__name__ + '.')


def eval_bivariate(kind, x, y):
    """
    Evaluates sigmoid(x) * tanh(y) or sigmoid(x) * y.

    :param kind: sigtanh or sigmul
    :param x: Scalar or array
    :param y: Scalar or array
    :return: Scalar or array
    """
    if kind == SIG_TANH:
        return expit(x) * np.tanh(y)
    if kind == SIG_MUL:
        return expit(x) * np.asarray(y, dtype=float)
    raise RelaxError('Unknown bivariate kind ' + str(kind) + '.')


def sample_points(region, density):
    """
    Deterministic sample points for the linear programs.
    Rectangles give a density x density grid including all corners;
    triangles give the barycentric lattice of the same order including the vertices.
    Collapsed axes give each point only once.

    :param region: Box2 or Region2
    :param density: Points per axis
    :return: Array of shape (n, 2)
    """
    region = as_region(region)
    density = int(density)
    if density < 2:
        raise RelaxError('Sample density must be at least 2.')
    if region.shape == Region2.RECTANGLE:
        box = region.box
        xs = np.linspace(box.l_x, box.u_x, density)
        ys = np.linspace(box.l_y, box.u_y, density)
        gx, gy = np.meshgrid(xs, ys, indexing='ij')
        points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    else:
        v0, v1, v2 = region.vertices
        steps = density - 1
        points = np.array([v0 + (i / steps) * (v1 - v0) + (j / steps) * (v2 - v0)
                           for i in range(density) for j in range(density - i)])
    _, first = np.unique(points, axis=0, return_index=True)
    return points[np.sort(first)]


def relax(region, kind, cfg):
    """
    Computes a sound plane pair with the method named in the configuration.
    Point regions get exact constant planes.

    :param region: Box2 or Region2
    :param kind: sigtanh or sigmul
    :param cfg: RelaxConfig
    :return: PlanePair
    """
    region = as_region(region)
    if region.is_point():
        return constant_planes(region, kind)
    if cfg.method == DISTANCE:
        return relax_distance(region, kind, cfg)
    if cfg.method == VOLUME:
        return relax_volume(region, kind, cfg)
    return relax_hybrid(region, kind, cfg)


def constant_planes(region, kind):
    region = as_region(region)
    x, y = region.centroid
    value = float(eval_bivariate(kind, x, y))
    return PlanePair(0.0, 0.0, value, 0.0, 0.0, value)


def relax_distance(region, kind, cfg, offset=True):
    """
    Solves the two distance programs: the lower plane maximizes its summed height
    below the surface at the sample points, the upper plane minimizes its summed height above it.

    :param region: Box2 or Region2
    :param kind: sigtanh or sigmul
    :param cfg: RelaxConfig
    :param offset: If true, the soundness offset is applied
    :return: PlanePair
    """
    region = as_region(region)
    frame = _LocalFrame(region)
    points, values = _samples(region, kind, cfg.sample_density)
    local = frame.to_local(points)
    design = np.column_stack([local, np.ones(len(local))])
    mean = design.mean(axis=0)
    bounds = frame.bounds()
    lower = _solve_or_raise(LpProblem(-mean, [(row, v, LE) for row, v in zip(design, values)], bounds))
    upper = _solve_or_raise(LpProblem(mean, [(row, v, GE) for row, v in zip(design, values)], bounds))
    pair = frame.to_global(lower.values, upper.values)
    if offset:
        pair = soundness_offset(pair, region, kind, cfg)
    return pair


def relax_volume(region, kind, cfg, offset=True):
    """
    Solves one program minimizing the prism volume, area * (z_c_upper - z_c_lower).
    Regions with zero area minimize the centroid height instead.

    :param region: Box2 or Region2, not a single point
    :param kind: sigtanh or sigmul
    :param cfg: RelaxConfig
    :param offset: If true, the soundness offset is applied
    :return: PlanePair
    """
    pair, _ = _solve_joint(as_region(region), kind, cfg, weight_height=1.0, weight_sum=0.0, use_area=True)
    if offset:
        pair = soundness_offset(pair, region, kind, cfg)
    return pair


def relax_hybrid(region, kind, cfg, offset=True):
    """
    Solves one program minimizing alpha * height + (1 - alpha) * sum,
    where height is the centroid gap between the planes and sum adds the absolute deviations
    of each plane's corner values from its centroid value.

    :param region: Box2 or Region2, not a single point
    :param kind: sigtanh or sigmul
    :param cfg: RelaxConfig
    :param offset: If true, the soundness offset is applied
    :return: PlanePair
    """
    pair, _ = _solve_joint(as_region(region), kind, cfg, weight_height=cfg.alpha,
                           weight_sum=1.0 - cfg.alpha, use_area=False)
    if offset:
        pair = soundness_offset(pair, region, kind, cfg)
    return pair


def soundness_offset(pair, region, kind, cfg=None):
    """
    Shifts the planes so that lower <= f <= upper holds on the whole region.
    The largest violation is bounded from above by grid evaluation plus a Lipschitz margin
    per grid cell; cells that may still hide a larger violation are split and re-evaluated.

    :param pair: PlanePair
    :param region: Box2 or Region2
    :param kind: sigtanh or sigmul
    :param cfg: RelaxConfig, for the grid settings
    :return: PlanePair
    """
    region = as_region(region)
    cfg = cfg or RelaxConfig()
    if not np.all(np.isfinite(pair)):
        raise RelaxError('Plane coefficients must be finite.')
    if region.is_point():
        x, y = region.centroid
        value = float(eval_bivariate(kind, x, y))
        delta_u = value - float(pair.upper(x, y))
        delta_l = float(pair.lower(x, y)) - value
    else:
        dfx, dfy = partial_ranges(kind, region.box)

        def above(points):
            return eval_bivariate(kind, points[:, 0], points[:, 1]) - pair.upper(points[:, 0], points[:, 1])

        def below(points):
            return pair.lower(points[:, 0], points[:, 1]) - eval_bivariate(kind, points[:, 0], points[:, 1])

        delta_u = _certified_max(above, region, _slope_bound(dfx, pair.A_u), _slope_bound(dfy, pair.B_u), cfg)
        delta_l = _certified_max(below, region, _slope_bound(dfx, pair.A_l), _slope_bound(dfy, pair.B_l), cfg)
    C_u = pair.C_u + delta_u if delta_u > 0 else pair.C_u
    C_l = pair.C_l - delta_l if delta_l > 0 else pair.C_l
    return pair._replace(C_l=C_l, C_u=C_u)


def partial_ranges(kind, box):
    """
    Interval bounds on the partial derivatives of f over a box.

    :param kind: sigtanh or sigmul
    :param box: Box2
    :return: Tuples (lo, hi) for df/dx and df/dy
    """
    sig = expit(np.array([box.l_x, box.u_x]))
    dsig = _bump_range(lambda v: expit(v) * (1 - expit(v)), box.l_x, box.u_x)
    if kind == SIG_TANH:
        dfx = _interval_product(dsig, (np.tanh(box.l_y), np.tanh(box.u_y)))
        sech = _bump_range(lambda v: 1 - np.tanh(v) ** 2, box.l_y, box.u_y)
        dfy = (sig[0] * sech[0], sig[1] * sech[1])
    elif kind == SIG_MUL:
        dfx = _interval_product(dsig, (box.l_y, box.u_y))
        dfy = (sig[0], sig[1])
    else:
        raise RelaxError('Unknown bivariate kind ' + str(kind) + '.')
    return dfx, dfy


def centroid_height(pair, region):
    """
    Signed gap between the upper and the lower plane at the centroid.
    """
    x, y = as_region(region).centroid
    return float(pair.upper(x, y) - pair.lower(x, y))


def prism_volume(pair, region):
    """
    Volume between the planes over the region: area times centroid height.
    Negative when the planes cross at the centroid.
    """
    region = as_region(region)
    return region.area * centroid_height(pair, region)


def surface_proxy(pair, region):
    """
    Sum of absolute deviations of the corner values from the centroid value,
    over the upper and the lower plane.
    """
    region = as_region(region)
    x, y = region.centroid
    corners = region.corners
    upper = np.sum(np.abs(pair.upper(corners[:, 0], corners[:, 1]) - pair.upper(x, y)))
    lower = np.sum(np.abs(pair.lower(corners[:, 0], corners[:, 1]) - pair.lower(x, y)))
    return float(upper + lower)


def hybrid_objective(pair, region, alpha=DEFAULT_ALPHA):
    return alpha * centroid_height(pair, region) + (1 - alpha) * surface_proxy(pair, region)


class _LocalFrame(object):
    """
    Coordinates centered on the region's bounding box and scaled to [-1, 1] per free axis.
    Plane coefficients on a collapsed axis are fixed to zero.
    """

    def __init__(self, region):
        box = region.box
        self.cx, self.cy = box.center
        self.flat_x, self.flat_y = box.flat_axes()
        self.sx = 1.0 if self.flat_x else 0.5 * (box.u_x - box.l_x)
        self.sy = 1.0 if self.flat_y else 0.5 * (box.u_y - box.l_y)

    def to_local(self, points):
        points = np.atleast_2d(points)
        local = np.column_stack([(points[:, 0] - self.cx) / self.sx, (points[:, 1] - self.cy) / self.sy])
        if self.flat_x:
            local[:, 0] = 0.0
        if self.flat_y:
            local[:, 1] = 0.0
        return local

    def bounds(self):
        free = (-np.inf, np.inf)
        fixed = (0.0, 0.0)
        return [fixed if self.flat_x else free, fixed if self.flat_y else free, free]

    def plane(self, coefficients):
        a, b, c = coefficients
        A = a / self.sx
        B = b / self.sy
        return A, B, c - A * self.cx - B * self.cy

    def to_global(self, lower, upper):
        return PlanePair.from_planes(self.plane(lower), self.plane(upper))


def _solve_joint(region, kind, cfg, weight_height, weight_sum, use_area):
    """
    Builds and solves the joint program over (a_l, b_l, c_l, a_u, b_u, c_u) in local coordinates.

    :return: PlanePair without offset and the optimal objective value
    """
    if region.is_point():
        raise RelaxError('The prism objective needs a region that is not a single point.')
    frame = _LocalFrame(region)
    points, values = _samples(region, kind, cfg.sample_density)
    local = frame.to_local(points)
    uc, vc = frame.to_local(np.array([region.centroid]))[0]
    scale = region.area if use_area and region.area > 0 else 1.0
    objective = weight_height * scale * np.array([-uc, -vc, -1.0, uc, vc, 1.0])
    constraints = list()
    for (u, v), value in zip(local, values):
        constraints.append((np.array([u, v, 1.0, 0.0, 0.0, 0.0]), value, LE))
        constraints.append((np.array([0.0, 0.0, 0.0, u, v, 1.0]), value, GE))
    problem = LpProblem(objective, constraints, frame.bounds() + frame.bounds())
    if weight_sum > 0:
        terms = list()
        for u, v in frame.to_local(region.corners):
            terms.append((np.array([0.0, 0.0, 0.0, u - uc, v - vc, 0.0]), 0.0))
            terms.append((np.array([u - uc, v - vc, 0.0, 0.0, 0.0, 0.0]), 0.0))
        problem = encode_abs_terms(problem, terms, [weight_sum] * len(terms))
    solution = _solve_or_raise(problem)
    pair = frame.to_global(solution.values[:3], solution.values[3:6])
    return pair, solution.objective_value


def _samples(region, kind, density):
    points = sample_points(region, density)
    return points, eval_bivariate(kind, points[:, 0], points[:, 1])


def _solve_or_raise(problem):
    solution = solve(problem)
    if solution.status != OPTIMAL:
        raise RelaxError('Relaxation program ended with status ' + solution.status + '.')
    return solution


def _certified_max(func, region, lip_x, lip_y, cfg):
    """
    Upper bound on the maximum of func over the region.
    A cell with center c and half-widths (hx, hy) cannot exceed
    func(c) + lip_x * hx + lip_y * hy.
    """
    box = region.box
    n = cfg.offset_grid
    xs = np.linspace(box.l_x, box.u_x, n)
    ys = np.linspace(box.l_y, box.u_y, n)
    gx, gy = np.meshgrid(xs, ys, indexing='ij')
    grid = np.concatenate([np.stack([gx.ravel(), gy.ravel()], axis=1), region.corners])
    inside = region.contains(grid)
    best = np.max(func(grid[inside])) if np.any(inside) else -np.inf
    hx = (box.u_x - box.l_x) / (2.0 * (n - 1))
    hy = (box.u_y - box.l_y) / (2.0 * (n - 1))
    cx = np.unique(xs[:-1] + hx)
    cy = np.unique(ys[:-1] + hy)
    mx, my = np.meshgrid(cx, cy, indexing='ij')
    centers = np.stack([mx.ravel(), my.ravel()], axis=1)
    bound = -np.inf
    for level in range(cfg.offset_rounds + 1):
        centers = centers[region.may_intersect(centers, hx, hy)]
        if len(centers) == 0:
            break
        values = func(centers)
        within = region.contains(centers)
        if np.any(within):
            best = max(best, np.max(values[within]))
        ceiling = values + lip_x * hx + lip_y * hy
        if level == cfg.offset_rounds or 4 * len(centers) > _MAX_CELLS:
            bound = max(bound, np.max(ceiling))
            break
        settled = ceiling <= best + cfg.offset_tol
        if np.any(settled):
            bound = max(bound, np.max(ceiling[settled]))
        centers = centers[~settled]
        hx *= 0.5
        hy *= 0.5
        shifts = np.unique(np.array([[sx * hx, sy * hy] for sx in (-1, 1) for sy in (-1, 1)]), axis=0)
        centers = (centers[:, None, :] + shifts[None, :, :]).reshape(-1, 2)
    return max(best, bound)


def _slope_bound(derivative, coefficient):
    lo, hi = derivative
    bound = max(abs(lo - coefficient), abs(hi - coefficient))
    return bound * (1 + 1e-9) + 1e-15


def _bump_range(func, lo, hi):
    """
    Range of a function that increases up to 0 and decreases afterwards.
    """
    peak = func(min(max(0.0, lo), hi))
    return min(func(lo), func(hi)), peak


def _interval_product(a, b):
    products = [a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1]]
    return min(products), max(products)


def _is_flat(lo, hi):
    return hi - lo <= _DEGENERATE * max(1.0, abs(lo), abs(hi))


def _signed_area(vertices):
    (x0, y0), (x1, y1), (x2, y2) = vertices
    return 0.5 * ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0))

"""
This file contains testing functions for the simplex solver in lp.py.
Results are compared against hand-solved programs, scipy's linprog
and the vertex enumeration oracle.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import unittest

import numpy as np
from scipy.optimize import linprog

from prismcert.lp import LpProblem, solve, encode_abs_terms, LpError, LE, GE, EQ, \
    OPTIMAL, INFEASIBLE, UNBOUNDED
from prismcert.oracle import lp_vertex_enumeration, random_lp


class TestLp(unittest.TestCase):
    """
    Tests the two-phase simplex method.
    """

    def test_textbook(self):
        """
        maximize x + y subject to x + 2y <= 4, 3x + y <= 6, x, y >= 0
        has its optimum 2.8 at (1.6, 1.2).
        """
        problem = LpProblem([-1, -1], [([1, 2], 4, LE), ([3, 1], 6, LE)])
        solution = solve(problem)
        self.assertEqual(solution.status, OPTIMAL)
        self.assertAlmostEqual(solution.objective_value, -2.8, places=9)
        self.assertTrue(np.allclose(solution.values, [1.6, 1.2], atol=1e-9))

    def test_bounds(self):
        """
        minimize x over [3, 5] gives 3.
        """
        solution = solve(LpProblem([1.0], [], [(3.0, 5.0)]))
        self.assertEqual(solution.status, OPTIMAL)
        self.assertAlmostEqual(solution.values[0], 3.0, places=12)

    def test_infeasible(self):
        """
        x >= 1 and x <= 0 has no solution.
        """
        solution = solve(LpProblem([1.0], [([1.0], 1.0, GE), ([1.0], 0.0, LE)]))
        self.assertEqual(solution.status, INFEASIBLE)
        self.assertIsNone(solution.values)

    def test_unbounded(self):
        """
        minimize -x with x >= 0 only is unbounded.
        """
        self.assertEqual(solve(LpProblem([-1.0], [])).status, UNBOUNDED)

    def test_free_variables_and_equalities(self):
        """
        Free variables and equality rows: minimize x - y with x + y = 1, -2 <= x - y.
        """
        problem = LpProblem([1, -1], [([1, 1], 1, EQ), ([1, -1], -2, GE)], [(-np.inf, np.inf)] * 2)
        solution = solve(problem)
        self.assertEqual(solution.status, OPTIMAL)
        self.assertAlmostEqual(solution.objective_value, -2.0, places=9)
        self.assertAlmostEqual(solution.values[0] + solution.values[1], 1.0, places=9)

    def test_redundant_equalities(self):
        """
        Duplicated equality rows are handled.
        """
        problem = LpProblem([1, 2], [([1, 1], 2, EQ), ([2, 2], 4, EQ)])
        solution = solve(problem)
        self.assertEqual(solution.status, OPTIMAL)
        self.assertAlmostEqual(solution.objective_value, 2.0, places=9)

    def test_abs_terms(self):
        """
        minimize |x - 2| + |x + 1| over free x has value 3 on [-1, 2].
        """
        problem = LpProblem([0.0], [], [(-np.inf, np.inf)])
        problem = encode_abs_terms(problem, [([1.0], -2.0), ([1.0], 1.0)], [1.0, 1.0])
        solution = solve(problem)
        self.assertEqual(solution.status, OPTIMAL)
        self.assertAlmostEqual(solution.objective_value, 3.0, places=9)
        self.assertTrue(-1 - 1e-9 <= solution.values[0] <= 2 + 1e-9)

    def test_negative_abs_weight(self):
        """
        Negative weights on absolute values would make the program nonconvex and are rejected.
        """
        with self.assertRaises(LpError):
            encode_abs_terms(LpProblem([0.0], []), [([1.0], 0.0)], [-1.0])

    def test_malformed(self):
        """
        Constraint rows must match the number of variables.
        """
        with self.assertRaises(LpError):
            LpProblem([1.0, 1.0], [([1.0], 1.0, LE)])

    def test_linprog(self):
        """
        Seeded bounded programs agree with scipy's linprog.
        """
        rng = np.random.default_rng(3)
        for _ in range(50):
            problem = random_lp(rng, 4, 6)
            ours = solve(problem)
            A_ub, b_ub, A_eq, b_eq = list(), list(), list(), list()
            for row, rhs, sense in problem.constraints:
                if sense == LE:
                    A_ub.append(row)
                    b_ub.append(rhs)
                elif sense == GE:
                    A_ub.append(-row)
                    b_ub.append(-rhs)
                else:
                    A_eq.append(row)
                    b_eq.append(rhs)
            reference = linprog(problem.objective, A_ub=np.array(A_ub) if A_ub else None,
                                b_ub=b_ub if b_ub else None, A_eq=np.array(A_eq) if A_eq else None,
                                b_eq=b_eq if b_eq else None, bounds=problem.bounds, method='highs')
            if reference.status == 0:
                self.assertEqual(ours.status, OPTIMAL)
                self.assertAlmostEqual(ours.objective_value, reference.fun, places=6)
            elif reference.status == 2:
                self.assertEqual(ours.status, INFEASIBLE)

    def test_vertex_enumeration(self):
        """
        Seeded programs with up to three variables agree with vertex enumeration,
        both in status and in the optimal value.
        """
        rng = np.random.default_rng(4)
        for _ in range(100):
            problem = random_lp(rng, int(rng.integers(1, 4)), int(rng.integers(1, 6)))
            ours = solve(problem)
            oracle = lp_vertex_enumeration(problem)
            self.assertEqual(ours.status, oracle.status)
            if oracle.status == OPTIMAL:
                self.assertLessEqual(abs(ours.objective_value - oracle.objective_value),
                                     1e-7 * max(1.0, abs(oracle.objective_value)))

    def test_oracle_unbounded(self):
        """
        The oracle detects a descending ray: minimize -x - y with x - y <= 1, x, y >= 0.
        """
        problem = LpProblem([-1.0, -1.0], [([1.0, -1.0], 1.0, LE)])
        self.assertEqual(lp_vertex_enumeration(problem).status, UNBOUNDED)
        self.assertEqual(solve(problem).status, UNBOUNDED)


if __name__ == '__main__':
    unittest.main()

"""
This file contains testing functions for the command-line commands in main.py.
Each test runs prismcert end to end on a small generated network.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from prismcert.main import main, set_prismcert
from prismcert.verifier import REPORT_COLUMNS, ROBUST

fast = ['-density', '4', '-grid', '16', '-core', '1']


class TestMain(unittest.TestCase):
    """
    Tests the prismcert commands.
    """

    def setUp(self):
        self.folder = tempfile.TemporaryDirectory()
        self.prefix = os.path.join(self.folder.name, 'toy')
        code = main(['gen-model', '-o', self.prefix, '-shape', '2', '2', '2', '1', '2', '-size', '4'])
        self.assertEqual(code, 0)

    def tearDown(self):
        self.folder.cleanup()

    def test_gen_model(self):
        """
        gen-model writes a model document and a dataset.
        """
        self.assertTrue(os.path.isfile(self.prefix + '_model.json'))
        self.assertTrue(os.path.isfile(self.prefix + '_data.jsonl'))

    def test_verify(self):
        """
        verify writes one report row per sample and epsilon, plus a summary.
        Generated labels are the network's predictions, so epsilon = 0 certifies every sample.
        """
        code = main(['verify', '-m', self.prefix + '_model.json', '-d', self.prefix + '_data.jsonl',
                     '-o', self.prefix, '-e', '0', '0.01', '-n', '3'] + fast)
        self.assertEqual(code, 0)
        report = pd.read_csv(self.prefix + '_report.csv')
        self.assertEqual(list(report.columns), REPORT_COLUMNS)
        self.assertEqual(len(report), 6)
        self.assertTrue(np.all(report[report['epsilon'] == 0]['verdict'] == ROBUST))
        summary = pd.read_csv(self.prefix + '_summary.csv')
        self.assertEqual(len(summary), 2)

    def test_missing_model(self):
        """
        A missing model ends the run with an error code and no report.
        """
        other = os.path.join(self.folder.name, 'missing')
        code = main(['verify', '-m', other + '_model.json', '-d', self.prefix + '_data.jsonl', '-o', other] + fast)
        self.assertEqual(code, 1)
        self.assertFalse(os.path.isfile(other + '_report.csv'))

    def test_alpha_sweep(self):
        """
        sweep-alpha writes one row per alpha and epsilon and marks one best alpha per epsilon.
        """
        code = main(['sweep-alpha', '-m', self.prefix + '_model.json', '-d', self.prefix + '_data.jsonl',
                     '-o', self.prefix, '-e', '0.01', '-n', '2', '-step', '0.5'] + fast)
        self.assertEqual(code, 0)
        curve = pd.read_csv(self.prefix + '_alpha_sweep.csv')
        self.assertEqual(list(curve['alpha']), [0.0, 0.5, 1.0])
        self.assertEqual(int(curve['best'].sum()), 1)

    def test_strategy_sweep(self):
        """
        sweep-strategy compares each strategy with the undivided relaxation.
        """
        code = main(['sweep-strategy', '-m', self.prefix + '_model.json', '-d', self.prefix + '_data.jsonl',
                     '-o', self.prefix, '-e', '0.05', '-n', '2', '-strategies', '2-rec-vec', '-iters', '2'] + fast)
        self.assertEqual(code, 0)
        summary = pd.read_csv(self.prefix + '_strategy_sweep.csv')
        self.assertEqual(sorted(summary['strategy']), ['2-rec-vec', 'none'])
        self.assertTrue(os.path.isfile(self.prefix + '_comparison.csv'))

    def test_check(self):
        """
        check passes on a few seeded cases and writes one row per check.
        """
        code = main(['check', '-o', self.prefix, '-cases', '10'] + fast)
        self.assertEqual(code, 0)
        checks = pd.read_csv(self.prefix + '_check.csv')
        self.assertEqual(int(checks['failures'].sum()), 0)
        self.assertIn('prism_volume', list(checks['check']))
        self.assertIn('identities_hybrid_sigtanh', list(checks['check']))

    def test_parser(self):
        """
        Unknown commands are rejected by the parser.
        """
        with self.assertRaises(SystemExit):
            set_prismcert().parse_args(['train'])


if __name__ == '__main__':
    unittest.main()

"""
This file contains testing functions for the report summaries in stats.py.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import unittest

import numpy as np
import pandas as pd

from prismcert.stats import summarize_report, compare_margins, is_monotone
from prismcert.verifier import REPORT_COLUMNS, ROBUST, UNKNOWN, MISCLASSIFIED, TIMEOUT


def _report(verdicts, margins, epsilon, strategy='none'):
    rows = list()
    for i, (verdict, value) in enumerate(zip(verdicts, margins)):
        rows.append({'sample_index': i, 'true_label': 0, 'verdict': verdict, 'min_margin': value,
                     'worst_label': 1, 'elapsed_s': 0.5, 'method': 'hybrid', 'alpha': 0.674,
                     'strategy': strategy, 'epsilon': epsilon})
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)


report = pd.concat([_report([ROBUST, ROBUST, UNKNOWN, MISCLASSIFIED], [0.3, 0.1, -0.2, np.nan], 0.01),
                    _report([ROBUST, UNKNOWN, TIMEOUT, MISCLASSIFIED], [0.1, -0.1, -0.5, np.nan], 0.02)],
                   ignore_index=True)


class TestStats(unittest.TestCase):
    """
    Tests summaries and comparisons of verification reports.
    """

    def test_summary(self):
        """
        Accuracy counts misclassified samples and timeouts as failures.
        """
        summary = summarize_report(report)
        self.assertEqual(len(summary), 2)
        first = summary[summary['epsilon'] == 0.01].iloc[0]
        self.assertEqual(first['robust'], 2)
        self.assertEqual(first['misclassified'], 1)
        self.assertAlmostEqual(first['accuracy'], 0.5)
        second = summary[summary['epsilon'] == 0.02].iloc[0]
        self.assertEqual(second['timeouts'], 1)
        self.assertAlmostEqual(second['accuracy'], 0.25)

    def test_monotone(self):
        """
        Accuracy that drops with epsilon is monotone; accuracy that rises is not.
        """
        summary = summarize_report(report)
        self.assertTrue(is_monotone(summary))
        summary.loc[summary['epsilon'] == 0.02, 'accuracy'] = 0.9
        self.assertFalse(is_monotone(summary))

    def test_compare_margins(self):
        """
        Margins that are larger for every sample give fraction_greater 1 and a positive mean difference.
        """
        base = _report([UNKNOWN] * 8, np.linspace(-1, -0.3, 8), 0.01)
        better = _report([UNKNOWN] * 8, np.linspace(-1, -0.3, 8) + np.linspace(0.05, 0.4, 8), 0.01, '4-rec')
        comparison = compare_margins(better, base)
        self.assertEqual(comparison['pairs'][0], 8)
        self.assertEqual(comparison['fraction_greater'][0], 1.0)
        self.assertGreater(comparison['mean_difference'][0], 0)
        self.assertLess(comparison['P'][0], 0.05)
        self.assertIn('P.adj', comparison.columns)

    def test_identical_margins(self):
        """
        Identical reports differ nowhere and get a p-value of 1.
        """
        comparison = compare_margins(report, report)
        self.assertTrue(np.all(comparison['P'] == 1.0))
        self.assertTrue(np.all(comparison['fraction_greater'] == 0.0))


if __name__ == '__main__':
    unittest.main()

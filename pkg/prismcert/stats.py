"""
The functions in this module take verification reports
and summarize or compare them.

1. summarize_report: certified accuracy per epsilon and configuration
2. compare_margins: paired comparison of the margins of two configurations on the same samples
3. is_monotone: checks that accuracy does not grow with epsilon

The report dataframes have the columns written by verifier.verify_dataset.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import logging.handlers
from warnings import catch_warnings, simplefilter

import numpy as np
import pandas as pd
from scipy.stats import wilcoxon
from statsmodels.stats.multitest import multipletests

from prismcert.verifier import ROBUST, MISCLASSIFIED, TIMEOUT

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CONFIG_COLUMNS = ['epsilon', 'method', 'alpha', 'strategy']


def summarize_report(report):
    """
    Counts verdicts per epsilon and configuration.
    Accuracy is the share of all selected samples that are certified robust,
    so misclassified samples and timeouts count as failures.

    :param report: Dataframe from verify_dataset, possibly concatenated over several runs
    :return: Dataframe with samples, robust, misclassified, timeouts, accuracy and mean_elapsed_s
    """
    rows = list()
    for keys, group in report.groupby(CONFIG_COLUMNS, sort=True):
        row = dict(zip(CONFIG_COLUMNS, keys))
        row['samples'] = len(group)
        row['robust'] = int(np.sum(group['verdict'] == ROBUST))
        row['misclassified'] = int(np.sum(group['verdict'] == MISCLASSIFIED))
        row['timeouts'] = int(np.sum(group['verdict'] == TIMEOUT))
        row['accuracy'] = row['robust'] / row['samples']
        row['mean_elapsed_s'] = float(group['elapsed_s'].mean())
        rows.append(row)
    return pd.DataFrame(rows, columns=CONFIG_COLUMNS + ['samples', 'robust', 'misclassified', 'timeouts',
                                                        'accuracy', 'mean_elapsed_s'])


def compare_margins(first, second, mc='fdr_bh'):
    """
    Compares the minimum margins of two reports sample by sample, per epsilon.
    A Wilcoxon signed-rank test checks whether the margins differ;
    p-values across epsilon values are corrected for multiple testing.

    :param first: Report of the first configuration
    :param second: Report of the second configuration on the same samples
    :param mc: Multiple-testing correction accepted by statsmodels' multipletests
    :return: Dataframe with epsilon, pairs, fraction_greater, mean_difference, P and P.adj
    """
    keys = ['sample_index', 'epsilon']
    merged = pd.merge(first[keys + ['min_margin']], second[keys + ['min_margin']], on=keys,
                      suffixes=('_first', '_second'))
    merged = merged.dropna()
    rows = list()
    for epsilon, group in merged.groupby('epsilon', sort=True):
        difference = group['min_margin_first'].values - group['min_margin_second'].values
        if len(difference) == 0 or np.all(difference == 0):
            p = 1.0
        else:
            with catch_warnings():
                simplefilter('ignore')
                p = float(wilcoxon(difference)[1])
        rows.append({'epsilon': epsilon,
                     'pairs': len(difference),
                     'fraction_greater': float(np.mean(difference > 0)),
                     'mean_difference': float(np.mean(difference)),
                     'P': p})
    statsframe = pd.DataFrame(rows, columns=['epsilon', 'pairs', 'fraction_greater', 'mean_difference', 'P'])
    if len(statsframe) > 0:
        statsframe['P.adj'] = multipletests(statsframe['P'], method=mc)[1]
    else:
        statsframe['P.adj'] = pd.Series(dtype=float)
    return statsframe


def is_monotone(summary):
    """
    Checks that accuracy is nonincreasing in epsilon for every configuration.

    :param summary: Dataframe from summarize_report
    :return: True if no configuration gains accuracy at a larger epsilon
    """
    monotone = True
    for keys, group in summary.groupby(['method', 'alpha', 'strategy'], sort=True):
        accuracy = group.sort_values('epsilon')['accuracy'].values
        if np.any(np.diff(accuracy) > 0):
            logger.warning('Accuracy increases with epsilon for configuration ' + str(keys) + '.')
            monotone = False
    return monotone

"""
The utils module contains functions used by other modules for multiprocessing.

"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import logging.handlers
import os
from multiprocessing import cpu_count

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CORES_VARIABLE = 'PRISMCERT_CORES'


def _verify_parallel(values):
    """
    Verifies a single sample for a worker pool.
    Errors are logged and reported as an Unknown verdict,
    so one failing sample does not end the run.

    :param values: Dictionary with net, sample, label, spec, cfg and index
    :return: VerificationResult
    """
    from prismcert.verifier import verify_sample, VerificationResult, UNKNOWN
    try:
        return verify_sample(net=values['net'], sample=values['sample'], true_label=values['label'],
                             spec=values['spec'], cfg=values['cfg'], sample_index=values['index'])
    except ValueError:
        logger.error('Could not verify sample ' + str(values.get('index')) + '.', exc_info=True)
        return VerificationResult(UNKNOWN, dict(), 0.0, values['cfg'].config_echo(),
                                  values['index'], values['label'])


def default_cores(requested=None):
    """
    Number of worker processes: the requested number,
    else the PRISMCERT_CORES environment variable, else all but one core.

    :param requested: Number of cores given on the command line
    :return: Positive integer
    """
    if requested:
        return max(1, int(requested))
    value = os.environ.get(CORES_VARIABLE)
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning(CORES_VARIABLE + ' is not an integer: ' + value)
    return max(1, cpu_count() - 1)

"""
This file contains testing functions for the robustness queries in verifier.py.
Certified margins are compared with the exact logits of sampled inputs.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import unittest

import numpy as np

from prismcert.model import random_network, forward, predict, ModelError
from prismcert.relax import RelaxConfig
from prismcert.refine import Schedule, REC_VEC_2
from prismcert.verifier import PerturbationSpec, VerifyConfig, verify_sample, verify_dataset, margin, label_objective, \
    REPORT_COLUMNS, ROBUST, MISCLASSIFIED, TIMEOUT, UNKNOWN
from prismcert.domain import DomainError

relax_cfg = RelaxConfig(sample_density=4, offset_grid=16, offset_rounds=2)
cfg = VerifyConfig(relax=relax_cfg)
net = random_network(num_frames=2, input_dim=2, hidden_dim=3, num_layers=1, num_classes=3, seed=3)
rng = np.random.default_rng(8)
sequences = rng.uniform(-1, 1, (4, 2, 2))
labels = predict(net, sequences)


def _sampled_margins(sample, label, epsilon, n=2000):
    perturbed = sample + np.random.default_rng(9).uniform(-epsilon, epsilon, (n,) + sample.shape)
    logits = forward(net, perturbed)
    return {p: float(np.min(logits[:, label] - logits[:, p])) for p in range(net.num_classes) if p != label}


class TestVerifier(unittest.TestCase):
    """
    Tests single-sample and dataset verification.
    """

    def test_misclassified(self):
        """
        A sample with the wrong label is reported as misclassified without margins.
        """
        wrong = (int(labels[0]) + 1) % net.num_classes
        result = verify_sample(net, sequences[0], wrong, PerturbationSpec(0.01), cfg)
        self.assertEqual(result.verdict, MISCLASSIFIED)
        self.assertEqual(result.margins, dict())

    def test_zero_epsilon(self):
        """
        Without perturbation the margins are the exact logit differences and the sample is robust.
        """
        sample, label = sequences[1], int(labels[1])
        result = verify_sample(net, sample, label, PerturbationSpec(0.0), cfg)
        logits = forward(net, sample)
        self.assertEqual(result.verdict, ROBUST)
        for p, value in result.margins.items():
            self.assertAlmostEqual(value, logits[label] - logits[p], places=6)

    def test_margin_is_lower_bound(self):
        """
        The certified margin does not exceed the smallest sampled logit difference.
        """
        sample, label = sequences[2], int(labels[2])
        sampled = _sampled_margins(sample, label, 0.1)
        for p, value in sampled.items():
            self.assertLessEqual(margin(net, sample, label, p, PerturbationSpec(0.1), relax_cfg), value + 1e-9)

    def test_identical_rows(self):
        """
        Two labels with identical classifier rows have a margin of exactly zero.
        """
        other = random_network(num_frames=2, input_dim=2, hidden_dim=3, num_layers=1, num_classes=3, seed=3)
        other.W_out[1] = other.W_out[0]
        other.b_out[1] = other.b_out[0]
        value = margin(other, sequences[0], 0, 1, PerturbationSpec(0.2), relax_cfg)
        self.assertEqual(value, 0.0)

    def test_refinement_improves(self):
        """
        Refined margins are at least the single-plane margins and remain sound.
        """
        sample, label = sequences[3], int(labels[3])
        spec = PerturbationSpec(0.3)
        single = verify_sample(net, sample, label, spec, cfg)
        refined_cfg = VerifyConfig(relax=relax_cfg, strategy=REC_VEC_2, schedule=Schedule(max_iters=3),
                                   refine_all_labels=True)
        refined = verify_sample(net, sample, label, spec, refined_cfg)
        sampled = _sampled_margins(sample, label, 0.3)
        for p in single.margins:
            self.assertGreaterEqual(refined.margins[p], single.margins[p])
            self.assertLessEqual(refined.margins[p], sampled[p] + 1e-9)

    def test_objective_depends_on_weights_only(self):
        """
        The refinement objective gives the same margin for the same weights,
        whatever weights were evaluated in between.
        """
        sample, label = sequences[3], int(labels[3])
        refined_cfg = VerifyConfig(relax=relax_cfg, strategy=REC_VEC_2)
        for p in range(net.num_classes):
            if p == label:
                continue
            objective, init = label_objective(net, sample, label, p, PerturbationSpec(0.2), refined_cfg)
            first = objective(init)
            for i in range(0, len(init), 9):
                objective(init.nudge(i, 0.3))
                objective(init.nudge(i, -0.3))
            self.assertEqual(objective(init), first)
            single = margin(net, sample, label, p, PerturbationSpec(0.2), relax_cfg)
            self.assertAlmostEqual(first, single, places=9)

    def test_label_objective_needs_strategy(self):
        """
        Without a division strategy there are no weights to optimize.
        """
        with self.assertRaises(ValueError):
            label_objective(net, sequences[0], int(labels[0]), (int(labels[0]) + 1) % 3, PerturbationSpec(0.1), cfg)

    def test_parallel_report(self):
        """
        Two worker processes give the same report as one.
        """
        serial = verify_dataset(net, sequences, labels, PerturbationSpec(0.05), cfg, num_samples=4)
        parallel = verify_dataset(net, sequences, labels, PerturbationSpec(0.05), cfg, num_samples=4, core=2)
        self.assertTrue(serial.drop(columns='elapsed_s').equals(parallel.drop(columns='elapsed_s')))

    def test_timeout(self):
        """
        A tiny time limit ends the sample with a timeout verdict.
        """
        tight = VerifyConfig(relax=relax_cfg, timeout=1e-9)
        result = verify_sample(net, sequences[0], int(labels[0]), PerturbationSpec(0.1), tight)
        self.assertEqual(result.verdict, TIMEOUT)

    def test_invalid_inputs(self):
        """
        Unknown labels, negative radii and unordered clip ranges are rejected.
        """
        with self.assertRaises(ModelError):
            verify_sample(net, sequences[0], 5, PerturbationSpec(0.1), cfg)
        with self.assertRaises(DomainError):
            PerturbationSpec(-0.1)
        with self.assertRaises(DomainError):
            PerturbationSpec(0.1, clip_range=(1.0, 0.0))
        with self.assertRaises(ValueError):
            margin(net, sequences[0], 0, 0, PerturbationSpec(0.1), relax_cfg)

    def test_dataset_report(self):
        """
        The report has one row per selected sample, sorted by index, with the expected columns.
        """
        report = verify_dataset(net, sequences, labels, PerturbationSpec(0.0), cfg, num_samples=3, seed=1)
        self.assertEqual(list(report.columns), REPORT_COLUMNS)
        self.assertEqual(len(report), 3)
        self.assertTrue(report['sample_index'].is_monotonic_increasing)
        self.assertTrue(np.all(report['verdict'] == ROBUST))
        self.assertTrue(np.all(report['epsilon'] == 0.0))

    def test_dataset_misclassified(self):
        """
        A dataset with only wrong labels gives misclassified rows without margins.
        """
        wrong = (labels + 1) % net.num_classes
        report = verify_dataset(net, sequences, wrong, PerturbationSpec(0.05), cfg, num_samples=10)
        self.assertEqual(len(report), 4)
        self.assertTrue(np.all(report['verdict'] == MISCLASSIFIED))
        self.assertTrue(np.all(report['min_margin'].isna()))
        self.assertTrue(np.all(report['worst_label'] == -1))

    def test_failing_sample(self):
        """
        A sample whose label is out of range is logged and reported as unknown.
        """
        report = verify_dataset(net, sequences[:1], [7], PerturbationSpec(0.05), cfg)
        self.assertEqual(report['verdict'][0], UNKNOWN)


if __name__ == '__main__':
    unittest.main()

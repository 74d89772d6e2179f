"""
This file contains testing functions for the LSTM network representation in model.py:
document parsing, shape validation and exact inference.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import json
import math
import os
import tempfile
import unittest

import numpy as np

from prismcert.model import load_network, dump_network, write_network, read_network, random_network, \
    cell_step, forward, predict, sigmoid, CellState, LstmLayer, ModelError

net = random_network(num_frames=3, input_dim=2, hidden_dim=3, num_layers=2, num_classes=4, seed=1)


def _zero_layer(hidden, width):
    zeros = np.zeros((hidden, hidden + width))
    return LstmLayer(zeros, zeros, zeros, zeros, np.zeros(hidden), np.zeros(hidden),
                     np.zeros(hidden), np.zeros(hidden))


def _scalar_step(layer, h, c, x):
    joint = list(h) + list(x)

    def gate(W, b, j):
        return sum(W[j][k] * joint[k] for k in range(len(joint))) + b[j]

    new_h, new_c = list(), list()
    for j in range(len(h)):
        f = 1.0 / (1.0 + math.exp(-gate(layer.W_f, layer.b_f, j)))
        i = 1.0 / (1.0 + math.exp(-gate(layer.W_i, layer.b_i, j)))
        c_hat = math.tanh(gate(layer.W_C, layer.b_C, j))
        o = 1.0 / (1.0 + math.exp(-gate(layer.W_o, layer.b_o, j)))
        new_c.append(f * c[j] + i * c_hat)
        new_h.append(o * math.tanh(new_c[j]))
    return new_h, new_c


class TestModel(unittest.TestCase):
    """
    Tests parsing and inference of LSTM networks.
    """

    def test_zero_layer(self):
        """
        A layer without weights or biases keeps h and c at zero.
        """
        layer = _zero_layer(2, 1)
        state = cell_step(layer, CellState(np.zeros(2), np.zeros(2)), np.array([0.7]))
        self.assertTrue(np.array_equal(state.h, np.zeros(2)))
        self.assertTrue(np.array_equal(state.c, np.zeros(2)))

    def test_single_unit_step(self):
        """
        With all gate weights 1 and biases 0, one unit with h = c = 0 and x = 1
        gives c = sigmoid(1) * tanh(1) and h = sigmoid(1) * tanh(c).
        """
        ones = np.ones((1, 2))
        layer = LstmLayer(ones, ones, ones, ones, [0.0], [0.0], [0.0], [0.0])
        state = cell_step(layer, CellState(np.zeros(1), np.zeros(1)), np.array([1.0]))
        c = sigmoid(1.0) * np.tanh(1.0)
        self.assertAlmostEqual(state.c[0], c, places=12)
        self.assertAlmostEqual(state.h[0], sigmoid(1.0) * np.tanh(c), places=12)

    def test_step_matches_scalar_update(self):
        """
        A seeded 2-unit cell update equals the gate equations worked out one scalar at a time.
        """
        rng = np.random.default_rng(21)
        layer = random_network(num_frames=1, input_dim=3, hidden_dim=2, num_layers=1, num_classes=2,
                               seed=4).layers[0]
        prev = CellState(rng.normal(0, 1, 2), rng.normal(0, 1, 2))
        x_t = rng.normal(0, 1, 3)
        state = cell_step(layer, prev, x_t)
        h, c = _scalar_step(layer, list(prev.h), list(prev.c), list(x_t))
        for j in range(2):
            self.assertAlmostEqual(state.h[j], h[j], places=12)
            self.assertAlmostEqual(state.c[j], c[j], places=12)

    def test_forward_matches_unrolled(self):
        """
        A 2-frame, 2-layer network gives the logits of the frame-by-frame scalar recomputation.
        """
        two = random_network(num_frames=2, input_dim=2, hidden_dim=3, num_layers=2, num_classes=3, seed=8)
        sequence = np.random.default_rng(22).uniform(-1, 1, (2, 2))
        states = [([0.0] * 3, [0.0] * 3) for _ in two.layers]
        for t in range(2):
            signal = list(sequence[t])
            for k, layer in enumerate(two.layers):
                states[k] = _scalar_step(layer, states[k][0], states[k][1], signal)
                signal = states[k][0]
        top = states[-1][0]
        expected = [sum(two.W_out[p][j] * top[j] for j in range(3)) + two.b_out[p] for p in range(3)]
        self.assertTrue(np.allclose(forward(two, sequence), expected, atol=1e-12))

    def test_forget_gate_saturates(self):
        """
        With zero weights and a large forget bias the cell state is carried over unchanged.
        """
        zeros = np.zeros((2, 3))
        layer = LstmLayer(zeros, zeros, zeros, zeros, np.full(2, 40.0), np.zeros(2), np.zeros(2), np.zeros(2))
        prev = CellState(np.zeros(2), np.array([0.8, -1.3]))
        state = cell_step(layer, prev, np.array([0.5]))
        self.assertTrue(np.allclose(state.c, prev.c, atol=1e-12))

    def test_forget_gate_monotone(self):
        """
        Raising the forget bias entrywise never lowers the forget gate.
        """
        rng = np.random.default_rng(23)
        layer = net.layers[0]
        joint = rng.normal(0, 2, (50, layer.hidden_dim + layer.input_dim))
        previous = sigmoid(joint @ layer.W_f.T + layer.b_f)
        for _ in range(10):
            b_f = layer.b_f + rng.uniform(0, 3, layer.hidden_dim)
            raised = sigmoid(joint @ layer.W_f.T + b_f)
            self.assertTrue(np.all(raised >= previous))

    def test_dump_load_exact(self):
        """
        A dumped network reads back with identical tensors and identical logits.
        """
        other = load_network(dump_network(net))
        x = np.random.default_rng(0).normal(0, 1, (3, 2))
        self.assertTrue(np.array_equal(forward(net, x), forward(other, x)))
        self.assertTrue(np.array_equal(net.layers[1].W_o, other.layers[1].W_o))

    def test_write_read(self):
        """
        Networks written to disk read back unchanged.
        """
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'net.json')
            write_network(net, path)
            other = read_network(path)
        self.assertTrue(np.array_equal(net.W_out, other.W_out))

    def test_shape_mismatch(self):
        """
        A gate matrix with the wrong shape is rejected with a message naming the tensor.
        """
        data = json.loads(dump_network(net))
        data['layers'][0]['W_i'] = np.zeros((3, 4)).tolist()
        with self.assertRaises(ModelError) as context:
            load_network(json.dumps(data))
        self.assertIn('W_i', str(context.exception))

    def test_non_finite(self):
        """
        Non-finite weights are rejected.
        """
        data = json.loads(dump_network(net))
        data['classifier']['b_out'][0] = float('nan')
        with self.assertRaises(ModelError):
            load_network(json.dumps(data))

    def test_batch_forward(self):
        """
        Forward inference over a batch equals inference sample by sample.
        """
        batch = np.random.default_rng(2).normal(0, 1, (5, 3, 2))
        logits = forward(net, batch)
        for k in range(5):
            self.assertTrue(np.allclose(logits[k], forward(net, batch[k]), atol=1e-12))
        self.assertTrue(np.array_equal(predict(net, batch), np.argmax(logits, axis=1)))

    def test_wrong_sequence_shape(self):
        """
        Sequences with the wrong number of frames are rejected.
        """
        with self.assertRaises(ModelError):
            forward(net, np.zeros((2, 2)))


if __name__ == '__main__':
    unittest.main()

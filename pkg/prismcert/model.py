"""
The model module contains the LSTM network representation used by prismcert.
Networks are read from a JSON document with the following fields:
version, num_frames, input_dim, layers and classifier.
Each layer holds the four gate matrices W_f, W_i, W_C, W_o and their biases.
Gate matrices act on the concatenation [h_{t-1}, x_t], so their shape is
hidden_dim x (hidden_dim + layer input dimension).

Inference is exact (double precision) and is used as ground truth
for the verifier and the attack oracle.
The classifier is applied to the hidden state of the last layer after the final frame.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import json
import logging.handlers
from collections import namedtuple

import numpy as np
from scipy.special import expit

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

FORMAT_VERSION = 1
GATES = ('W_f', 'W_i', 'W_C', 'W_o')
BIASES = ('b_f', 'b_i', 'b_C', 'b_o')

CellState = namedtuple('CellState', ['h', 'c'])


class ModelError(ValueError):
    """Raised when a model document or an input does not match the network shapes."""


class LstmLayer(object):
    """
    Weights and biases of a single LSTM layer.
    Attribute names follow the gate names: f (forget), i (input), C (candidate), o (output).
    """

    def __init__(self, W_f, W_i, W_C, W_o, b_f, b_i, b_C, b_o):
        self.W_f = _as_matrix(W_f, 'W_f')
        self.W_i = _as_matrix(W_i, 'W_i')
        self.W_C = _as_matrix(W_C, 'W_C')
        self.W_o = _as_matrix(W_o, 'W_o')
        self.b_f = _as_vector(b_f, 'b_f')
        self.b_i = _as_vector(b_i, 'b_i')
        self.b_C = _as_vector(b_C, 'b_C')
        self.b_o = _as_vector(b_o, 'b_o')
        shape = self.W_f.shape
        for name in GATES:
            if getattr(self, name).shape != shape:
                raise ModelError('Tensor ' + name + ' has shape ' + str(getattr(self, name).shape) +
                                 ' but W_f has shape ' + str(shape) + '.')
        if shape[1] <= shape[0]:
            raise ModelError('Tensor W_f has ' + str(shape[1]) + ' columns; expected hidden_dim (' +
                             str(shape[0]) + ') plus a positive input dimension.')
        for name in BIASES:
            if len(getattr(self, name)) != shape[0]:
                raise ModelError('Tensor ' + name + ' has length ' + str(len(getattr(self, name))) +
                                 ', expected hidden_dim ' + str(shape[0]) + '.')

    @property
    def hidden_dim(self):
        return self.W_f.shape[0]

    @property
    def input_dim(self):
        return self.W_f.shape[1] - self.W_f.shape[0]

    def gates(self):
        """
        Returns the gate parameters in the order f, i, C, o.

        :return: List of (matrix, bias) tuples
        """
        return [(self.W_f, self.b_f), (self.W_i, self.b_i), (self.W_C, self.b_C), (self.W_o, self.b_o)]


class LstmNetwork(object):
    """
    Stack of LSTM layers followed by an affine classifier on the last hidden state.
    The network is not modified after construction and can be shared between workers.
    """

    def __init__(self, layers, W_out, b_out, num_frames, input_dim):
        if len(layers) == 0:
            raise ModelError('A network needs at least one layer.')
        self.layers = list(layers)
        self.W_out = _as_matrix(W_out, 'W_out')
        self.b_out = _as_vector(b_out, 'b_out')
        self.num_frames = int(num_frames)
        self.input_dim = int(input_dim)
        if self.num_frames < 1:
            raise ModelError('num_frames must be positive, got ' + str(num_frames) + '.')
        expected = self.input_dim
        for k, layer in enumerate(self.layers):
            if layer.input_dim != expected:
                raise ModelError('Tensor layers[' + str(k) + '].W_f expects inputs of dimension ' +
                                 str(layer.input_dim) + ' but receives ' + str(expected) + '.')
            expected = layer.hidden_dim
        if self.W_out.shape[1] != expected:
            raise ModelError('Tensor W_out has ' + str(self.W_out.shape[1]) +
                             ' columns, expected the last hidden_dim ' + str(expected) + '.')
        if len(self.b_out) != self.W_out.shape[0]:
            raise ModelError('Tensor b_out has length ' + str(len(self.b_out)) +
                             ', expected ' + str(self.W_out.shape[0]) + ' classes.')

    @property
    def hidden_dim(self):
        return self.layers[-1].hidden_dim

    @property
    def num_layers(self):
        return len(self.layers)

    @property
    def num_classes(self):
        return self.W_out.shape[0]


def load_network(document):
    """
    Parses a serialized model document into an LstmNetwork.

    :param document: Bytes or string with the JSON model document
    :return: LstmNetwork
    """
    if isinstance(document, bytes):
        document = document.decode('utf-8')
    try:
        data = json.loads(document)
    except ValueError as err:
        raise ModelError('Model document is not valid JSON: ' + str(err))
    for field in ('num_frames', 'input_dim', 'layers', 'classifier'):
        if field not in data:
            raise ModelError('Model document lacks the field ' + field + '.')
    if int(data.get('version', FORMAT_VERSION)) != FORMAT_VERSION:
        raise ModelError('Unsupported model version ' + str(data['version']) + '.')
    layers = list()
    for k, entry in enumerate(data['layers']):
        missing = [x for x in GATES + BIASES if x not in entry]
        if missing:
            raise ModelError('Layer ' + str(k) + ' lacks tensors: ' + ', '.join(missing) + '.')
        try:
            layers.append(LstmLayer(**{x: entry[x] for x in GATES + BIASES}))
        except ModelError as err:
            raise ModelError('layers[' + str(k) + ']: ' + str(err))
    classifier = data['classifier']
    return LstmNetwork(layers, classifier['W_out'], classifier['b_out'],
                       num_frames=data['num_frames'], input_dim=data['input_dim'])


def read_network(path):
    """
    Reads a model document from disk.

    :param path: File path of the model document
    :return: LstmNetwork
    """
    with open(path, 'rb') as handle:
        return load_network(handle.read())


def dump_network(net):
    """
    Serializes a network to a JSON document.
    Floats are written with repr precision, so load_network(dump_network(net)) is exact.

    :param net: LstmNetwork
    :return: String
    """
    data = {'version': FORMAT_VERSION,
            'num_frames': net.num_frames,
            'input_dim': net.input_dim,
            'layers': [{x: getattr(layer, x).tolist() for x in GATES + BIASES} for layer in net.layers],
            'classifier': {'W_out': net.W_out.tolist(), 'b_out': net.b_out.tolist()}}
    return json.dumps(data)


def write_network(net, path):
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(dump_network(net))
    logger.info('Model written to: ' + path)


def random_network(num_frames, input_dim, hidden_dim, num_layers, num_classes, seed=0, scale=1.0):
    """
    Generates a network with normally distributed weights.
    Used by the gen-model command and by the tests.

    :param num_frames: Number of frames f
    :param input_dim: Width of each frame
    :param hidden_dim: Hidden dimension h, shared by all layers
    :param num_layers: Number of layers
    :param num_classes: Number of output classes
    :param seed: Seed for numpy's random generator
    :param scale: Standard deviation of the weights
    :return: LstmNetwork
    """
    rng = np.random.default_rng(seed)
    layers = list()
    width = input_dim
    for _ in range(num_layers):
        params = {x: rng.normal(0, scale, (hidden_dim, hidden_dim + width)) for x in GATES}
        params.update({x: rng.normal(0, scale, hidden_dim) for x in BIASES})
        layers.append(LstmLayer(**params))
        width = hidden_dim
    W_out = rng.normal(0, scale, (num_classes, hidden_dim))
    b_out = rng.normal(0, scale, num_classes)
    return LstmNetwork(layers, W_out, b_out, num_frames=num_frames, input_dim=input_dim)


def sigmoid(x):
    return expit(x)


def cell_step(layer, prev, x_t):
    """
    Carries out one LSTM cell update.
    Inputs may carry leading batch dimensions; the last axis is the feature axis.

    :param layer: LstmLayer
    :param prev: CellState with h_{t-1} and c_{t-1}
    :param x_t: Input vector of the frame
    :return: CellState with h_t and c_t
    """
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape[-1] != layer.input_dim:
        raise ModelError('Input has dimension ' + str(x_t.shape[-1]) +
                         ', layer expects ' + str(layer.input_dim) + '.')
    if prev.h.shape[-1] != layer.hidden_dim or prev.c.shape[-1] != layer.hidden_dim:
        raise ModelError('Cell state does not match hidden_dim ' + str(layer.hidden_dim) + '.')
    batch = np.broadcast_shapes(prev.h.shape[:-1], x_t.shape[:-1])
    joint = np.concatenate([np.broadcast_to(prev.h, batch + prev.h.shape[-1:]),
                            np.broadcast_to(x_t, batch + x_t.shape[-1:])], axis=-1)
    f_t = sigmoid(joint @ layer.W_f.T + layer.b_f)
    i_t = sigmoid(joint @ layer.W_i.T + layer.b_i)
    c_hat = np.tanh(joint @ layer.W_C.T + layer.b_C)
    o_t = sigmoid(joint @ layer.W_o.T + layer.b_o)
    c_t = f_t * prev.c + i_t * c_hat
    h_t = o_t * np.tanh(c_t)
    return CellState(h=h_t, c=c_t)


def forward(net, sequence):
    """
    Runs the network over a sequence and returns the logits.
    A sequence has shape (num_frames, input_dim);
    a batch of sequences has shape (batch, num_frames, input_dim).

    :param net: LstmNetwork
    :param sequence: Sequence or batch of sequences
    :return: Logits, shape (classes,) or (batch, classes)
    """
    sequence = np.asarray(sequence, dtype=float)
    if sequence.ndim < 2 or sequence.shape[-2:] != (net.num_frames, net.input_dim):
        raise ModelError('Sequence has shape ' + str(sequence.shape) + ', expected (..., ' +
                         str(net.num_frames) + ', ' + str(net.input_dim) + ').')
    batch = sequence.shape[:-2]
    states = [CellState(h=np.zeros(batch + (layer.hidden_dim,)), c=np.zeros(batch + (layer.hidden_dim,)))
              for layer in net.layers]
    for t in range(net.num_frames):
        signal = sequence[..., t, :]
        for k, layer in enumerate(net.layers):
            states[k] = cell_step(layer, states[k], signal)
            signal = states[k].h
    return states[-1].h @ net.W_out.T + net.b_out


def predict(net, sequence):
    """
    Returns the predicted class; ties go to the lowest index.

    :param net: LstmNetwork
    :param sequence: Sequence or batch of sequences
    :return: Class index, or array of class indices for a batch
    """
    logits = forward(net, sequence)
    labels = np.argmax(logits, axis=-1)
    if labels.ndim == 0:
        return int(labels)
    return labels


def _as_matrix(values, name):
    matrix = _as_array(values, name)
    if matrix.ndim != 2:
        raise ModelError('Tensor ' + name + ' must be a matrix, got ' + str(matrix.ndim) + ' dimensions.')
    return matrix


def _as_vector(values, name):
    vector = _as_array(values, name)
    if vector.ndim != 1:
        raise ModelError('Tensor ' + name + ' must be a vector, got ' + str(vector.ndim) + ' dimensions.')
    return vector


def _as_array(values, name):
    try:
        array = np.array(values, dtype=float)
    except (TypeError, ValueError):
        raise ModelError('Tensor ' + name + ' is not a rectangular numeric array.')
    if not np.all(np.isfinite(array)):
        raise ModelError('Tensor ' + name + ' contains non-finite values.')
    array.setflags(write=False)
    return array

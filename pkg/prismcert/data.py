"""
The data module reads and writes labelled sequence datasets.

Two formats are supported:
    idx: a big-endian IDX image file with its IDX label file (the MNIST layout).
        Pixels are scaled to [0, 1] and each image is cut into f contiguous bands
        of rows*cols/f pixels, one band per frame.
    jsonl: one sample per line, {"sequence": [[...], ...], "label": k}.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import json
import logging.handlers

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

IDX = 'idx'
JSONL = 'jsonl'
FORMATS = (IDX, JSONL)

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


class DatasetError(ValueError):
    """Raised when a dataset file cannot be parsed or framed."""


class Dataset(object):
    """
    Sequences of shape (n, num_frames, frame_width) with integer labels.
    """

    def __init__(self, sequences, labels):
        self.sequences = np.asarray(sequences, dtype=float)
        self.labels = np.asarray(labels, dtype=int)
        if self.sequences.ndim != 3:
            raise DatasetError('Sequences must have shape (n, frames, width), got ' +
                               str(self.sequences.shape) + '.')
        if len(self.sequences) != len(self.labels):
            raise DatasetError('Got ' + str(len(self.sequences)) + ' sequences but ' +
                               str(len(self.labels)) + ' labels.')

    def __len__(self):
        return len(self.labels)

    @property
    def frame_shape(self):
        return self.sequences.shape[1:]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0


def load_dataset(path, fmt, num_frames=None, labels_path=None):
    """
    Reads a dataset.

    :param path: jsonl file, or IDX image file
    :param fmt: idx or jsonl
    :param num_frames: Number of frames f; required for idx, checked for jsonl
    :param labels_path: IDX label file
    :return: Dataset
    """
    if fmt == IDX:
        if labels_path is None:
            raise DatasetError('IDX datasets need a label file.')
        if num_frames is None:
            raise DatasetError('IDX datasets need the number of frames to cut images into.')
        images = read_idx(path, IMAGE_MAGIC)
        labels = read_idx(labels_path, LABEL_MAGIC)
        if len(images) != len(labels):
            raise DatasetError('Image file holds ' + str(len(images)) + ' images but label file holds ' +
                               str(len(labels)) + ' labels.')
        dataset = Dataset(frame_images(images, num_frames), labels)
    elif fmt == JSONL:
        dataset = read_jsonl(path)
        if num_frames is not None and dataset.frame_shape[0] != num_frames:
            raise DatasetError('Sequences have ' + str(dataset.frame_shape[0]) + ' frames, expected ' +
                               str(num_frames) + '.')
    else:
        raise DatasetError('Unknown dataset format ' + str(fmt) + '. Choose from ' + ', '.join(FORMATS) + '.')
    logger.info('Loaded ' + str(len(dataset)) + ' samples of shape ' + str(dataset.frame_shape) + ' from ' + path)
    return dataset


def read_idx(path, magic):
    """
    Reads an unsigned-byte IDX file.

    :param path: File path
    :param magic: 2051 for images, 2049 for labels
    :return: Array of shape (n, rows, cols) for images or (n,) for labels
    """
    with open(path, 'rb') as handle:
        raw = handle.read()
    dims = 3 if magic == IMAGE_MAGIC else 1
    header = 4 * (1 + dims)
    if len(raw) < header:
        raise DatasetError('File ' + path + ' is too short for an IDX header.')
    found = int(np.frombuffer(raw, dtype='>u4', count=1)[0])
    if found != magic:
        raise DatasetError('File ' + path + ' has magic number ' + str(found) + ', expected ' + str(magic) + '.')
    shape = tuple(int(x) for x in np.frombuffer(raw, dtype='>u4', count=dims, offset=4))
    data = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if data.size != int(np.prod(shape)):
        raise DatasetError('File ' + path + ' holds ' + str(data.size) + ' values, header announces ' +
                           str(int(np.prod(shape))) + '.')
    return data.reshape(shape)


def write_idx(path, values, magic):
    values = np.asarray(values, dtype=np.uint8)
    header = np.array([magic] + list(values.shape), dtype='>u4')
    with open(path, 'wb') as handle:
        handle.write(header.tobytes())
        handle.write(values.tobytes())


def frame_images(images, num_frames):
    """
    Scales pixels to [0, 1] and cuts each image into num_frames contiguous bands.

    :param images: Array of shape (n, rows, cols)
    :param num_frames: Number of frames f
    :return: Array of shape (n, f, rows * cols / f)
    """
    images = np.asarray(images)
    pixels = int(np.prod(images.shape[1:]))
    if num_frames < 1 or pixels % num_frames != 0:
        raise DatasetError('Cannot cut ' + str(pixels) + ' pixels into f=' + str(num_frames) + ' equal frames.')
    return images.reshape(len(images), num_frames, pixels // num_frames).astype(float) / 255.0


def read_jsonl(path):
    """
    Reads a jsonl dataset with one {"sequence", "label"} object per line.

    :param path: File path
    :return: Dataset
    """
    try:
        frame = pd.read_json(path, lines=True, precise_float=True)
    except ValueError as err:
        raise DatasetError('Could not parse ' + path + ': ' + str(err))
    for column in ('sequence', 'label'):
        if column not in frame.columns:
            raise DatasetError('Dataset ' + path + ' lacks the field ' + column + '.')
    sequences = [np.array(x, dtype=float) for x in frame['sequence']]
    shapes = set(x.shape for x in sequences)
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise DatasetError('Sequences in ' + path + ' do not share one (frames, width) shape: ' + str(shapes) + '.')
    return Dataset(np.stack(sequences), frame['label'].astype(int).values)


def write_jsonl(path, sequences, labels):
    """
    Writes a dataset in jsonl format.
    Floats are written with repr precision, so reading the file back is exact.

    :param path: File path
    :param sequences: Array of shape (n, frames, width)
    :param labels: n labels
    """
    with open(path, 'w', encoding='utf-8') as handle:
        for sequence, label in zip(np.asarray(sequences, dtype=float), labels):
            handle.write(json.dumps({'sequence': sequence.tolist(), 'label': int(label)}) + '\n')
    logger.info('Dataset written to: ' + path)

"""
This file contains testing functions for the dataset readers in data.py.
"""

__status__ = 'Development'
__license__ = 'Apache 2.0'

import os
import tempfile
import unittest

import numpy as np

from prismcert.data import load_dataset, read_idx, write_idx, write_jsonl, frame_images, Dataset, \
    DatasetError, IMAGE_MAGIC, LABEL_MAGIC, IDX, JSONL

images = np.arange(3 * 28 * 28, dtype=np.uint8).reshape(3, 28, 28)
labels = np.array([4, 0, 9])


class TestData(unittest.TestCase):
    """
    Tests reading IDX and jsonl datasets.
    """

    def test_idx_frames(self):
        """
        Three 28 x 28 images cut into 4 frames give sequences of shape (3, 4, 196) in [0, 1].
        """
        with tempfile.TemporaryDirectory() as folder:
            image_path = os.path.join(folder, 'images.idx')
            label_path = os.path.join(folder, 'labels.idx')
            write_idx(image_path, images, IMAGE_MAGIC)
            write_idx(label_path, labels, LABEL_MAGIC)
            dataset = load_dataset(image_path, IDX, num_frames=4, labels_path=label_path)
        self.assertEqual(dataset.sequences.shape, (3, 4, 196))
        self.assertTrue(np.array_equal(dataset.labels, labels))
        self.assertAlmostEqual(dataset.sequences[0, 1, 0], images[0].ravel()[196] / 255.0)
        self.assertTrue(0 <= dataset.sequences.min() and dataset.sequences.max() <= 1)

    def test_frames_must_divide(self):
        """
        784 pixels cannot be cut into 5 frames; the error names f.
        """
        with self.assertRaises(DatasetError) as context:
            frame_images(images, 5)
        self.assertIn('f=5', str(context.exception))

    def test_bad_magic(self):
        """
        A label file read as an image file is rejected.
        """
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'labels.idx')
            write_idx(path, labels, LABEL_MAGIC)
            with self.assertRaises(DatasetError):
                read_idx(path, IMAGE_MAGIC)

    def test_truncated(self):
        """
        A file with fewer values than its header announces is rejected.
        """
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'images.idx')
            write_idx(path, images, IMAGE_MAGIC)
            with open(path, 'rb') as handle:
                raw = handle.read()
            with open(path, 'wb') as handle:
                handle.write(raw[:-10])
            with self.assertRaises(DatasetError):
                read_idx(path, IMAGE_MAGIC)

    def test_jsonl(self):
        """
        Sequences written as jsonl read back with their labels and frame count.
        """
        sequences = np.random.default_rng(0).normal(0, 1, (5, 3, 2))
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'data.jsonl')
            write_jsonl(path, sequences, [0, 1, 2, 1, 0])
            dataset = load_dataset(path, JSONL, num_frames=3)
            with self.assertRaises(DatasetError):
                load_dataset(path, JSONL, num_frames=4)
        self.assertTrue(np.allclose(dataset.sequences, sequences, rtol=0, atol=1e-12))
        self.assertEqual(dataset.num_classes, 3)

    def test_ragged_jsonl(self):
        """
        Sequences of different shapes are rejected.
        """
        with tempfile.TemporaryDirectory() as folder:
            path = os.path.join(folder, 'data.jsonl')
            with open(path, 'w') as handle:
                handle.write('{"sequence": [[0.1, 0.2]], "label": 0}\n')
                handle.write('{"sequence": [[0.1, 0.2], [0.3, 0.4]], "label": 1}\n')
            with self.assertRaises(DatasetError):
                load_dataset(path, JSONL)

    def test_unknown_format(self):
        """
        Only idx and jsonl are supported; IDX data needs labels.
        """
        with self.assertRaises(DatasetError):
            load_dataset('data.csv', 'csv')
        with self.assertRaises(DatasetError):
            load_dataset('images.idx', IDX, num_frames=4)
        with self.assertRaises(DatasetError):
            Dataset(np.zeros((2, 3)), [0, 1])


if __name__ == '__main__':
    unittest.main()

"""Toy 2-D data sources and a cycling, reshuffling batch iterator."""
from __future__ import annotations

import numpy as np


def ring_of_gaussians(n, rng: np.random.Generator, n_modes=8, radius=4.0, std=0.15,
                      return_labels=False):
    labels = rng.integers(0, n_modes, size=n)
    angle = 2 * np.pi * labels / n_modes
    centers = radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    x = centers + std * rng.standard_normal((n, 2))
    return (x, labels) if return_labels else x


class BatchStream:
    """Epoch-style minibatches over a fixed array; reshuffles when exhausted.

    The permutation state lives in ``rng`` so the stream is resumable from
    ``state()``.
    """

    def __init__(self, data, batch_size, rng: np.random.Generator, labels=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.labels = None if labels is None else np.asarray(labels)
        if batch_size > len(self.data):
            raise ValueError("batch_size larger than the dataset")
        self.batch_size = batch_size
        self.rng = rng
        self._perm = rng.permutation(len(self.data))
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > len(self._perm):
            self._perm = self.rng.permutation(len(self.data))
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.data[idx], (None if self.labels is None else self.labels[idx])

    def state(self):
        return {"perm": self._perm.copy(), "pos": self._pos}

    def load_state(self, state):
        self._perm = np.asarray(state["perm"])
        self._pos = int(state["pos"])

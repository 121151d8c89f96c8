"""Shared in-memory dataset container."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass
class Dataset:
    """Feature matrix, integer labels, optional per-sample sub-task ids."""

    x: np.ndarray
    y: np.ndarray
    subtask_ids: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise DataError("dataset features/labels are inconsistent")
        if self.subtask_ids is not None:
            self.subtask_ids = np.asarray(self.subtask_ids, dtype=np.int64)
            if self.subtask_ids.shape != self.y.shape:
                raise DataError("subtask ids must align with labels")

    def __len__(self) -> int:
        return self.x.shape[0]

    def take(self, idx: np.ndarray) -> "Dataset":
        sub = None if self.subtask_ids is None else self.subtask_ids[idx]
        return Dataset(self.x[idx], self.y[idx], sub)

    def copy(self) -> "Dataset":
        sub = None if self.subtask_ids is None else self.subtask_ids.copy()
        return Dataset(self.x.copy(), self.y.copy(), sub)


def minibatches(n: int, batch_size: int, rng: np.random.Generator | None):
    """Yield index arrays covering 0..n-1; shuffled when rng is given."""
    order = np.arange(n) if rng is None else rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]

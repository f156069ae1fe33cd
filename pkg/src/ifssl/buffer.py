"""Per-sample moving average of predicted class probabilities."""

from __future__ import annotations

import numpy as np

from ifssl.errors import ConfigurationError, InputError

SIMPLEX_TOL = 1e-6


def _check_simplex(p):
    if np.any(~np.isfinite(p)) or np.any(p < -SIMPLEX_TOL) or np.any(np.abs(p.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise InputError("prediction is not a probability vector")


class PredictionBuffer:
    """Exponentially averaged probability vector per sample id.

    The first write for an id stores the prediction as is; later writes
    blend ``stored = alpha * stored + (1 - alpha) * probs``.
    """

    def __init__(self, m: int, alpha: float = 0.6):
        if not 0.0 <= alpha < 1.0:
            raise ConfigurationError("mva alpha must lie in [0, 1)", "mva_alpha")
        self.m = m
        self.alpha = alpha
        self._rows: dict[int, int] = {}
        self._values = np.zeros((0, m))

    def __contains__(self, sample_id) -> bool:
        return int(sample_id) in self._rows

    def __len__(self) -> int:
        return len(self._rows)

    def ids(self) -> list[int]:
        return list(self._rows)

    def get(self, sample_id) -> np.ndarray:
        return self._values[self._rows[int(sample_id)]].copy()

    def get_many(self, ids) -> np.ndarray:
        """Stored vectors ``[len(ids) x m]``; ``KeyError`` names the first missing id."""
        rows = []
        for i in np.asarray(ids).ravel():
            try:
                rows.append(self._rows[int(i)])
            except KeyError:
                raise KeyError(f"no buffered prediction for sample id {int(i)}") from None
        return self._values[np.array(rows, dtype=np.int64)].copy()

    def _row_for(self, ids):
        rows = np.empty(len(ids), dtype=np.int64)
        fresh = np.zeros(len(ids), dtype=bool)
        for k, i in enumerate(ids):
            i = int(i)
            r = self._rows.get(i)
            if r is None:
                r = len(self._rows)
                self._rows[i] = r
                fresh[k] = True
            rows[k] = r
        if len(self._rows) > self._values.shape[0]:
            grown = np.zeros((max(len(self._rows), 2 * self._values.shape[0]), self.m))
            grown[: self._values.shape[0]] = self._values
            self._values = grown
        return rows, fresh

    def update_many(self, ids, probs) -> PredictionBuffer:
        p = np.asarray(probs, dtype=float)
        ids = np.asarray(ids).ravel()
        if p.shape != (len(ids), self.m):
            raise InputError(f"expected predictions of shape {(len(ids), self.m)}, got {p.shape}")
        if len(np.unique(ids)) != len(ids):
            raise InputError("duplicate ids in one buffer update")
        _check_simplex(p)
        rows, fresh = self._row_for(ids)
        old = self._values[rows]
        self._values[rows] = np.where(fresh[:, None], p, self.alpha * old + (1.0 - self.alpha) * p)
        return self

    def copy(self) -> PredictionBuffer:
        out = PredictionBuffer(self.m, self.alpha)
        out._rows = dict(self._rows)
        out._values = self._values.copy()
        return out


def mva_update(buffer: PredictionBuffer, sample_id, probs, alpha=None) -> PredictionBuffer:
    """Blend one prediction into ``buffer`` (in place) and return it.

    ``alpha`` overrides the buffer's own decay for this write.
    """
    p = np.asarray(probs, dtype=float).reshape(1, -1)
    if alpha is None:
        return buffer.update_many([sample_id], p)
    saved = buffer.alpha
    buffer.alpha = alpha
    try:
        return buffer.update_many([sample_id], p)
    finally:
        buffer.alpha = saved

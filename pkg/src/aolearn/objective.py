"""Cosupport selection, per-row accumulators, objective value and gradient.

The learning objective for an operator G and batch Y is

    f(G) = sum_n  min_{|J| = ell}  ||G_J y_n||_2^2 ,

the sum over signals of the ``ell`` smallest squared responses.  Writing
J_n for the selected rows of signal n and S_k = {n : k in J_n}, the per-row
second-moment matrices A_k = sum_{n in S_k} y_n y_n^T satisfy

    f(G) = sum_k  g_k A_k g_k^T

and the descent direction for row k is g_k = row_k A_k (half the gradient
where f is differentiable).
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .core import AnalysisOperator, SignalBatch


def _rows(operator):
    if isinstance(operator, AnalysisOperator):
        return operator.rows
    return np.ascontiguousarray(operator, dtype=np.float64)


def _signals(batch):
    if isinstance(batch, SignalBatch):
        return batch.signals
    return np.ascontiguousarray(batch, dtype=np.float64)


@dataclass(frozen=True)
class CosupportSelection:
    """Selected cosupports for a batch, stored as a K x N membership mask.

    ``membership[k, n]`` is True when row k belongs to J_n.  Ties in the
    selection are broken towards the lowest row index, so a (operator, batch,
    cosparsity) triple always produces the same selection.
    """

    membership: np.ndarray
    cosparsity: int

    def __post_init__(self):
        mask = np.asarray(self.membership, dtype=bool)
        if (mask.sum(axis=0) != self.cosparsity).any():
            raise ValueError("every signal must select exactly `cosparsity` rows")
        object.__setattr__(self, "membership", mask)

    @property
    def n_rows(self):
        return self.membership.shape[0]

    @property
    def n_signals(self):
        return self.membership.shape[1]

    @property
    def counts(self):
        """|S_k|: number of signals selecting each row."""
        return self.membership.sum(axis=1).astype(np.int64)

    def cosupport(self, n):
        """J_n as a sorted index array."""
        return np.nonzero(self.membership[:, n])[0]

    def signals_for(self, k):
        """S_k as a sorted index array."""
        return np.nonzero(self.membership[k])[0]


@dataclass(frozen=True)
class AnalyserAccumulators:
    """Stack of per-row PSD matrices A_k with selection counts."""

    matrices: np.ndarray  # (K, d, d)
    counts: np.ndarray    # (K,)

    @property
    def n_rows(self):
        return self.matrices.shape[0]

    def normalized(self, k):
        """A_k / |S_k| (the averaged variant); zero matrix when unused."""
        if self.counts[k] == 0:
            return np.zeros_like(self.matrices[k])
        return self.matrices[k] / self.counts[k]


def cosupport_select(operator, y, ell):
    """Indices of the ``ell`` rows with smallest absolute response to ``y``.

    Equals the minimiser of ||G_J y||_2 over all index sets of size ``ell``;
    ties are broken towards the lowest index.  Returns a sorted index array.
    """
    rows = _rows(operator)
    if not 0 <= ell <= rows.shape[0]:
        raise ValueError("need 0 <= ell <= K")
    prods = (rows @ np.asarray(y, dtype=np.float64)).reshape(-1, 1)
    mask = backend.active().select_mask(prods, ell)
    return np.nonzero(mask[:, 0])[0]


def select_cosupports(operator, batch, ell):
    """Batch cosupport selection; returns a :class:`CosupportSelection`."""
    rows, Y = _rows(operator), _signals(batch)
    if not 0 <= ell <= rows.shape[0]:
        raise ValueError("need 0 <= ell <= K")
    mask = backend.active().select_mask(rows @ Y, ell)
    return CosupportSelection(mask, ell)


def accumulate(operator, batch, ell):
    """Select cosupports and build the per-row accumulators A_k.

    Returns ``(selection, accumulators)`` with A_k the sum of outer products
    y_n y_n^T over the signals selecting row k.
    """
    rows, Y = _rows(operator), _signals(batch)
    selection = select_cosupports(rows, Y, ell)
    A, counts = backend.active().accumulate(Y, selection.membership)
    return selection, AnalyserAccumulators(A, counts)


def objective_value(operator, batch, ell):
    """f(G): the sum over signals of the ``ell`` smallest squared responses."""
    rows, Y = _rows(operator), _signals(batch)
    prods = rows @ Y
    mask = backend.active().select_mask(prods, ell)
    return float(np.sum(prods[mask] ** 2))


def gradient_rows(selection, batch, operator):
    """Descent directions g_k = sum_{n in S_k} <row_k, y_n> y_n = row_k A_k.

    The true gradient of the objective at differentiable points is 2 g_k.
    ``selection`` must have been produced from (operator, batch).
    """
    rows, Y = _rows(operator), _signals(batch)
    prods = rows @ Y
    return (prods * selection.membership) @ Y.T

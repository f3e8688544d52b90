"""Core data types, row normalisation and the synthetic cosparse signal model.

Conventions used everywhere in the package:

* An analysis operator is a K x d real matrix with unit Euclidean-norm rows.
  Applied to a signal it produces a response vector; the signal is cosparse
  when many responses are (near) zero.
* Signal batches are d x N matrices whose columns are the signals.
* Row and signal indices are 0-based.
* Randomness always flows through an explicitly passed :class:`RandomSource`;
  no function touches global RNG state, so identical seeds give bit-identical
  results on a single thread (per kernel backend).
"""

from dataclasses import dataclass

import numpy as np

from . import backend
from .errors import DegenerateSignal, ZeroRow

UNIT_ROW_TOL = 1e-12
ZERO_ROW_TOL = 1e-14
# relative singular-value cutoff for rank decisions in pseudoinverses
RANK_CUTOFF = 1e-12


class RandomSource:
    """Seeded deterministic random generator with derivable substreams.

    Thin wrapper around :class:`numpy.random.Generator` seeded through a
    ``SeedSequence``.  ``substream(i)`` derives an independent, reproducible
    child stream; the same (seed, index) pair always yields the same stream.
    """

    def __init__(self, seed=0):
        if isinstance(seed, RandomSource):
            seed = seed._seq
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
        else:
            self._seq = np.random.SeedSequence(int(seed))
        self.generator = np.random.default_rng(self._seq)

    def substream(self, index):
        child = np.random.SeedSequence(
            entropy=self._seq.entropy,
            spawn_key=self._seq.spawn_key + (int(index),),
        )
        return RandomSource(child)

    def __repr__(self):
        return f"RandomSource(entropy={self._seq.entropy}, key={self._seq.spawn_key})"


def as_source(rng):
    """Coerce an int seed, SeedSequence or RandomSource to a RandomSource."""
    if isinstance(rng, RandomSource):
        return rng
    return RandomSource(rng if rng is not None else 0)


def _frozen(a):
    a = np.array(a, dtype=np.float64, order="C")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class AnalysisOperator:
    """K x d matrix with unit-norm rows (one analyser per row)."""

    rows: np.ndarray

    def __post_init__(self):
        rows = _frozen(self.rows)
        if rows.ndim != 2 or rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValueError("operator must be a 2-D matrix with K, d >= 1")
        if not np.isfinite(rows).all():
            raise ValueError("operator entries must be finite")
        norms = np.linalg.norm(rows, axis=1)
        worst = np.abs(norms - 1.0).max()
        if worst > UNIT_ROW_TOL:
            raise ValueError(
                f"rows must have unit norm within {UNIT_ROW_TOL:g} "
                f"(worst deviation {worst:.3e}); use normalize_rows()"
            )
        object.__setattr__(self, "rows", rows)

    @property
    def n_rows(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]

    @property
    def shape(self):
        return self.rows.shape

    def save(self, path):
        _save_matrix(path, self.rows)

    @classmethod
    def load(cls, path):
        return cls(_load_matrix(path))


@dataclass(frozen=True)
class SignalBatch:
    """d x N matrix of training signals stored as columns."""

    signals: np.ndarray

    def __post_init__(self):
        signals = _frozen(self.signals)
        if signals.ndim != 2 or signals.shape[1] < 1:
            raise ValueError("batch must be a 2-D matrix with N >= 1 columns")
        if not np.isfinite(signals).all():
            raise ValueError("signal entries must be finite")
        object.__setattr__(self, "signals", signals)

    @property
    def dim(self):
        return self.signals.shape[0]

    @property
    def n_signals(self):
        return self.signals.shape[1]

    def save(self, path):
        _save_matrix(path, self.signals)

    @classmethod
    def load(cls, path):
        return cls(_load_matrix(path))


@dataclass(frozen=True)
class SignalModelConfig:
    """Parameters of the synthetic cosparse signal model.

    ``cosparsity`` rows are zeroed per signal, ``noise`` is the standard
    deviation scale of the additive Gaussian vector.  ``seed`` is only a
    convenience default; generation uses an explicitly passed RandomSource.
    """

    cosparsity: int
    noise: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.cosparsity < 0:
            raise ValueError("cosparsity must be >= 0")
        if self.noise < 0:
            raise ValueError("noise level must be >= 0")

    def validate_for(self, operator):
        bound = min(operator.n_rows, operator.dim)
        if self.cosparsity > bound:
            raise ValueError(
                f"cosparsity {self.cosparsity} exceeds min(K, d) = {bound}"
            )


def normalize_rows(matrix):
    """Scale every row of ``matrix`` to unit norm.

    Raises :class:`ZeroRow` for the first row whose norm is below 1e-14,
    which signals a degenerate update upstream.
    """
    m = np.array(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    norms = np.linalg.norm(m, axis=1)
    small = np.nonzero(norms < ZERO_ROW_TOL)[0]
    if small.size:
        raise ZeroRow(int(small[0]))
    return AnalysisOperator(m / norms[:, None])


def random_operator(K, d, rng):
    """Operator with K rows drawn i.i.d. from the unit sphere in R^d."""
    if K < 1 or d < 1:
        raise ValueError("K and d must be >= 1")
    gen = as_source(rng).generator
    rows = gen.standard_normal((K, d))
    norms = np.linalg.norm(rows, axis=1)
    while (norms < ZERO_ROW_TOL).any():  # probability-zero, loop for safety
        bad = norms < ZERO_ROW_TOL
        rows[bad] = gen.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(rows, axis=1)
    return AnalysisOperator(rows / norms[:, None])


def closeby_init(operator, rng):
    """Mix ``operator`` 1:1 with a random operator and renormalise rows.

    Each output row is ``normalize(row_k + r_k)`` with ``r_k`` uniform on the
    sphere, i.e. a starting point whose rows sit near the given ones.
    """
    noise = random_operator(operator.n_rows, operator.dim, rng)
    return normalize_rows(operator.rows + noise.rows)


def cosparse_projector(operator, cosupport):
    """Orthogonal projector onto the nullspace of the selected rows.

    Returns the d x d matrix ``I - R^+ R`` for ``R`` the restriction of the
    operator to ``cosupport``.  The pseudoinverse uses an SVD with relative
    singular-value cutoff 1e-12, so rank-deficient selections are handled.
    """
    cosupport = np.asarray(cosupport, dtype=np.int64).ravel()
    d = operator.dim
    if cosupport.size == 0:
        return np.eye(d)
    if cosupport.min() < 0 or cosupport.max() >= operator.n_rows:
        raise ValueError("cosupport indices out of range")
    sub = operator.rows[cosupport]
    _, s, Vh = np.linalg.svd(sub, full_matrices=False)
    if s[0] <= 0.0:
        return np.eye(d)
    V = Vh[s > RANK_CUTOFF * s[0]]
    return np.eye(d) - V.T @ V


def generate_signals(operator, config, n_signals, rng):
    """Draw ``n_signals`` unit-norm signals from the cosparse model.

    For every signal a cosupport of ``config.cosparsity`` rows is drawn
    uniformly, a standard Gaussian vector is projected onto the orthogonal
    complement of those rows, Gaussian noise of scale ``config.noise`` is
    added, and the sum is normalised:

        y = (P z + r) / ||P z + r||,   P = I - R^+ R.

    Returns ``(batch, cosupports)`` with cosupports of shape (N, cosparsity),
    each row sorted ascending.  Signals whose pre-normalisation vector is
    degenerate (norm below 1e-14) are redrawn, up to 100 attempts.
    """
    config.validate_for(operator)
    if n_signals < 1:
        raise ValueError("n_signals must be >= 1")
    gen = as_source(rng if rng is not None else config.seed).generator
    rows = operator.rows
    K, d = rows.shape
    ell = config.cosparsity

    out = np.empty((d, n_signals))
    cosupports = np.empty((n_signals, ell), dtype=np.int64)
    pending = np.arange(n_signals)
    for _ in range(100):
        m = pending.size
        if ell:
            # the ell smallest of K i.i.d. uniforms index a uniform ell-subset
            keys = gen.random((m, K))
            lam = np.argpartition(keys, ell - 1, axis=1)[:, :ell]
            lam.sort(axis=1)
        else:
            lam = np.empty((m, 0), dtype=np.int64)
        z = gen.standard_normal((d, m))
        y0, ok = backend.active().project_complement(rows, lam, z)
        if ell:
            # enforce exact cosparsity: reroute numerically unsafe columns
            # through the rank-revealing projector
            sub = rows[lam]
            res = np.abs(np.einsum("nld,dn->nl", sub, y0)).max(axis=1)
            ref = np.linalg.norm(y0, axis=0)
            bad = np.nonzero(~ok | (res > 1e-11 * np.maximum(ref, 1e-300)))[0]
            for n in bad:
                y0[:, n] = cosparse_projector(operator, lam[n]) @ z[:, n]
        if config.noise > 0.0:
            y0 = y0 + config.noise * gen.standard_normal((d, m))
        norms = np.linalg.norm(y0, axis=0)
        good = norms >= ZERO_ROW_TOL
        filled = pending[good]
        out[:, filled] = y0[:, good] / norms[good]
        cosupports[filled] = lam[good]
        pending = pending[~good]
        if pending.size == 0:
            break
    else:
        raise DegenerateSignal(
            f"{pending.size} signals stayed degenerate after 100 attempts"
        )
    return SignalBatch(out), cosupports


def _save_matrix(path, m):
    # plain text: "rows cols" header, then one full-precision row per line
    with open(path, "w") as fh:
        fh.write(f"{m.shape[0]} {m.shape[1]}\n")
        for row in m:
            fh.write(" ".join(f"{v:.17e}" for v in row))
            fh.write("\n")


def _load_matrix(path):
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed header")
        n_rows, n_cols = int(header[0]), int(header[1])
        m = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if m.shape != (n_rows, n_cols):
        raise ValueError(
            f"{path}: header promises {n_rows}x{n_cols}, found {m.shape}"
        )
    return m

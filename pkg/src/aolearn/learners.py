"""One-iteration update rules for analysis operator learning.

Four maps over the manifold of unit-row-norm operators, each consuming a
fresh batch (or stream) of signals and returning an updated operator:

* :func:`faol_iteration`: projected gradient descent where each row moves by
  ``row (I - alpha A)`` with the closed-form stepsize that minimises the
  normalised quadratic along the descent direction.
* :func:`saol_iteration`: sequential single-pass variant; gradients and the
  cubic stepsize scalar are estimated from the stream in O(Kd) state.
* :func:`iaol_step`: linearised implicit Euler step ``row (I + alpha A)^-1``,
  stable for any positive stepsize.
* :func:`svaol_step`: replaces each row by a unit eigenvector of its
  accumulator for the smallest eigenvalue (shifted inverse iteration).

All four decrease or preserve the objective on the batch they were computed
from.  :func:`replace_coherent` decorrelates near-duplicate rows between
iterations.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import backend
from .core import AnalysisOperator, ZERO_ROW_TOL, as_source
from .errors import EmptyPhase, NumericalBranch, SolveFailure
from .objective import AnalyserAccumulators, accumulate, _rows, _signals

# a row update whose result would be shorter than this keeps the old row
COLLAPSE_TOL = 1e-10


@dataclass(frozen=True)
class StepsizeScalars:
    """The three moments a = gAg^T, b = gA^2g^T, c = gA^3g^T and the stepsize.

    For a PSD matrix A and unit row g these satisfy a, b, c >= 0 and
    b >= a^2 (Cauchy-Schwarz); both are checked with small slack.
    """

    a: float
    b: float
    c: float
    alpha: float = 0.0


@dataclass
class IterationInfo:
    """Per-iteration diagnostics reported by the learner maps."""

    objective: float                 # objective of the *input* operator on the batch
    counts: np.ndarray               # selections per row (activation counters)
    alphas: np.ndarray | None = None
    unconverged: int = 0             # rows whose eigen-iteration hit the cap


@dataclass
class SaolState:
    """State of the sequential pass: running averages and counters per row."""

    g: np.ndarray                    # (K, d) running gradient estimates
    selected: np.ndarray             # I_k: selections over the whole stream
    second_phase: np.ndarray         # C_k: selections in the estimation phase
    c: np.ndarray                    # running averages of <g_k, y>^2
    eps: float
    objective: float


@dataclass
class ReplacementState:
    """Row activation counters and the coherence threshold."""

    counters: np.ndarray
    mu0: float = 0.8

    @classmethod
    def fresh(cls, n_rows, mu0=0.8):
        if not 0.0 < mu0 <= 1.0:
            raise ValueError("mu0 must lie in (0, 1]")
        return cls(np.zeros(n_rows, dtype=np.int64), mu0)

    def record(self, counts):
        self.counters += np.asarray(counts, dtype=np.int64)

    def reset(self):
        self.counters[:] = 0


@dataclass(frozen=True)
class ReplacementEvent:
    kept: int
    replaced: int
    coherence: float
    redrawn: bool = False


def optimal_stepsize(a, b, c):
    """Closed-form minimiser of F(t) = ((g - t h) A (g - t h)^T) / ||g - t h||^2.

    ``a``, ``b``, ``c`` are the moments of a PSD matrix A against a unit row g
    (h = gA is the descent direction).  Branches:

    * generic: t = (ab - c + sqrt((c - ab)^2 - 4 (b^2 - ac)(a^2 - b))) / (2 (b^2 - ac))
    * b^2 = ac with b != 0: t = a / b
    * b = 0 (direction vanishes): t = 0

    When the chosen stepsize would send the row to (numerical) zero, which
    happens exactly when the row is an eigenvector of A, the function returns
    0 so the caller preserves the current row.  Inputs violating the PSD
    moment invariants raise :class:`NumericalBranch`.

    The computation is scale-invariant: feeding (s a, s^2 b, s^3 c) returns
    the stepsize divided by s, so accumulators of any magnitude are safe.
    """
    a, b, c = float(a), float(b), float(c)
    if min(a, b, c) < -1e-12:
        raise NumericalBranch(f"negative moments: a={a}, b={b}, c={c}")
    a, b, c = max(a, 0.0), max(b, 0.0), max(c, 0.0)  # roundoff negatives
    scale = max(a, math.sqrt(b), c ** (1.0 / 3.0))
    if scale <= 0.0:
        return 0.0
    an, bn, cn = a / scale, b / (scale * scale), c / (scale * scale * scale)
    if bn < an * an - 1e-10:
        raise NumericalBranch(f"b < a^2: not a PSD moment triple (a={a}, b={b})")
    disc = (cn - an * bn) ** 2 - 4.0 * (bn * bn - an * cn) * (an * an - bn)
    if disc < -1e-8:
        raise NumericalBranch(f"negative discriminant {disc:.3e}")
    if bn <= 1e-14:
        return 0.0
    denom = bn * bn - an * cn
    if abs(denom) <= 1e-12 * max(1.0, bn * bn):
        alpha = an / bn
    else:
        alpha = (an * bn - cn + math.sqrt(max(disc, 0.0))) / (2.0 * denom)
    # length of the updated row: ||g - alpha h||^2 = 1 - 2 alpha a + alpha^2 b
    if 1.0 - 2.0 * alpha * an + alpha * alpha * bn < COLLAPSE_TOL ** 2:
        return 0.0
    return alpha / scale


def _renormalized(rows, k, new_row):
    """Write the normalised row, or keep the old one if it collapsed."""
    nn = np.linalg.norm(new_row)
    if nn < COLLAPSE_TOL:
        return False
    rows[k] = new_row / nn
    return True


def faol_iteration(operator, batch, ell):
    """One projected-gradient iteration with the closed-form stepsize.

    For every row: builds A_k, forms the moments, picks the optimal stepsize
    and moves the row to ``normalize(row (I - alpha A_k))``.  Rows whose
    update would collapse to zero are preserved.  The objective on this batch
    never increases.

    Returns ``(operator, info)`` where ``info.objective`` is the objective of
    the *input* operator on ``batch``.
    """
    selection, accums = accumulate(operator, batch, ell)
    rows = _rows(operator).copy()
    K = rows.shape[0]
    objective = float(
        np.einsum("kd,kde,ke->", rows, accums.matrices, rows)
    )
    alphas = np.zeros(K)
    for k in range(K):
        if accums.counts[k] == 0:
            continue
        A = accums.matrices[k]
        g1 = rows[k] @ A
        a = float(g1 @ rows[k])
        b = float(g1 @ g1)
        c = float((g1 @ A) @ g1)
        alpha = optimal_stepsize(a, b, c)
        if alpha != 0.0 and _renormalized(rows, k, rows[k] - alpha * g1):
            alphas[k] = alpha
    info = IterationInfo(objective, accums.counts.copy(), alphas)
    return AnalysisOperator(rows), info


def saol_pass(operator, batch, ell, eps):
    """Run the sequential stream pass and return its :class:`SaolState`.

    The stream is split at ``(1 - eps) N``: every selected signal refines the
    running gradient averages g_k; signals past the split additionally feed
    the running average of <g_k, y>^2 used as the cubic stepsize moment.
    Raises :class:`EmptyPhase` when the second phase contains no signal.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    rows, Y = _rows(operator), _signals(batch)
    N = Y.shape[1]
    threshold = (1.0 - eps) * N
    start = int(math.floor(threshold))
    if start + 1 <= threshold:
        start += 1
    if start >= N:
        raise EmptyPhase(f"no signals past (1 - eps) N = {threshold:g}")
    g, I, C, c, objective = backend.active().saol_stream(rows, Y, ell, start)
    return SaolState(g, I, C, c, eps, objective)


def saol_iteration(operator, batch, ell, eps=0.1):
    """One sequential iteration: stream pass, then per-row stepsize update.

    Uses a = <row, g_k>, b = <g_k, g_k> and the streamed estimate of the
    cubic moment; the row moves to ``normalize(row - alpha g_k)``.  Unlike
    :func:`faol_iteration` no A_k is materialised.
    """
    state = saol_pass(operator, batch, ell, eps)
    rows = _rows(operator).copy()
    K = rows.shape[0]
    alphas = np.zeros(K)
    for k in range(K):
        gk = state.g[k]
        a = float(rows[k] @ gk)
        b = float(gk @ gk)
        alpha = optimal_stepsize(a, b, float(state.c[k]))
        if alpha != 0.0 and _renormalized(rows, k, rows[k] - alpha * gk):
            alphas[k] = alpha
    info = IterationInfo(state.objective, state.selected.copy(), alphas)
    return AnalysisOperator(rows), info


def iaol_step(operator, accumulators, alpha):
    """Implicit (backward Euler) row update ``normalize(row (I + alpha A)^-1)``.

    ``I + alpha A`` is symmetric positive definite with eigenvalues >= 1, so
    the solve is always well posed and the objective on the originating batch
    never increases, for any ``alpha > 0``.
    """
    if not (np.isfinite(alpha) and alpha > 0):
        raise SolveFailure(f"stepsize must be finite and positive, got {alpha}")
    A = accumulators.matrices
    if not np.isfinite(A).all():
        raise SolveFailure("accumulators contain non-finite entries")
    rows = _rows(operator)
    K, d = rows.shape
    M = alpha * A + np.eye(d)
    try:
        x = np.linalg.solve(M, rows[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:  # unreachable for PSD inputs
        raise SolveFailure(str(exc)) from exc
    out = rows.copy()
    alphas = np.full(K, float(alpha))
    for k in range(K):
        if not _renormalized(out, k, x[k]):
            alphas[k] = 0.0
    return AnalysisOperator(out), alphas


def iaol_iteration(operator, batch, ell, alpha=100.0):
    """Select, accumulate and apply :func:`iaol_step` in one call."""
    selection, accums = accumulate(operator, batch, ell)
    rows = _rows(operator)
    objective = float(np.einsum("kd,kde,ke->", rows, accums.matrices, rows))
    updated, alphas = iaol_step(operator, accums, alpha)
    return updated, IterationInfo(objective, accums.counts.copy(), alphas)


def _count_below(M, tau):
    """Number of eigenvalues of symmetric M strictly below tau (LDL inertia)."""
    shifted = M - tau * np.eye(M.shape[0])
    _, D, _ = scipy.linalg.ldl(shifted)
    count = 0
    i, n = 0, D.shape[0]
    while i < n:
        if i + 1 < n and D[i, i + 1] != 0.0:
            # 2x2 block: eigenvalues from trace/determinant
            t = D[i, i] + D[i + 1, i + 1]
            det = D[i, i] * D[i + 1, i + 1] - D[i, i + 1] * D[i + 1, i]
            h = math.sqrt(max(t * t / 4.0 - det, 0.0))
            count += int(t / 2.0 - h < 0.0) + int(t / 2.0 + h < 0.0)
            i += 2
        else:
            count += int(D[i, i] < 0.0)
            i += 1
    return count


def smallest_eigenvector(A, start, max_iter=50, tol=1e-10):
    """Unit eigenvector of PSD ``A`` for its smallest eigenvalue.

    Shifted inverse iteration from ``start``: plain inverse iteration on the
    regularised matrix A + 1e-12 tr(A) I, with the shift pulled towards the
    current Rayleigh quotient as the residual shrinks.  Because shifted
    iterations can lock onto an interior eigenpair, the result is certified
    by matrix inertia (an LDL factorisation counts eigenvalues below the
    found value); if smaller eigenvalues exist, bisection on the certified
    bracket isolates the bottom eigenvalue and the iteration is restarted
    with that shift.

    Returns ``(vector, value, converged)``.  On non-convergence the iterate
    with the smallest Rayleigh quotient seen (including ``start``) is
    returned with ``converged = False``.
    """
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    x = np.asarray(start, dtype=np.float64).copy()
    nx = np.linalg.norm(x)
    if nx < ZERO_ROW_TOL:
        raise ValueError("start vector must be nonzero")
    x /= nx
    scale = float(np.trace(A))
    if scale <= 0.0:
        return x, 0.0, True  # zero matrix: every unit vector qualifies
    B = A + (1e-12 * scale) * np.eye(d)
    res_tol = tol * scale

    def eig_residual(v):
        th = float(v @ B @ v)
        return th, float(np.linalg.norm(B @ v - th * v))

    theta, r = eig_residual(x)
    best_theta, best_x = theta, x.copy()
    sigma = 0.0
    settled = False
    for _ in range(max_iter):
        try:
            z = np.linalg.solve(B - sigma * np.eye(d), x)
        except np.linalg.LinAlgError:
            sigma -= max(1e-12 * scale, 1e-300)  # shift sits on an eigenvalue
            continue
        nz = np.linalg.norm(z)
        if not np.isfinite(nz) or nz == 0.0:
            sigma -= max(1e-10 * scale, 1e-300)
            continue
        xn = z / nz
        if xn @ x < 0.0:
            xn = -xn
        moved = float(np.linalg.norm(xn - x))
        x = xn
        theta, r = eig_residual(x)
        if theta < best_theta:
            best_theta, best_x = theta, x.copy()
        if r <= res_tol and moved <= tol:
            settled = True
            break
        sigma = max(0.0, theta - r)
    if settled or r <= res_tol:
        # certify: no eigenvalue strictly below what we found
        margin = max(2.0 * r, 8.0 * np.finfo(float).eps * scale)
        if _count_below(B, theta - margin) == 0:
            value = max(theta - 1e-12 * scale, 0.0)
            return x, value, True
        x, theta, converged = _bottom_by_bisection(B, x, theta - margin, scale, tol)
        if converged:
            return x, max(theta - 1e-12 * scale, 0.0), True
        if theta < best_theta:
            best_theta, best_x = theta, x
    return best_x, max(best_theta - 1e-12 * scale, 0.0), False


def _bottom_by_bisection(B, x, hi, scale, tol):
    """Isolate the bottom eigenvalue in [0, hi] by inertia bisection, then polish.

    Precondition: B is positive definite and at least one eigenvalue lies
    below ``hi``.  Deterministic basis restarts cover the case where the
    current iterate is exactly orthogonal to the bottom eigenvector.
    """
    d = B.shape[0]
    lo = 0.0
    width_target = max(1e-13 * scale, 5e-324)
    for _ in range(80):
        if hi - lo <= width_target:
            break
        mid = 0.5 * (lo + hi)
        if _count_below(B, mid) >= 1:
            hi = mid
        else:
            lo = mid
    sigma = 0.5 * (lo + hi)
    res_tol = tol * scale
    starts = [x] + [np.eye(d)[j] for j in range(d)]
    for x0 in starts:
        v = x0 / np.linalg.norm(x0)
        for _ in range(5):
            try:
                z = np.linalg.solve(B - sigma * np.eye(d), v)
            except np.linalg.LinAlgError:
                sigma -= max(1e-13 * scale, 1e-300)
                continue
            nz = np.linalg.norm(z)
            if not np.isfinite(nz) or nz == 0.0:
                break
            v = z / nz
            theta = float(v @ B @ v)
            r = float(np.linalg.norm(B @ v - theta * v))
            if r <= res_tol and theta <= hi + (hi - lo):
                if v @ x < 0.0:
                    v = -v
                return v, theta, True
    theta = float(v @ B @ v)
    return v, theta, False


def svaol_step(operator, accumulators, max_iter=50, tol=1e-10):
    """Replace every row by a smallest eigenvector of its accumulator.

    Signs are chosen so the new row has nonnegative inner product with the
    old one.  Rows whose eigen-iteration did not converge keep the best
    iterate found and are counted in the returned info.
    """
    rows = _rows(operator).copy()
    K = rows.shape[0]
    failures = 0
    for k in range(K):
        if accumulators.counts[k] == 0:
            continue
        v, _, ok = smallest_eigenvector(
            accumulators.matrices[k], rows[k], max_iter, tol
        )
        if float(v @ rows[k]) < 0.0:
            v = -v
        rows[k] = v
        if not ok:
            failures += 1
    return AnalysisOperator(rows), failures


def svaol_iteration(operator, batch, ell, max_iter=50, tol=1e-10):
    """Select, accumulate and apply :func:`svaol_step` in one call."""
    selection, accums = accumulate(operator, batch, ell)
    rows = _rows(operator)
    objective = float(np.einsum("kd,kde,ke->", rows, accums.matrices, rows))
    updated, failures = svaol_step(operator, accums, max_iter, tol)
    info = IterationInfo(objective, accums.counts.copy(), None, failures)
    return updated, info


def replace_coherent(operator, state, rng):
    """Decorrelate row pairs whose coherence exceeds ``state.mu0``.

    Pairs are processed in decreasing order of coherence, re-checking after
    every change.  In each pair the row with the smaller activation counter
    loses (ties: the higher index) and is replaced by the normalised
    difference ``loser - <winner, loser> winner``; the winner is never
    touched.  Exactly parallel rows are redrawn uniformly from the sphere.
    Counters are reset after a sweep that performed any replacement.

    Returns ``(operator, events)``.
    """
    rows = _rows(operator).copy()
    K = rows.shape[0]
    gen = as_source(rng).generator
    events = []
    for _ in range(16 * K * K):  # safety bound; terminates long before
        gram = rows @ rows.T
        np.fill_diagonal(gram, 0.0)
        flat = np.argmax(np.abs(gram))
        i, j = divmod(int(flat), K)
        mu = abs(gram[i, j])
        if mu <= state.mu0:
            break
        vi, vj = state.counters[i], state.counters[j]
        if vi > vj or (vi == vj and i < j):
            keep, lose = i, j
        else:
            keep, lose = j, i
        new = rows[lose] - gram[keep, lose] * rows[keep]
        nn = np.linalg.norm(new)
        redrawn = nn < ZERO_ROW_TOL
        if redrawn:
            draw = gen.standard_normal(rows.shape[1])
            rows[lose] = draw / np.linalg.norm(draw)
        else:
            rows[lose] = new / nn
        events.append(ReplacementEvent(keep, lose, float(mu), redrawn))
    if events:
        state.reset()
    return AnalysisOperator(rows), events

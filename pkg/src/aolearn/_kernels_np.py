"""Pure-numpy implementations of the hot kernels.

The compiled extension (``aolearn._kernels``) provides the same four entry
points with identical semantics; :mod:`aolearn.backend` picks one at import
time.  Results of the two backends agree to floating-point roundoff but are
not bit-identical (summation orders differ).
"""

import numpy as np

name = "numpy"


def select_mask(prods, ell):
    """Membership mask of the ``ell`` smallest responses per signal.

    ``prods`` is the K x N response matrix (operator rows times signals).
    Returns a boolean (K, N) array whose column n marks the ``ell`` rows with
    the smallest ``|prods[:, n]|``; ties at the threshold value are resolved
    in favour of the lowest row index.
    """
    prods = np.ascontiguousarray(prods, dtype=np.float64)
    K, N = prods.shape
    if ell <= 0:
        return np.zeros((K, N), dtype=bool)
    if ell >= K:
        return np.ones((K, N), dtype=bool)
    mag = np.abs(prods)
    thresh = np.partition(mag, ell - 1, axis=0)[ell - 1]
    mask = mag <= thresh
    excess = mask.sum(axis=0) - ell
    for n in np.nonzero(excess > 0)[0]:
        # several entries tie with the threshold: drop the highest indices
        tied = np.nonzero(mag[:, n] == thresh[n])[0]
        mask[tied[tied.size - excess[n]:], n] = False
    return mask


def accumulate(Y, mask):
    """Per-row second-moment matrices A_k = sum of y y^T over selected signals.

    Returns ``(A, counts)`` with ``A`` of shape (K, d, d) and integer counts
    of selected signals per row.
    """
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    d, N = Y.shape
    K = mask.shape[0]
    A = np.zeros((K, d, d))
    counts = mask.sum(axis=1).astype(np.int64)
    for k in range(K):
        if counts[k]:
            Yk = Y[:, mask[k]]
            A[k] = Yk @ Yk.T
    return A, counts


def saol_stream(rows, Y, ell, phase2_start):
    """Single pass of the sequential learner over the signal stream.

    Maintains per-row running averages ``g_k`` of the gradient increments
    ``<row_k, y> y`` and, for signals from ``phase2_start`` (0-based) on,
    running averages ``c_k`` of ``<g_k, y>^2`` using the evolving ``g_k``.

    Returns ``(g, I, C, c, objective)`` where ``I``/``C`` count total and
    second-phase selections per row and ``objective`` is the sum of selected
    squared responses at the input operator.

    This fallback materialises the full K x N response matrix; the compiled
    backend processes the stream one signal at a time in O(Kd) memory.
    """
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64)
    K, d = rows.shape
    prods = rows @ Y
    mask = select_mask(prods, ell)
    objective = float(np.sum(prods[mask] ** 2))
    g = np.zeros((K, d))
    I = mask.sum(axis=1).astype(np.int64)
    C = mask[:, phase2_start:].sum(axis=1).astype(np.int64)
    c = np.zeros(K)
    for k in range(K):
        occ = np.nonzero(mask[k])[0]
        m = occ.size
        if m == 0:
            continue
        incs = prods[k, occ] * Y[:, occ]
        means = np.cumsum(incs, axis=1) / np.arange(1.0, m + 1.0)
        g[k] = means[:, -1]
        in_phase2 = occ >= phase2_start
        if in_phase2.any():
            ips = np.einsum(
                "dm,dm->m", means[:, in_phase2], Y[:, occ[in_phase2]]
            )
            c[k] = float(np.mean(ips ** 2))
    return g, I, C, c, objective


def project_complement(rows, cosupports, Z):
    """Project each column of Z onto the nullspace of its cosupport rows.

    ``cosupports`` is (N, ell) with row indices into ``rows``; column n of the
    result is ``(I - R^+ R) z_n`` for ``R = rows[cosupports[n]]``, computed via
    the Gram system ``(R R^T) x = R z``.  Returns ``(Y0, ok)`` where ``ok``
    flags columns whose Gram system was solvable; callers are expected to
    verify residuals and reroute unsafe columns through an exact projector.
    """
    Z = np.ascontiguousarray(Z, dtype=np.float64)
    N = Z.shape[1]
    ok = np.ones(N, dtype=bool)
    if cosupports.shape[1] == 0:
        return Z.copy(), ok
    sub = rows[cosupports]                       # (N, ell, d)
    zt = Z.T
    w = np.einsum("nld,nd->nl", sub, zt)
    G = sub @ sub.transpose(0, 2, 1)
    try:
        x = np.linalg.solve(G, w[..., None])[..., 0]
    except np.linalg.LinAlgError:
        x = np.zeros_like(w)
        for n in range(N):
            try:
                x[n] = np.linalg.solve(G[n], w[n])
            except np.linalg.LinAlgError:
                ok[n] = False
    out = zt - np.einsum("nld,nl->nd", sub, x)
    return np.ascontiguousarray(out.T), ok

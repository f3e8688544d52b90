"""Grayscale image pipeline: phantom, patches, noise, PSNR, PGM, denoising.

Images are 2-D float64 arrays in the nominal range [0, 255]; no clipping is
applied after adding noise or denoising.  Patches are vectorised
column-major, so a p x p patch becomes a d = p^2 column and batches of
patches plug directly into the operator-learning code.

The per-patch denoiser minimises

    lam * ||G z||_1  +  fidelity(z - y)

with fidelity either 0.5 ||.||_2^2 (proximal splitting default) or the plain
Euclidean norm ||.||_2, via ADMM with a shared prefactored normal matrix.
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, UncoveredPixel

# Standard ten-ellipse head phantom, high-contrast variant.
# Columns: additive intensity, semi-axes a, b, centre x0, y0, rotation (deg).
_PHANTOM_ELLIPSES = [
    (1.00, 0.6900, 0.9200, 0.00, 0.0000, 0.0),
    (-0.80, 0.6624, 0.8740, 0.00, -0.0184, 0.0),
    (-0.20, 0.1100, 0.3100, 0.22, 0.0000, -18.0),
    (-0.20, 0.1600, 0.4100, -0.22, 0.0000, 18.0),
    (0.10, 0.2100, 0.2500, 0.00, 0.3500, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, 0.1000, 0.0),
    (0.10, 0.0460, 0.0460, 0.00, -0.1000, 0.0),
    (0.10, 0.0460, 0.0230, -0.08, -0.6050, 0.0),
    (0.10, 0.0230, 0.0230, 0.00, -0.6060, 0.0),
    (0.10, 0.0230, 0.0460, 0.06, -0.6050, 0.0),
]


def _symmetric_axis(n):
    # pixel centres on [-1, 1], built mirror-symmetric so that left-right
    # reflection of the rendered image is exact in floating point
    half = (2.0 * np.arange(n // 2) + 1.0) / n
    if n % 2:
        return np.concatenate([-half[::-1], [0.0], half])
    return np.concatenate([-half[::-1], half])


def shepp_logan(n):
    """Render the standard ten-ellipse head phantom on an n x n grid.

    Intensities are scaled to [0, 255]; row 0 is the top of the head.
    """
    if n < 8:
        raise ValueError("n must be >= 8")
    xs = _symmetric_axis(n)
    ys = _symmetric_axis(n)[::-1]  # row 0 at the top
    X, Y = np.meshgrid(xs, ys)
    img = np.zeros((n, n))
    for value, a, b, x0, y0, phi in _PHANTOM_ELLIPSES:
        rad = math.radians(phi)
        cos, sin = math.cos(rad), math.sin(rad)
        u = (X - x0) * cos + (Y - y0) * sin
        v = -(X - x0) * sin + (Y - y0) * cos
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    # intensity sums are nonnegative by construction; remove roundoff dust
    return np.maximum(img, 0.0) * 255.0


def extract_patches(img, p):
    """All overlapping p x p patches of ``img`` as a d x N matrix.

    Patches are vectorised column-major (d = p^2) and enumerated row-major
    over their top-left coordinates, which are returned as an (N, 2) array.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if h < p or w < p:
        raise ValueError("image smaller than the patch size")
    windows = np.lib.stride_tricks.sliding_window_view(img, (p, p))
    nh, nw = windows.shape[:2]
    # column-major vectorisation of each patch: transpose the patch axes
    patches = windows.transpose(0, 1, 3, 2).reshape(nh * nw, p * p).T
    ii, jj = np.meshgrid(np.arange(nh), np.arange(nw), indexing="ij")
    coords = np.stack([ii.ravel(), jj.ravel()], axis=1)
    return np.ascontiguousarray(patches), coords


def reassemble_average(patches, coords, height, width):
    """Average overlapping patches back into an image.

    Every pixel becomes the arithmetic mean of all patch copies containing
    it; raises :class:`UncoveredPixel` if some pixel is covered by no patch.
    """
    patches = np.asarray(patches, dtype=np.float64)
    d, n = patches.shape
    p = int(round(math.sqrt(d)))
    if p * p != d:
        raise ValueError("patch vectors must have square length")
    if coords.shape[0] != n:
        raise ValueError("one coordinate pair per patch required")
    acc = np.zeros((height, width))
    cnt = np.zeros((height, width), dtype=np.int64)
    rows, cols = coords[:, 0], coords[:, 1]
    for dj in range(p):      # column-major vectorisation: column dj, row di
        for di in range(p):
            comp = patches[dj * p + di]
            np.add.at(acc, (rows + di, cols + dj), comp)
            np.add.at(cnt, (rows + di, cols + dj), 1)
    if (cnt == 0).any():
        raise UncoveredPixel(f"{int((cnt == 0).sum())} pixels have no patch")
    return acc / cnt


def add_gaussian_noise(img, sigma, rng):
    """Add i.i.d. N(0, sigma^2) noise per pixel; no clipping."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    from .core import as_source

    return img + sigma * as_source(rng).generator.standard_normal(img.shape)


def psnr(img, reference, peak=255.0):
    """10 log10(peak^2 / MSE) in dB; +inf when the images are identical."""
    img = np.asarray(img, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if img.shape != reference.shape:
        raise DimensionMismatch(f"{img.shape} vs {reference.shape}")
    mse = float(np.mean((img - reference) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------------------
# portable graymap I/O

def read_pgm(path):
    """Read a binary (P5) or ASCII (P2) PGM file.

    Returns ``(image, maxval)`` with the image as float64 holding the exact
    integer sample values.
    """
    with open(path, "rb") as fh:
        data = fh.read()

    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(data):
            raise ValueError(f"{path}: truncated header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    magic = tokens[0]
    width, height, maxval = (int(t) for t in tokens[1:4])
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    if not 0 < maxval < 65536:
        raise ValueError(f"{path}: maxval {maxval} out of range")
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.uint8
        count = width * height
        img = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
    else:
        img = np.array(data[pos:].split(), dtype=np.float64)
        if img.size != width * height:
            raise ValueError(f"{path}: expected {width * height} samples")
    return img.reshape(height, width).astype(np.float64), maxval


def write_pgm(path, img, maxval=255, binary=True):
    """Write an image as PGM, rounding and clipping samples to [0, maxval].

    Integer-valued images within range round-trip exactly through
    :func:`read_pgm`.
    """
    if not 0 < maxval < 65536:
        raise ValueError(f"maxval {maxval} out of range")
    img = np.asarray(img, dtype=np.float64)
    q = np.clip(np.rint(img), 0, maxval)
    h, w = img.shape
    if binary:
        dtype = np.dtype(">u2") if maxval > 255 else np.uint8
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
            fh.write(q.astype(dtype).tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(f"P2\n{w} {h}\n{maxval}\n")
            for row in q.astype(np.int64):
                fh.write(" ".join(str(v) for v in row))
                fh.write("\n")


# ---------------------------------------------------------------------------
# l1-analysis denoising

@dataclass(frozen=True)
class DenoiseConfig:
    """Settings of the per-patch denoiser and the surrounding pipeline."""

    lam: float
    patch: int = 8
    max_iter: int = 500
    tol: float = 1e-6          # residual tolerance, scaled by sqrt(d)
    peak: float = 255.0
    rho: float = 1.0           # ADMM penalty
    fidelity: str = "squared"  # "squared": 0.5||z-y||^2, "l2": ||z-y||_2

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.patch < 1:
            raise ValueError("patch must be >= 1")
        if self.fidelity not in ("squared", "l2"):
            raise ValueError("fidelity must be 'squared' or 'l2'")


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


_CHUNK = 4096        # columns solved together (cache friendliness)
_CHECK_EVERY = 5     # residual test cadence, in iterations


def denoise_batch(Y, operator, cfg, objective_every=0):
    """ADMM minimisation of lam ||G z||_1 + fidelity(z - y) per column of Y.

    All columns share one prefactored normal matrix and are processed in
    chunks; a column stops once its primal and dual residual norms drop below
    ``tol * sqrt(d)`` (tested every few iterations) or the iteration cap is
    reached.  Columns are independent, so the chunking does not change
    results.  Returns ``(Z, converged, history)`` where ``converged`` flags
    columns that met the tolerance and ``history`` lists the summed objective
    every ``objective_every`` iterations (single-chunk batches only).

    With ``fidelity="l2"`` the plain Euclidean data term is used; its
    proximal map shrinks the residual radially, so the solver structure is
    unchanged except for one extra splitting block.
    """
    from .objective import _rows

    G = _rows(operator)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    K, d = G.shape
    if Y.shape[0] != d:
        raise DimensionMismatch(f"operator dim {d} vs patch dim {Y.shape[0]}")
    n = Y.shape[1]
    if cfg.lam == 0.0:
        return Y.copy(), np.ones(n, dtype=bool), []
    if objective_every and n > _CHUNK:
        raise ValueError("objective monitoring requires a single-chunk batch")

    squared = cfg.fidelity == "squared"
    M = G.T @ G
    M = M + (1.0 / cfg.rho) * np.eye(d) if squared else M + np.eye(d)
    cho = scipy.linalg.cho_factor(M)

    out = np.empty_like(Y)
    done = np.zeros(n, dtype=bool)
    history = []
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        block, flags, history = _admm_block(
            Y[:, start:stop], G, cho, cfg, squared, objective_every
        )
        out[:, start:stop] = block
        done[start:stop] = flags
    return out, done, history


def _admm_block(Y, G, cho, cfg, squared, objective_every):
    d = Y.shape[0]
    n = Y.shape[1]
    lam, rho = cfg.lam, cfg.rho
    tol = cfg.tol * math.sqrt(d)

    y = Y.copy()
    Z = Y.copy()
    U = G @ Z                    # auxiliary u ~ G z
    Wu = np.zeros_like(U)
    V = None if squared else Y.copy()   # auxiliary v ~ z (l2 mode)
    Wv = None if squared else np.zeros_like(Y)

    out = np.empty_like(Y)
    done = np.zeros(n, dtype=bool)
    active = np.arange(n)
    history = []
    it = 0
    while active.size and it < cfg.max_iter:
        it += 1
        check = it % _CHECK_EVERY == 0 or it == cfg.max_iter
        if squared:
            rhs = y / rho + G.T @ (U - Wu)
            Z = scipy.linalg.cho_solve(cho, rhs, overwrite_b=True)
            GZ = G @ Z
            U_old = U if check else None
            U = _soft(GZ + Wu, lam / rho)
            Wu += GZ
            Wu -= U
            if check:
                r = np.linalg.norm(GZ - U, axis=0)
                s = rho * np.linalg.norm(G.T @ (U - U_old), axis=0)
        else:
            rhs = G.T @ (U - Wu)
            rhs += V
            rhs -= Wv
            Z = scipy.linalg.cho_solve(cho, rhs, overwrite_b=True)
            GZ = G @ Z
            U_old = U if check else None
            V_old = V if check else None
            U = _soft(GZ + Wu, lam / rho)
            t = Z + Wv - y
            tn = np.sqrt(np.einsum("dn,dn->n", t, t))
            shrink = np.maximum(0.0, 1.0 - 1.0 / (rho * np.maximum(tn, 1e-300)))
            V = y + shrink * t
            Wu += GZ
            Wu -= U
            Wv += Z
            Wv -= V
            if check:
                r = np.sqrt(
                    np.linalg.norm(GZ - U, axis=0) ** 2
                    + np.linalg.norm(Z - V, axis=0) ** 2
                )
                s = rho * np.sqrt(
                    np.linalg.norm(G.T @ (U - U_old), axis=0) ** 2
                    + np.linalg.norm(V - V_old, axis=0) ** 2
                )
        if objective_every and (it % objective_every == 0 or it == 1):
            fid = (
                0.5 * np.sum((Z - y) ** 2)
                if squared
                else np.sum(np.sqrt(np.einsum("dn,dn->n", Z - y, Z - y)))
            )
            history.append(float(lam * np.abs(G @ Z).sum() + fid))
        if not check:
            continue
        finished = (r <= tol) & (s <= tol)
        if finished.any():
            sel = np.nonzero(finished)[0]
            out[:, active[sel]] = Z[:, sel]
            done[active[sel]] = True
            keep = ~finished
            active = active[keep]
            Z, U, Wu, y = Z[:, keep], U[:, keep], Wu[:, keep], y[:, keep]
            if not squared:
                V, Wv = V[:, keep], Wv[:, keep]
    if active.size:
        out[:, active] = Z
    return out, done, history


def denoise_patch(y, operator, lam, cfg=None, objective_every=0):
    """Denoise one vectorised patch; see :func:`denoise_batch`.

    Returns ``(patch, converged)`` or ``(patch, converged, history)`` when
    ``objective_every`` is set.
    """
    if cfg is None:
        cfg = DenoiseConfig(lam=lam)
    elif cfg.lam != lam:
        cfg = DenoiseConfig(
            lam=lam, patch=cfg.patch, max_iter=cfg.max_iter, tol=cfg.tol,
            peak=cfg.peak, rho=cfg.rho, fidelity=cfg.fidelity,
        )
    Z, done, history = denoise_batch(
        np.asarray(y, dtype=np.float64)[:, None], operator, cfg,
        objective_every=objective_every,
    )
    if objective_every:
        return Z[:, 0], bool(done[0]), history
    return Z[:, 0], bool(done[0])


def denoise_image(img, operator, cfg):
    """Patch-extract, denoise every patch, and reassemble by averaging.

    Returns ``(image, n_unconverged)``; the count aggregates patches whose
    solver hit the iteration cap.
    """
    img = np.asarray(img, dtype=np.float64)
    patches, coords = extract_patches(img, cfg.patch)
    Z, done, _ = denoise_batch(patches, operator, cfg)
    return (
        reassemble_average(Z, coords, img.shape[0], img.shape[1]),
        int((~done).sum()),
    )

"""
Generalized Schur (QZ) decomposition of real matrix pencils and the
chordal-distance loss built on top of it.

The native QZ follows the classic Moler-Stewart scheme: Householder QR
of B, Givens reduction to Hessenberg-triangular form, then implicit
double-shift sweeps with deflation (including infinite eigenvalues from
a singular B). ``backend="lapack"`` routes through ``scipy.linalg.qz``
and is meant for hot loops; both backends share eigenvalue extraction
and ordering.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import LengthMismatch, NonConvergence, NonFinite, ShapeMismatch

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class Pencil:
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.array(self.a, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape != b.shape:
            raise ShapeMismatch(f"pencil needs two equal square matrices, got {a.shape} and {b.shape}")
        if a.shape[0] < 1:
            raise ShapeMismatch("pencil must be at least 1x1")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise NonFinite("pencil has non-finite entries")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.a.shape[0]


@dataclass(frozen=True)
class GeneralizedEigen:
    """Real QZ factors plus sorted projective eigenvalue pairs.

    ``q.T @ a @ z == s`` and ``q.T @ b @ z == t``. ``alpha``/``beta`` are
    sorted finite-first, then by real part, then by imaginary part; the
    Schur factors themselves keep the order the sweeps produced.
    """

    alpha: np.ndarray
    beta: np.ndarray
    q: np.ndarray
    z: np.ndarray
    s: np.ndarray
    t: np.ndarray

    @property
    def eigenvalues(self) -> np.ndarray:
        out = np.full(self.alpha.shape, complex(np.inf, 0.0))
        finite = self.beta != 0
        out[finite] = self.alpha[finite] / self.beta[finite]
        return out

    @property
    def n_infinite(self) -> int:
        return int(np.sum(self.beta == 0))


@dataclass(frozen=True)
class ChordalReport:
    pairwise: np.ndarray
    gamma: float
    total: float
    mean_eig_magnitude: float
    ill_count: int
    translation: np.ndarray  # mu_i = lambda_g / lambda_x, debug only


# ---------------------------------------------------------------------------
# elementary transforms (in place)
# ---------------------------------------------------------------------------

def _givens(x: float, y: float) -> tuple[float, float]:
    """(c, s) with [c s; -s c] @ [x, y] = [r, 0]."""
    r = np.hypot(x, y)
    if r == 0.0:
        return 1.0, 0.0
    return x / r, y / r


def _rot_rows(m: np.ndarray, i: int, j: int, c: float, s: float, cols: slice) -> None:
    mi = m[i, cols].copy()
    mj = m[j, cols]
    m[i, cols] = c * mi + s * mj
    m[j, cols] = c * mj - s * mi


def _rot_cols(m: np.ndarray, i: int, j: int, c: float, s: float, rows: slice) -> None:
    mi = m[rows, i].copy()
    mj = m[rows, j]
    m[rows, i] = c * mi + s * mj
    m[rows, j] = c * mj - s * mi


def _right_zeroing(x: float, y: float) -> tuple[float, float]:
    """(c, s) such that rotating columns (p, q) with _rot_cols zeros the p entry of (x, y)."""
    r = np.hypot(x, y)
    if r == 0.0:
        return 1.0, 0.0
    return y / r, -x / r


def _house(x: np.ndarray, target: int = 0) -> tuple[np.ndarray, float]:
    """Householder (v, tau): (I - tau v v^T) x is a multiple of e_target."""
    v = np.array(x, dtype=np.float64)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return v, 0.0
    alpha = -norm if v[target] >= 0 else norm
    v[target] -= alpha
    vv = float(v @ v)
    if vv == 0.0:
        return v, 0.0
    return v, 2.0 / vv


def _house_left(m: np.ndarray, rows: slice, cols: slice, v: np.ndarray, tau: float) -> None:
    if tau == 0.0:
        return
    blk = m[rows, cols]
    blk -= tau * np.outer(v, v @ blk)


def _house_right(m: np.ndarray, rows: slice, cols: slice, v: np.ndarray, tau: float) -> None:
    if tau == 0.0:
        return
    blk = m[rows, cols]
    blk -= tau * np.outer(blk @ v, v)


# ---------------------------------------------------------------------------
# native QZ
# ---------------------------------------------------------------------------

def _hessenberg_triangular(a, b, q, z):
    n = a.shape[0]
    for k in range(n - 1):
        v, tau = _house(b[k:, k])
        _house_left(b, slice(k, n), slice(k, n), v, tau)
        _house_left(a, slice(k, n), slice(0, n), v, tau)
        _house_right(q, slice(0, n), slice(k, n), v, tau)
        b[k + 1:, k] = 0.0
    for j in range(n - 2):
        for i in range(n - 1, j + 1, -1):
            c, s = _givens(a[i - 1, j], a[i, j])
            _rot_rows(a, i - 1, i, c, s, slice(j, n))
            _rot_rows(b, i - 1, i, c, s, slice(i - 1, n))
            _rot_cols(q, i - 1, i, c, s, slice(0, n))
            a[i, j] = 0.0
            c, s = _right_zeroing(b[i, i - 1], b[i, i])
            _rot_cols(a, i - 1, i, c, s, slice(0, n))
            _rot_cols(b, i - 1, i, c, s, slice(0, i + 1))
            _rot_cols(z, i - 1, i, c, s, slice(0, n))
            b[i, i - 1] = 0.0


def _chase_infinite(a, b, q, z, j, lo, hi):
    """Move a zero at b[j, j] down to b[hi, hi] and deflate it there."""
    n = a.shape[0]
    for i in range(j, hi):
        c, s = _givens(b[i, i + 1], b[i + 1, i + 1])
        _rot_rows(b, i, i + 1, c, s, slice(i, n))
        _rot_rows(a, i, i + 1, c, s, slice(max(i - 1, 0), n))
        _rot_cols(q, i, i + 1, c, s, slice(0, n))
        b[i + 1, i + 1] = 0.0
        if i - 1 >= lo:
            c, s = _right_zeroing(a[i + 1, i - 1], a[i + 1, i])
            _rot_cols(a, i - 1, i, c, s, slice(0, i + 2))
            _rot_cols(b, i - 1, i, c, s, slice(0, i + 1))
            _rot_cols(z, i - 1, i, c, s, slice(0, n))
            a[i + 1, i - 1] = 0.0
            b[i, i - 1] = 0.0
    c, s = _right_zeroing(a[hi, hi - 1], a[hi, hi])
    _rot_cols(a, hi - 1, hi, c, s, slice(0, hi + 1))
    _rot_cols(b, hi - 1, hi, c, s, slice(0, hi + 1))
    _rot_cols(z, hi - 1, hi, c, s, slice(0, n))
    a[hi, hi - 1] = 0.0
    b[hi, hi - 1] = 0.0


def _block_roots(a2: np.ndarray, b2: np.ndarray) -> tuple[complex, complex]:
    """Roots of det(a2 - lam * b2) for a 2x2 block with upper-triangular b2."""
    qa = b2[0, 0] * b2[1, 1]
    qb = -(a2[0, 0] * b2[1, 1] + a2[1, 1] * b2[0, 0] - a2[1, 0] * b2[0, 1])
    qc = a2[0, 0] * a2[1, 1] - a2[0, 1] * a2[1, 0]
    disc = qb * qb - 4.0 * qa * qc
    if disc >= 0.0:
        root = np.sqrt(disc)
        # cancellation-free pair
        w = -0.5 * (qb + np.copysign(root, qb))
        r1 = w / qa
        r2 = qc / w if w != 0.0 else -qb / qa - r1
        return complex(r1), complex(r2)
    re = -qb / (2.0 * qa)
    im = np.sqrt(-disc) / (2.0 * abs(qa))
    return complex(re, im), complex(re, -im)


def _split_real_block(a, b, q, z, lo):
    """Triangularize a 2x2 block with real eigenvalues; returns False if complex."""
    n = a.shape[0]
    sl = slice(lo, lo + 2)
    a2, b2 = a[sl, sl], b[sl, sl]
    r1, r2 = _block_roots(a2, b2)
    if r1.imag != 0.0:
        return False
    lam = r1.real
    m = a2 - lam * b2
    row = m[0] if np.hypot(*m[0]) >= np.hypot(*m[1]) else m[1]
    # null vector of m is proportional to (row[1], -row[0]); make it Z's first column
    c, s = _givens(row[1], -row[0])
    if row[0] == 0.0 and row[1] == 0.0:
        c, s = 1.0, 0.0
    _rot_cols(a, lo, lo + 1, c, s, slice(0, lo + 2))
    _rot_cols(b, lo, lo + 1, c, s, slice(0, lo + 2))
    _rot_cols(z, lo, lo + 1, c, s, slice(0, n))
    ca = np.hypot(a[lo, lo], a[lo + 1, lo])
    cb = np.hypot(b[lo, lo], b[lo + 1, lo])
    if cb >= ca:
        c, s = _givens(b[lo, lo], b[lo + 1, lo])
    else:
        c, s = _givens(a[lo, lo], a[lo + 1, lo])
    _rot_rows(a, lo, lo + 1, c, s, slice(lo, n))
    _rot_rows(b, lo, lo + 1, c, s, slice(lo, n))
    _rot_cols(q, lo, lo + 1, c, s, slice(0, n))
    a[lo + 1, lo] = 0.0
    b[lo + 1, lo] = 0.0
    return True


def _double_shift_sweep(a, b, q, z, lo, hi, exceptional: bool):
    n = a.shape[0]
    if exceptional:
        w = abs(a[hi, hi - 1] / b[hi - 1, hi - 1]) + abs(a[hi - 1, hi - 2] / b[hi - 2, hi - 2])
        tr, det = 1.5 * w, w * w
    else:
        t3 = np.linalg.inv(b[hi - 2:hi + 1, hi - 2:hi + 1])
        mtr = a[hi - 1:hi + 1, hi - 2:hi + 1] @ t3[:, 1:3]
        tr = mtr[0, 0] + mtr[1, 1]
        det = mtr[0, 0] * mtr[1, 1] - mtr[0, 1] * mtr[1, 0]
    t2 = np.linalg.inv(b[lo:lo + 2, lo:lo + 2])
    mc = a[lo:lo + 3, lo:lo + 2] @ t2
    me1 = mc[:, 0]
    m2e1 = mc @ me1[:2]
    v = m2e1 - tr * me1
    v[0] += det

    for k in range(lo, hi - 1):
        if k > lo:
            v = a[k:k + 3, k - 1].copy()
        h, tau = _house(v)
        rows = slice(k, k + 3)
        _house_left(a, rows, slice(max(k - 1, lo), n), h, tau)
        _house_left(b, rows, slice(k, n), h, tau)
        _house_right(q, slice(0, n), rows, h, tau)
        if k > lo:
            a[k + 1, k - 1] = 0.0
            a[k + 2, k - 1] = 0.0
        top = min(k + 4, hi + 1)
        h, tau = _house(b[k + 2, k:k + 3], target=2)
        _house_right(a, slice(0, top), rows, h, tau)
        _house_right(b, slice(0, k + 3), rows, h, tau)
        _house_right(z, slice(0, n), rows, h, tau)
        b[k + 2, k] = 0.0
        b[k + 2, k + 1] = 0.0
        c, s = _right_zeroing(b[k + 1, k], b[k + 1, k + 1])
        _rot_cols(a, k, k + 1, c, s, slice(0, top))
        _rot_cols(b, k, k + 1, c, s, slice(0, k + 2))
        _rot_cols(z, k, k + 1, c, s, slice(0, n))
        b[k + 1, k] = 0.0

    k = hi - 1
    c, s = _givens(a[k, k - 1], a[k + 1, k - 1])
    _rot_rows(a, k, k + 1, c, s, slice(k - 1, n))
    _rot_rows(b, k, k + 1, c, s, slice(k, n))
    _rot_cols(q, k, k + 1, c, s, slice(0, n))
    a[k + 1, k - 1] = 0.0
    c, s = _right_zeroing(b[k + 1, k], b[k + 1, k + 1])
    _rot_cols(a, k, k + 1, c, s, slice(0, hi + 1))
    _rot_cols(b, k, k + 1, c, s, slice(0, hi + 1))
    _rot_cols(z, k, k + 1, c, s, slice(0, n))
    b[k + 1, k] = 0.0


def _qz_native(a0: np.ndarray, b0: np.ndarray):
    n = a0.shape[0]
    a, b = a0.copy(), b0.copy()
    q, z = np.eye(n), np.eye(n)
    if n == 1:
        return a, b, q, z
    _hessenberg_triangular(a, b, q, z)
    anorm = np.linalg.norm(a) or 1.0
    bnorm = np.linalg.norm(b) or 1.0
    atol = _EPS * anorm
    btol = _EPS * bnorm

    max_sweeps = 30 * n
    sweeps = 0
    since_deflation = 0
    hi = n - 1
    while hi >= 0:
        lo = hi
        while lo > 0:
            sub = abs(a[lo, lo - 1])
            if sub <= atol or sub <= _EPS * (abs(a[lo, lo]) + abs(a[lo - 1, lo - 1])):
                a[lo, lo - 1] = 0.0
                break
            lo -= 1
        if lo == hi:
            hi -= 1
            since_deflation = 0
            continue
        zero_diag = next((j for j in range(lo, hi + 1) if abs(b[j, j]) <= btol), None)
        if zero_diag is not None:
            b[zero_diag, zero_diag] = 0.0
            _chase_infinite(a, b, q, z, zero_diag, lo, hi)
            since_deflation = 0
            continue
        if hi - lo == 1:
            _split_real_block(a, b, q, z, lo)
            hi -= 2
            since_deflation = 0
            continue
        sweeps += 1
        since_deflation += 1
        if sweeps > max_sweeps:
            raise NonConvergence(f"QZ did not converge within {max_sweeps} sweeps (n={n})")
        _double_shift_sweep(a, b, q, z, lo, hi, exceptional=since_deflation in (10, 20))
    return a, b, q, z


def _qz_lapack(a0: np.ndarray, b0: np.ndarray):
    from scipy.linalg import qz

    try:
        s, t, q, z = qz(a0, b0, output="real")
    except np.linalg.LinAlgError as exc:
        raise NonConvergence(str(exc)) from exc
    return s, t, q, z


def _extract(s: np.ndarray, t: np.ndarray):
    n = s.shape[0]
    alpha = np.zeros(n, dtype=np.complex128)
    beta = np.zeros(n)
    i = 0
    while i < n:
        if i + 1 < n and s[i + 1, i] != 0.0:
            sl = slice(i, i + 2)
            r1, r2 = _block_roots(s[sl, sl], t[sl, sl])
            # one shared beta keeps the conjugates' real parts bitwise equal
            b_pair = np.sqrt(abs(t[i, i] * t[i + 1, i + 1]))
            for j, r in ((i, r1), (i + 1, r2)):
                beta[j] = b_pair
                alpha[j] = r * b_pair
            i += 2
        else:
            alpha[i] = s[i, i]
            beta[i] = t[i, i]
            i += 1
    neg = beta < 0
    alpha[neg] = -alpha[neg]
    beta[neg] = -beta[neg]
    return alpha, beta


def _order(alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    finite = beta != 0
    lam = np.zeros(alpha.shape, dtype=np.complex128)
    lam[finite] = alpha[finite] / beta[finite]
    # lexsort: last key is primary
    return np.lexsort((lam.imag, lam.real, ~finite))


def qz_decompose(p: Pencil, backend: str = "native") -> GeneralizedEigen:
    """Real generalized Schur form of the pencil ``a - mu * b``."""
    if not isinstance(p, Pencil):
        p = Pencil(*p)
    if backend == "native":
        s, t, q, z = _qz_native(p.a, p.b)
    elif backend == "lapack":
        s, t, q, z = _qz_lapack(p.a, p.b)
    else:
        raise ValueError(f"unknown QZ backend {backend!r}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(t))):
        raise NonFinite("QZ produced non-finite factors")
    alpha, beta = _extract(s, t)
    order = _order(alpha, beta)
    return GeneralizedEigen(alpha[order], beta[order], q, z, s, t)


def matrix_eigenvalues(m, backend: str = "native") -> np.ndarray:
    """Eigenvalues of a square matrix via the pencil (m, I), in canonical order."""
    m = np.asarray(getattr(m, "values", m), dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeMismatch(f"expected a square matrix, got {m.shape}")
    return qz_decompose(Pencil(m, np.eye(m.shape[0])), backend=backend).eigenvalues


def chordal_distance(a: complex, b: complex) -> float:
    """Chordal distance between two points of the extended complex plane, in [0, 1]."""
    a_inf = np.isinf(a.real) or np.isinf(a.imag) if isinstance(a, complex) else np.isinf(a)
    b_inf = np.isinf(b.real) or np.isinf(b.imag) if isinstance(b, complex) else np.isinf(b)
    if a_inf and b_inf:
        return 0.0
    if a_inf:
        return 1.0 / np.sqrt(1.0 + abs(b) ** 2)
    if b_inf:
        return 1.0 / np.sqrt(1.0 + abs(a) ** 2)
    d = abs(a - b) / (np.sqrt(1.0 + abs(a) ** 2) * np.sqrt(1.0 + abs(b) ** 2))
    return float(min(d, 1.0))


def chordal_vector(lam_g: Sequence[complex], lam_x: Sequence[complex]) -> np.ndarray:
    """Index-aligned chordal distances (vectorized, same values as the scalar op)."""
    g = np.asarray(lam_g, dtype=np.complex128)
    x = np.asarray(lam_x, dtype=np.complex128)
    if g.shape != x.shape:
        raise LengthMismatch(f"eigenvalue vectors differ in length: {g.shape} vs {x.shape}")
    g_inf = np.isinf(g)
    x_inf = np.isinf(x)
    gf = np.where(g_inf, 0.0, g)
    xf = np.where(x_inf, 0.0, x)
    ng = np.sqrt(1.0 + np.abs(gf) ** 2)
    nx = np.sqrt(1.0 + np.abs(xf) ** 2)
    out = np.minimum(np.abs(gf - xf) / (ng * nx), 1.0)
    out = np.where(g_inf & ~x_inf, 1.0 / nx, out)
    out = np.where(x_inf & ~g_inf, 1.0 / ng, out)
    out = np.where(g_inf & x_inf, 0.0, out)
    return out


def chordal_loss(x_g, x_t, tol_beta: float = 1e-6, kappa: float = 1.0,
                 backend: str = "native", lam_x: Optional[np.ndarray] = None) -> ChordalReport:
    """Chordal distance adjustment between a generated grid and a target grid.

    total = mean(chord(lambda[x_g], lambda[x_t])) + gamma, where gamma is kappa
    times the fraction of near-zero beta in the pencil (x_g, x_t). Pass
    ``lam_x`` (from :func:`matrix_eigenvalues`) to skip re-decomposing a fixed target.
    """
    g = np.asarray(getattr(x_g, "values", x_g), dtype=np.float64)
    x = np.asarray(getattr(x_t, "values", x_t), dtype=np.float64)
    if g.shape != x.shape or g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ShapeMismatch(f"chordal_loss needs equal square grids, got {g.shape} and {x.shape}")
    if tol_beta <= 0:
        raise ValueError("tol_beta must be positive")
    n = g.shape[0]
    lam_g = matrix_eigenvalues(g, backend)
    if lam_x is None:
        lam_x = matrix_eigenvalues(x, backend)
    pairwise = chordal_vector(lam_g, lam_x)
    ge = qz_decompose(Pencil(g, x), backend=backend)
    mag = np.abs(ge.beta)
    mean_beta = float(np.mean(mag))
    ill = int(np.sum(mag <= tol_beta * mean_beta)) if mean_beta > 0 else n
    gamma = kappa * ill / n
    total = float(np.mean(pairwise)) + gamma
    with np.errstate(divide="ignore", invalid="ignore"):
        translation = np.where(lam_x != 0, lam_g / np.where(lam_x != 0, lam_x, 1.0), np.inf)
    return ChordalReport(
        pairwise=pairwise,
        gamma=float(gamma),
        total=total,
        mean_eig_magnitude=float(np.mean(np.abs(lam_x))),
        ill_count=ill,
        translation=translation,
    )

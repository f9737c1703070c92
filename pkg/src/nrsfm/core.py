"""Domain types and closed-form linear algebra for orthographic NRSfM.

Conventions: the measurement matrix W is 2F x N with rows (2f, 2f+1)
holding the x and y image coordinates of frame f (0-based).  Shape
sequences are 3F x N with row trebles (3f, 3f+1, 3f+2) holding x, y, z.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AmbiguousProjectionError,
    DegenerateFrameError,
    DegenerateMotionError,
    InvalidInputError,
)

# Gram matrices with condition number above this are treated as degenerate.
CONDITION_CAP = 1e12


def thin_svd(a):
    """Thin SVD with a deterministic sign convention.

    Returns (U, s, Vt) with singular values nonincreasing and the first
    entry of each left singular vector with magnitude above 1e-13 made
    nonnegative (the corresponding row of Vt is flipped to compensate).
    """
    u, s, vt = np.linalg.svd(np.asarray(a, dtype=float), full_matrices=False)
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-13)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            vt[j, :] = -vt[j, :]
    return u, s, vt


@dataclass(frozen=True)
class MeasurementMatrix:
    """Centered 2D tracks, 2F x N, plus the removed per-frame centroids."""

    data: np.ndarray
    frames: int
    points: int
    reference_index: int = 0
    translations: np.ndarray = None

    def __post_init__(self):
        if self.data.shape != (2 * self.frames, self.points):
            raise InvalidInputError(
                "measurement matrix shape %s does not match F=%d, N=%d"
                % (self.data.shape, self.frames, self.points))
        if self.translations is None:
            object.__setattr__(self, "translations",
                               np.zeros((self.frames, 2)))

    def frame(self, f):
        """2 x N block of frame f."""
        return self.data[2 * f:2 * f + 2]


@dataclass(frozen=True)
class ShapeSequence:
    """Time-varying 3D structure, 3F x N."""

    data: np.ndarray
    frames: int
    points: int

    def __post_init__(self):
        if self.data.shape != (3 * self.frames, self.points):
            raise InvalidInputError(
                "shape sequence shape %s does not match F=%d, N=%d"
                % (self.data.shape, self.frames, self.points))

    def frame(self, f):
        """3 x N block of frame f."""
        return self.data[3 * f:3 * f + 3]

    def permuted(self):
        """Rearrange to F x 3N with one frame per row.

        Row f reads (x_1, y_1, z_1, x_2, y_2, z_2, ...).  Pure reindexing;
        round-trips bitwise through `from_permuted`.
        """
        F, N = self.frames, self.points
        return self.data.reshape(F, 3, N).transpose(0, 2, 1).reshape(F, 3 * N)

    @classmethod
    def from_permuted(cls, m):
        """Inverse of `permuted`."""
        m = np.asarray(m)
        F = m.shape[0]
        N = m.shape[1] // 3
        if m.shape[1] != 3 * N:
            raise InvalidInputError("permuted shape width must be 3N")
        data = m.reshape(F, N, 3).transpose(0, 2, 1).reshape(3 * F, N)
        return cls(data=data, frames=F, points=N)


@dataclass(frozen=True)
class CameraPoseSet:
    """Per-frame orthographic projection rows and full rotations."""

    rows2x3: np.ndarray                      # (F, 2, 3)
    full3x3: np.ndarray = None               # (F, 3, 3), may be absent

    @property
    def frames(self):
        return self.rows2x3.shape[0]

    def stacked(self):
        """2F x 3F block-diagonal camera matrix applied implicitly.

        Returns the (F, 2, 3) blocks; use `project` to apply them.
        """
        return self.rows2x3

    def project(self, shapes):
        """Apply the orthographic projection to a ShapeSequence, 2F x N."""
        F, N = shapes.frames, shapes.points
        s = shapes.data.reshape(F, 3, N)
        return np.einsum("fij,fjn->fin", self.rows2x3, s).reshape(2 * F, N)


@dataclass(frozen=True)
class PixelGridMask:
    """Image-domain mask mapping active pixels to track columns."""

    width: int
    height: int
    active: np.ndarray                       # (height, width) bool
    point_index: np.ndarray = None           # (height, width) int, -1 inactive

    def __post_init__(self):
        if self.active.shape != (self.height, self.width):
            raise InvalidInputError("mask grid shape mismatch")
        if self.point_index is None:
            idx = np.full((self.height, self.width), -1, dtype=int)
            idx[self.active] = np.arange(int(self.active.sum()))
            object.__setattr__(self, "point_index", idx)

    @property
    def points(self):
        return int(self.active.sum())

    def neighbor_tables(self):
        """Column indices of right/down neighbors for every active pixel.

        Returns (has_right, idx_right, has_down, idx_down), each of length
        N in column order.  Differences across the mask boundary are zero.
        """
        ys, xs = np.nonzero(self.active)
        order = np.argsort(self.point_index[ys, xs])
        ys, xs = ys[order], xs[order]
        n = ys.size
        has_right = np.zeros(n, dtype=bool)
        idx_right = np.zeros(n, dtype=int)
        has_down = np.zeros(n, dtype=bool)
        idx_down = np.zeros(n, dtype=int)
        inb_r = xs + 1 < self.width
        inb_d = ys + 1 < self.height
        r = np.where(inb_r, self.point_index[ys, np.minimum(xs + 1, self.width - 1)], -1)
        d = np.where(inb_d, self.point_index[np.minimum(ys + 1, self.height - 1), xs], -1)
        has_right = r >= 0
        idx_right = np.where(has_right, r, 0)
        has_down = d >= 0
        idx_down = np.where(has_down, d, 0)
        return has_right, idx_right, has_down, idx_down


def full_mask(height, width):
    """Mask with every pixel active, row-major point order."""
    return PixelGridMask(width=width, height=height,
                         active=np.ones((height, width), dtype=bool))


def center_measurements(w_raw):
    """Remove per-row centroids from raw 2D tracks.

    Returns a MeasurementMatrix with zero-mean rows and the removed
    per-frame (x, y) centroids, so that projection can be undone.
    """
    w_raw = np.asarray(w_raw, dtype=float)
    if not np.all(np.isfinite(w_raw)):
        raise InvalidInputError("non-finite entries in measurement matrix")
    if w_raw.ndim != 2 or w_raw.shape[0] % 2 != 0:
        raise InvalidInputError("measurement matrix must be 2F x N")
    F = w_raw.shape[0] // 2
    N = w_raw.shape[1]
    if F < 1 or N < 3:
        raise InvalidInputError("need F >= 1 and N >= 3, got F=%d, N=%d" % (F, N))
    means = w_raw.mean(axis=1)
    centered = w_raw - means[:, None]
    translations = means.reshape(F, 2)
    return MeasurementMatrix(data=centered, frames=F, points=N,
                             translations=translations)


def project_to_rotation(a):
    """Nearest (Frobenius) proper rotation to a 3x3 matrix.

    Uses R = U C V^T with C = diag(1, 1, sign(det(U V^T))).
    """
    a = np.asarray(a, dtype=float)
    if a.shape != (3, 3):
        raise InvalidInputError("expected a 3x3 matrix")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("non-finite entries")
    u, s, vt = thin_svd(a)
    scale = max(s[0], 1.0)
    if np.sum(s <= 1e-12 * scale) >= 2:
        raise AmbiguousProjectionError(
            "projection not unique: singular values %s" % s)
    c = np.array([1.0, 1.0, np.sign(np.linalg.det(u @ vt))])
    return (u * c) @ vt


def orthonormalize_rows(m2x3):
    """Nearest 2x3 matrix with orthonormal rows (thin SVD projection)."""
    u, s, vt = thin_svd(m2x3)
    return u @ vt


def complete_rotations(poses):
    """Fill full 3x3 rotations from 2x3 projection rows.

    The two rows are re-orthonormalized; the third row is their cross
    product, which makes each block a proper rotation.
    """
    rows = np.asarray(poses.rows2x3, dtype=float)
    F = rows.shape[0]
    full = np.zeros((F, 3, 3))
    fixed = np.zeros_like(rows)
    for f in range(F):
        r = orthonormalize_rows(rows[f])
        fixed[f] = r
        full[f, :2] = r
        full[f, 2] = np.cross(r[0], r[1])
    return CameraPoseSet(rows2x3=fixed, full3x3=full)


def rigid_init(w):
    """Tomasi-Kanade rank-3 factorization with metric upgrade.

    Returns (poses, shapes) where the rigid shape is replicated into every
    frame of a ShapeSequence.  Raises DegenerateMotionError when the
    numerical rank of W is below 3.
    """
    F, N = w.frames, w.points
    u, s, vt = thin_svd(w.data)
    if len(s) < 3 or s[2] <= 1e-8 * max(s[0], 1e-300):
        raise DegenerateMotionError(
            "measurement matrix rank < 3; largest singular values: %s"
            % s[:3])
    sqrt_s = np.sqrt(s[:3])
    m_hat = u[:, :3] * sqrt_s                # 2F x 3
    s_hat = sqrt_s[:, None] * vt[:3]         # 3 x N

    # Metric upgrade: symmetric Q = G G^T from M_f Q M_f^T = I_2.
    A = np.zeros((3 * F, 6))
    b = np.zeros(3 * F)
    # vech layout for symmetric 3x3: (00, 01, 02, 11, 12, 22)
    pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]

    def quad_row(x, y):
        row = np.zeros(6)
        for k, (i, j) in enumerate(pairs):
            row[k] = x[i] * y[j] + (x[j] * y[i] if i != j else 0.0)
        return row

    for f in range(F):
        xf, yf = m_hat[2 * f], m_hat[2 * f + 1]
        A[3 * f] = quad_row(xf, xf)
        b[3 * f] = 1.0
        A[3 * f + 1] = quad_row(yf, yf)
        b[3 * f + 1] = 1.0
        A[3 * f + 2] = quad_row(xf, yf)
    vech_q, *_ = np.linalg.lstsq(A, b, rcond=None)
    Q = np.zeros((3, 3))
    for k, (i, j) in enumerate(pairs):
        Q[i, j] = Q[j, i] = vech_q[k]
    evals, evecs = np.linalg.eigh(Q)
    # Non-rigid content can leave Q indefinite; clamping relative to the
    # largest eigenvalue keeps the depth direction of G usable instead of
    # collapsing it.
    floor = max(evals.max(), 1e-300) * 1e-2
    evals = np.clip(evals, floor, None)
    G = evecs @ np.diag(np.sqrt(evals))

    M = m_hat @ G
    rows = np.zeros((F, 2, 3))
    for f in range(F):
        rows[f] = orthonormalize_rows(M[2 * f:2 * f + 2])
    poses = complete_rotations(CameraPoseSet(rows2x3=rows))

    # Recompute the rigid shape against the projected rotations; the
    # rcond cutoff keeps a near-degenerate depth direction from blowing
    # the shape up when the rotations barely vary.
    M_proj = poses.rows2x3.reshape(2 * F, 3)
    s_rigid, *_ = np.linalg.lstsq(M_proj, w.data, rcond=1e-6)
    data = np.tile(s_rigid, (F, 1))
    shapes = ShapeSequence(data=data, frames=F, points=N)
    return poses, shapes


def estimate_rotations(w, shapes):
    """Closed-form per-frame rotation update with S held fixed.

    Per frame the unconstrained least-squares fit A_f^T = W_f S_f^T
    (S_f S_f^T)^{-1} is projected onto matrices with orthonormal rows;
    the full rotation is completed by a cross product.
    """
    F = w.frames
    rows = np.zeros((F, 2, 3))
    for f in range(F):
        Sf = shapes.frame(f)
        gram = Sf @ Sf.T
        if np.linalg.cond(gram) > CONDITION_CAP:
            raise DegenerateFrameError(
                "frame %d: shape Gram matrix is degenerate" % f)
        at = w.frame(f) @ Sf.T @ np.linalg.inv(gram)   # 2 x 3
        rows[f] = orthonormalize_rows(at)
    return complete_rotations(CameraPoseSet(rows2x3=rows))


def data_term(w, poses, shapes, lam=1.0):
    """(lam/2) ||W - R S||_F^2."""
    resid = w.data - poses.project(shapes)
    return 0.5 * lam * float(np.sum(resid * resid))

"""Automatic shape-prior acquisition from an initial clean window.

The first few unoccluded frames are reconstructed without any prior
(the zero-weight baseline configuration of the solver), rigidly aligned
to the rigid-factorization initialization of the full sequence, and
extended to all frames.
"""

from dataclasses import dataclass

import numpy as np

from . import core, solver
from .core import MeasurementMatrix, ShapeSequence
from .errors import (DegenerateAlignmentError, InsufficientCleanFramesError,
                     InvalidInputError)

MIN_WINDOW = 5


@dataclass(frozen=True)
class Similarity:
    """s * Q @ x + t with Q a proper rotation (or reflection if allowed)."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pts):
        """Transform 3 x N points."""
        return self.scale * self.rotation @ pts + self.translation[:, None]


@dataclass(frozen=True)
class PriorEstimate:
    window: int
    shapes_window: ShapeSequence
    aligned_prior: ShapeSequence
    similarity: Similarity
    anchor_points: np.ndarray


def window_measurements(w, f_sp):
    """Restrict a measurement matrix to its first f_sp frames."""
    if f_sp < 1 or f_sp > w.frames:
        raise InvalidInputError("window must be within 1..F")
    return MeasurementMatrix(data=w.data[:2 * f_sp].copy(), frames=f_sp,
                             points=w.points,
                             reference_index=min(w.reference_index, f_sp - 1),
                             translations=w.translations[:f_sp].copy())


def estimate_prior_window(w_window, mask, params, min_window=MIN_WINDOW):
    """Reconstruct the clean window with the zero-prior baseline solver."""
    if w_window.frames < min_window:
        raise InsufficientCleanFramesError(
            "prior window has %d frames, need at least %d"
            % (w_window.frames, min_window))
    result = solver.solve(w_window, solver.PriorSpec(mode="none"), mask, params)
    return result.shape


def select_anchor_points(weights_window, n_points, min_samples=15,
                         max_samples=20):
    """Indices of sample points for alignment.

    Prefers points whose occlusion weight is zero in every window frame;
    falls back to the lowest-weight points, tie-broken by column index.
    Uniform stride over the candidate set, clamped to `max_samples`.
    """
    if weights_window is None:
        clean = np.arange(n_points)
    else:
        w = np.asarray(weights_window, dtype=float).reshape(-1, n_points)
        total = w.max(axis=0)
        clean = np.flatnonzero(total == 0)
        if clean.size < min_samples:
            order = np.lexsort((np.arange(n_points), total))
            clean = np.sort(order[:min_samples])
    count = min(max_samples, clean.size)
    stride_idx = np.linspace(0, clean.size - 1, count).round().astype(int)
    return clean[np.unique(stride_idx)]


def procrustes_align(source, target, samples=None, with_scale=True,
                     allow_reflection=False):
    """Closed-form similarity fitting s*Q*x + t ~ y over sample points.

    `source` and `target` are 3 x N point sets.  The rotation comes from
    the SVD of the centered cross-covariance with a sign correction that
    keeps det(Q) = +1 unless reflections are allowed.
    """
    x = np.asarray(source, dtype=float)
    y = np.asarray(target, dtype=float)
    if samples is not None:
        x = x[:, samples]
        y = y[:, samples]
    if x.shape != y.shape or x.shape[0] != 3:
        raise InvalidInputError("point sets must both be 3 x N")
    if x.shape[1] < 4:
        raise InvalidInputError("need at least 4 sample points")
    xc = x.mean(axis=1, keepdims=True)
    yc = y.mean(axis=1, keepdims=True)
    x0 = x - xc
    y0 = y - yc
    cov = y0 @ x0.T
    sx = np.linalg.svd(x0, compute_uv=False)
    if sx[1] <= 1e-10 * max(sx[0], 1e-300):
        raise DegenerateAlignmentError("alignment sample points are collinear")
    u, s, vt = core.thin_svd(cov)
    c = np.ones(3)
    if not allow_reflection:
        c[2] = np.sign(np.linalg.det(u @ vt))
        if c[2] == 0:
            c[2] = 1.0
    q = (u * c) @ vt
    denom = float(np.sum(x0 * x0))
    scale = float(np.sum(s * c)) / denom if with_scale else 1.0
    if scale <= 0:
        raise DegenerateAlignmentError("non-positive alignment scale")
    t = (yc - scale * q @ xc)[:, 0]
    return Similarity(scale=scale, rotation=q, translation=t)


def apply_similarity(shapes, sim):
    """Apply one similarity to every frame of a ShapeSequence."""
    F, N = shapes.frames, shapes.points
    data = np.zeros_like(shapes.data)
    for f in range(F):
        data[3 * f:3 * f + 3] = sim.apply(shapes.frame(f))
    return ShapeSequence(data=data, frames=F, points=N)


def build_full_prior(window_shapes, frames, policy="mean"):
    """Extend window shapes to a full-length prior sequence.

    Frames past the window get the temporal mean of the window shapes
    (policy "mean") or the last window shape (policy "hold").
    """
    F_sp, N = window_shapes.frames, window_shapes.points
    if frames < F_sp:
        raise InvalidInputError("total frames below window length")
    if policy not in ("mean", "hold"):
        raise InvalidInputError("unknown extension policy %r" % (policy,))
    data = np.zeros((3 * frames, N))
    data[:3 * F_sp] = window_shapes.data
    if frames > F_sp:
        if policy == "mean":
            fill = window_shapes.data.reshape(F_sp, 3, N).mean(axis=0)
        else:
            fill = window_shapes.frame(F_sp - 1)
        for f in range(F_sp, frames):
            data[3 * f:3 * f + 3] = fill
    return ShapeSequence(data=data, frames=frames, points=N)


def estimate_prior(w, mask, params, f_sp, weights_window=None, policy="mean",
                   with_scale=True, min_window=MIN_WINDOW):
    """Full prior pipeline: window solve, alignment, temporal extension.

    Alignment target is frame 0 of the rigid initialization of the full
    sequence; anchor points are sampled among pixels unoccluded over the
    whole window.
    """
    w_win = window_measurements(w, f_sp)
    window_shapes = estimate_prior_window(w_win, mask, params, min_window)
    _, rigid_shapes = core.rigid_init(w)
    anchors = select_anchor_points(weights_window, w.points)
    sim = procrustes_align(window_shapes.frame(0), rigid_shapes.frame(0),
                           samples=anchors, with_scale=with_scale)
    aligned_window = apply_similarity(window_shapes, sim)
    full = build_full_prior(aligned_window, w.frames, policy)
    return PriorEstimate(window=f_sp, shapes_window=window_shapes,
                         aligned_prior=full, similarity=sim,
                         anchor_points=anchors)

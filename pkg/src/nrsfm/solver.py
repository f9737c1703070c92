"""Variational batch solver for orthographic NRSfM with a soft shape prior.

The energy combines a quadratic data term, an optional weighted quadratic
pull toward a prior shape sequence, total variation of the per-frame
coordinate fields over the pixel grid, and the nuclear norm of the
frame-major rearrangement of the shape.  It is minimized by alternating
a closed-form rotation update with an inner loop that interleaves a
primal-dual scheme for the TV part and singular-value soft-thresholding
for the nuclear part.
"""

from dataclasses import dataclass, field

import numpy as np

from . import core
from .core import CameraPoseSet, MeasurementMatrix, PixelGridMask, ShapeSequence
from .errors import DivergenceError, InvalidInputError

PRIOR_MODES = ("none", "per_sequence", "per_frame", "per_pixel")


@dataclass(frozen=True)
class SolverParams:
    """Weights, step sizes and stopping rules for the solver."""

    lam: float = 1e4
    gamma: float = 5e4
    tau: float = 1e4
    theta: float = 1e-5
    sigma_dual: float = 1.0
    max_outer: int = 30
    max_pd: int = 100
    max_si: int = 20
    tol_outer: float = 1e-6
    tol_pd: float = 1e-5
    tol_si: float = 1e-5
    tv_enabled: bool = True

    def __post_init__(self):
        for name in ("lam", "gamma", "tau", "theta", "sigma_dual"):
            if getattr(self, name) < 0:
                raise InvalidInputError("%s must be >= 0" % name)
        for name in ("theta", "sigma_dual"):
            if getattr(self, name) <= 0:
                raise InvalidInputError("%s must be > 0" % name)
        for name in ("max_outer", "max_pd", "max_si"):
            if getattr(self, name) < 1:
                raise InvalidInputError("%s must be >= 1" % name)
        for name in ("tol_outer", "tol_pd", "tol_si"):
            if getattr(self, name) <= 0:
                raise InvalidInputError("%s must be > 0" % name)

    @property
    def eta(self):
        """Shrinkage threshold of the nuclear-norm proximal step."""
        return self.theta * self.tau


@dataclass(frozen=True)
class PriorSpec:
    """Shape prior and its weighting.

    Weights are stored as the diagonal of the squared weighting matrix
    (for binary weights the two coincide).  `frame_weights` has length F;
    `pixel_weights` is 3F x N with the per-pixel value replicated over
    the three coordinates of each point.
    """

    mode: str = "none"
    s_prior: ShapeSequence = None
    frame_weights: np.ndarray = None
    pixel_weights: np.ndarray = None

    def __post_init__(self):
        if self.mode not in PRIOR_MODES:
            raise InvalidInputError("unknown prior mode %r" % (self.mode,))
        if self.mode != "none" and self.s_prior is None:
            raise InvalidInputError("prior mode %r needs s_prior" % self.mode)
        if self.frame_weights is not None and np.any(np.asarray(self.frame_weights) < 0):
            raise InvalidInputError("frame weights must be >= 0")
        if self.pixel_weights is not None and np.any(np.asarray(self.pixel_weights) < 0):
            raise InvalidInputError("pixel weights must be >= 0")

    def weight_rows(self, frames, points):
        """Effective squared weights as a 3F x N array (gamma excluded)."""
        if self.mode == "none":
            return np.zeros((3 * frames, points))
        if self.mode == "per_sequence":
            return np.ones((3 * frames, points))
        if self.mode == "per_frame":
            w = np.asarray(self.frame_weights, dtype=float)
            if w.shape != (frames,):
                raise InvalidInputError("frame_weights must have length F")
            return np.repeat(w, 3)[:, None] * np.ones((1, points))
        w = np.asarray(self.pixel_weights, dtype=float)
        if w.shape != (3 * frames, points):
            raise InvalidInputError("pixel_weights must be 3F x N")
        return w


@dataclass
class DualField:
    """TV dual variable: one 2-vector per frame, coordinate and pixel."""

    qu: np.ndarray                           # (3F, N)
    qv: np.ndarray                           # (3F, N)

    @classmethod
    def zeros(cls, frames, points):
        return cls(qu=np.zeros((3 * frames, points)),
                   qv=np.zeros((3 * frames, points)))

    def max_norm(self):
        return float(np.sqrt(self.qu ** 2 + self.qv ** 2).max(initial=0.0))


@dataclass
class SolveResult:
    shape: ShapeSequence
    poses: CameraPoseSet
    energy_trace: list
    converged: bool
    iterations_used: dict = field(default_factory=dict)


def gradient_field(shapes, mask):
    """Forward differences of every coordinate field on the pixel grid.

    Returns (gu, gv), each 3F x N; differences across the mask boundary
    are zero (Neumann).
    """
    hr, ir, hd, idn = mask.neighbor_tables()
    s = shapes.data
    gu = np.zeros_like(s)
    gv = np.zeros_like(s)
    gu[:, hr] = s[:, ir[hr]] - s[:, hr]
    gv[:, hd] = s[:, idn[hd]] - s[:, hd]
    return gu, gv


def divergence_adjoint(q, mask):
    """Apply the adjoint of the forward-difference gradient: -div(q).

    Satisfies <grad S, q> = <S, -div q> exactly for any S, q on the mask.
    """
    hr, ir, hd, idn = mask.neighbor_tables()
    d = np.zeros_like(q.qu)
    d[:, hr] -= q.qu[:, hr]
    d[:, ir[hr]] += q.qu[:, hr]
    d[:, hd] -= q.qv[:, hd]
    d[:, idn[hd]] += q.qv[:, hd]
    return d


def dual_update(q, shapes, sigma, mask):
    """Ascent on the dual variable followed by unit-ball projection."""
    gu, gv = gradient_field(shapes, mask)
    nu = q.qu + sigma * gu
    nv = q.qv + sigma * gv
    norm = np.sqrt(nu ** 2 + nv ** 2)
    denom = np.maximum(1.0, norm)
    return DualField(qu=nu / denom, qv=nv / denom)


def tv_value(shapes, mask):
    """Sum of Euclidean norms of the gradient 2-vectors."""
    gu, gv = gradient_field(shapes, mask)
    return float(np.sum(np.sqrt(gu ** 2 + gv ** 2)))


def nuclear_norm(shapes):
    """Nuclear norm of the frame-major F x 3N rearrangement."""
    return float(np.linalg.svd(shapes.permuted(), compute_uv=False).sum())


def prior_term(shapes, prior, gamma):
    if prior.mode == "none" or gamma == 0.0:
        return 0.0
    diff = shapes.data - prior.s_prior.data
    w = prior.weight_rows(shapes.frames, shapes.points)
    return 0.5 * gamma * float(np.sum(w * diff * diff))


def energy(w, poses, shapes, prior, mask, params):
    """Full objective value at (R, S)."""
    if shapes.frames != w.frames or shapes.points != w.points:
        raise InvalidInputError("shape/measurement dimension mismatch")
    val = core.data_term(w, poses, shapes, params.lam)
    val += prior_term(shapes, prior, params.gamma)
    if params.tv_enabled:
        if mask is None:
            raise InvalidInputError("TV requires a pixel grid mask")
        val += tv_value(shapes, mask)
    val += params.tau * nuclear_norm(shapes)
    return val


def soft_impute_step(b, eta):
    """Singular-value soft-thresholding: prox of eta * nuclear norm."""
    b = np.asarray(b, dtype=float)
    if eta < 0:
        raise InvalidInputError("eta must be >= 0")
    if not np.all(np.isfinite(b)):
        raise InvalidInputError("non-finite entries")
    u, s, vt = core.thin_svd(b)
    s = np.maximum(s - eta, 0.0)
    return (u * s) @ vt


class _PrimalSystem:
    """Pre-factorized block system for the quadratic primal minimization.

    Solves (lam R_f^T R_f + gamma w + (1/theta) I) S_col = rhs_col where
    w is scalar per frame or varies per point.  Inverses are cached so
    repeated applications inside the primal-dual loop are matmuls.
    """

    def __init__(self, poses, prior, params, frames, points):
        self.frames = frames
        self.points = points
        w = prior.weight_rows(frames, points) if prior.mode != "none" \
            else np.zeros((3 * frames, points))
        gw = params.gamma * w                          # (3F, N)
        inv_theta = 1.0 / params.theta
        self.inv_blocks = np.zeros((frames, points, 3, 3))
        eye = np.eye(3)
        for f in range(frames):
            a = params.lam * poses.rows2x3[f].T @ poses.rows2x3[f] + inv_theta * eye
            gwf = gw[3 * f:3 * f + 3]                  # (3, N)
            mats = np.broadcast_to(a, (points, 3, 3)).copy()
            mats[:, 0, 0] += gwf[0]
            mats[:, 1, 1] += gwf[1]
            mats[:, 2, 2] += gwf[2]
            self.inv_blocks[f] = np.linalg.inv(mats)
        self.gw = gw

    def solve(self, rhs):
        """Apply the cached inverse to a 3F x N right-hand side."""
        F, N = self.frames, self.points
        r = rhs.reshape(F, 3, N).transpose(0, 2, 1)     # (F, N, 3)
        out = np.einsum("fnij,fnj->fni", self.inv_blocks, r)
        return out.transpose(0, 2, 1).reshape(3 * F, N)


def _primal_rhs_const(w, poses, prior, params, system):
    """Part of the primal right-hand side that is fixed during a solve."""
    F, N = w.frames, w.points
    rtw = np.einsum("fji,fjn->fin", poses.rows2x3,
                    w.data.reshape(F, 2, N)).reshape(3 * F, N)
    rhs = params.lam * rtw
    if prior.mode != "none":
        rhs = rhs + system.gw * prior.s_prior.data
    return rhs


def primal_step(w, poses, s_bar, d_q, prior, params):
    """Exact minimizer of the smooth part of the primal-dual energy.

    s_bar is the proximal anchor; d_q is the adjoint-gradient field of
    the dual variable (zero when TV is off).
    """
    system = _PrimalSystem(poses, prior, params, w.frames, w.points)
    rhs = _primal_rhs_const(w, poses, prior, params, system)
    rhs = rhs + s_bar.data / params.theta
    if d_q is not None:
        rhs = rhs - d_q
    data = system.solve(rhs)
    return ShapeSequence(data=data, frames=w.frames, points=w.points)


def shape_step(w, poses, s_init, prior, mask, params, monitor=None):
    """Optimal S for fixed rotations.

    Alternates the primal-dual TV loop with the nuclear-norm shrinkage
    step until the relative change of S falls below tol_si.  `monitor`,
    when given, is called as monitor(level, iteration, s, q) after every
    inner update (used by instrumented tests).
    """
    F, N = w.frames, w.points
    system = _PrimalSystem(poses, prior, params, F, N)
    rhs_const = _primal_rhs_const(w, poses, prior, params, system)
    inv_theta = 1.0 / params.theta

    s = s_init.data.copy()
    s_bar = s.copy()
    si_iters = 0
    pd_iters = 0
    for it_si in range(params.max_si):
        si_iters += 1
        s_prev_si = s.copy()
        # Primal-dual loop for the TV-coupled quadratic subproblem.
        if params.tv_enabled:
            q = DualField.zeros(F, N)
            for it_pd in range(params.max_pd):
                pd_iters += 1
                d_q = divergence_adjoint(q, mask)
                s_new = system.solve(rhs_const + inv_theta * s_bar - d_q)
                if not np.all(np.isfinite(s_new)):
                    raise DivergenceError(
                        "non-finite shape in primal-dual loop, iteration %d"
                        % it_pd)
                shapes_new = ShapeSequence(data=s_new, frames=F, points=N)
                q = dual_update(q, shapes_new, params.sigma_dual, mask)
                if monitor is not None:
                    monitor("pd", it_pd, shapes_new, q)
                change = np.linalg.norm(s_new - s) / max(np.linalg.norm(s), 1e-30)
                s = s_new
                if change < params.tol_pd:
                    break
        else:
            s = system.solve(rhs_const + inv_theta * s_bar)
            if not np.all(np.isfinite(s)):
                raise DivergenceError("non-finite shape in primal step")
            if monitor is not None:
                monitor("primal", it_si,
                        ShapeSequence(data=s, frames=F, points=N), None)
        # Nuclear-norm shrinkage on the frame-major rearrangement.
        perm = ShapeSequence(data=s, frames=F, points=N).permuted()
        shrunk = soft_impute_step(perm, params.eta)
        s_bar = ShapeSequence.from_permuted(shrunk).data
        if not np.all(np.isfinite(s_bar)):
            raise DivergenceError(
                "non-finite shape in soft-impute step, iteration %d" % it_si)
        change = np.linalg.norm(s - s_prev_si) / max(np.linalg.norm(s_prev_si), 1e-30)
        if change < params.tol_si:
            break
    result = ShapeSequence(data=s, frames=F, points=N)
    return result, {"si": si_iters, "pd": pd_iters}


def solve(w, prior, mask, params, init=None):
    """Alternate rotation and shape updates until the energy stalls."""
    if params.tv_enabled and mask is None:
        raise InvalidInputError("tv_enabled requires a pixel grid mask")
    if prior.mode != "none":
        sp = prior.s_prior
        if sp.frames != w.frames or sp.points != w.points:
            raise InvalidInputError("prior dimensions do not match problem")
    if init is None:
        poses, shapes = core.rigid_init(w)
    else:
        poses, shapes = init

    trace = []
    converged = False
    iters = {"outer": 0, "si": 0, "pd": 0}
    prev_energy = None
    for it in range(params.max_outer):
        iters["outer"] += 1
        new_poses = core.estimate_rotations(w, shapes)
        new_shapes, sub = shape_step(w, new_poses, shapes, prior, mask, params)
        iters["si"] += sub["si"]
        iters["pd"] += sub["pd"]
        e = energy(w, new_poses, new_shapes, prior, mask, params)
        if not np.isfinite(e):
            raise DivergenceError("non-finite energy at outer iteration %d" % it)
        if prev_energy is not None and e > prev_energy:
            # The alternation is not a strict descent method (the
            # rotation projection can raise the energy); keep the best
            # iterate seen and stop instead of recording an increase.
            converged = True
            break
        poses, shapes = new_poses, new_shapes
        trace.append((it, e))
        if prev_energy is not None:
            rel = abs(prev_energy - e) / max(abs(prev_energy), 1e-30)
            if rel < params.tol_outer:
                converged = True
                prev_energy = e
                break
        prev_energy = e
    return SolveResult(shape=shapes, poses=poses, energy_trace=trace,
                       converged=converged, iterations_used=iters)

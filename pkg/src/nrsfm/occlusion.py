"""Occlusion maps from dense flow, clean-window selection and weights.

Each non-reference frame is warped back to the reference view with its
dense flow; the Gaussian-smoothed color distance between the warp and
the reference is the per-pixel occlusion evidence.  Accumulated map mass
over time picks the initial window of frames clean enough to estimate a
shape prior from.
"""

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InsufficientCleanFramesError, InvalidInputError


@dataclass(frozen=True)
class FlowField:
    """Dense displacement of reference-frame pixels into one frame."""

    u: np.ndarray
    v: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if self.u.shape != self.v.shape:
            raise InvalidInputError("flow component shapes differ")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise InvalidInputError("non-finite flow entries")


@dataclass(frozen=True)
class OcclusionTensor:
    """Per-frame occlusion maps with values in [0, 255]."""

    maps: np.ndarray                         # (F, H, W)
    kernel_size: int = 11
    kernel_sigma: float = 2.0

    @property
    def frames(self):
        return self.maps.shape[0]


@dataclass(frozen=True)
class TiSeries:
    """Per-frame and accumulated occlusion-map mass."""

    per_frame: np.ndarray
    cumulative: np.ndarray
    epsilon: float = None
    epsilon_prime: float = None


def gaussian_kernel(k, sigma):
    """Square k x k Gaussian kernel normalized to sum 1."""
    if k % 2 == 0 or k < 1:
        raise InvalidInputError("kernel size must be odd and positive")
    if sigma <= 0:
        raise InvalidInputError("kernel sigma must be > 0")
    ax = np.arange(k) - (k - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    kern = np.outer(g, g)
    return kern / kern.sum()


def _as_float_image(img):
    img = np.asarray(img, dtype=float)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3:
        raise InvalidInputError("expected HxW or HxWxC image")
    return img


def backproject(frame, flow):
    """Warp a frame back to the reference view through its flow field.

    Output pixel (y, x) samples the frame at (y + v, x + u) with bilinear
    interpolation.  Samples falling outside the image are filled from the
    nearest valid pixel of the warp.
    """
    img = _as_float_image(frame)
    h, w, c = img.shape
    if flow.u.shape != (h, w):
        raise InvalidInputError("flow dimensions do not match the frame")
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    sy = ys + flow.v
    sx = xs + flow.u
    inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    syc = np.clip(sy, 0, h - 1)
    sxc = np.clip(sx, 0, w - 1)
    out = np.empty_like(img)
    for ch in range(c):
        out[:, :, ch] = ndimage.map_coordinates(
            img[:, :, ch], [syc, sxc], order=1, mode="nearest")
    if not inside.all():
        # Fill out-of-range samples from the nearest in-range pixel.
        _, (iy, ix) = ndimage.distance_transform_edt(
            ~inside, return_indices=True)
        out[~inside] = out[iy[~inside], ix[~inside]]
    if np.asarray(frame).ndim == 2:
        return out[:, :, 0]
    return out


def _difference_field(reference, warped):
    """Per-pixel Euclidean color distance between two images."""
    a = _as_float_image(reference)
    b = _as_float_image(warped)
    if a.shape != b.shape:
        raise InvalidInputError("image shapes differ")
    return np.sqrt(np.sum((b - a) ** 2, axis=2))


def _raw_map(reference, frame, flow, kernel):
    warped = backproject(frame, flow)
    b = _difference_field(reference, warped)
    return ndimage.convolve(b, kernel, mode="nearest")


def _discretize(maps):
    """Scale by the global maximum to [0, 255] and round; zero stays zero."""
    m = np.asarray(maps, dtype=float)
    peak = m.max(initial=0.0)
    if peak <= 0:
        return np.zeros_like(m)
    return np.rint(np.clip(m / peak, 0.0, 1.0) * 255.0)


def occlusion_map(reference, frame, flow, k=11, sigma_g=2.0):
    """Single-frame occlusion evidence, normalized to [0, 255]."""
    kernel = gaussian_kernel(k, sigma_g)
    return _discretize(_raw_map(reference, frame, flow, kernel))


def occlusion_tensor(sequence, flows, k=11, sigma_g=2.0, reference_index=0):
    """Occlusion maps for a whole sequence, normalized jointly.

    `sequence` holds F images; `flows` holds one FlowField per
    non-reference frame, in frame order.  The reference-frame map is all
    zeros; normalization is global so inter-frame magnitudes compare.
    """
    F = len(sequence)
    if len(flows) != F - 1:
        raise InvalidInputError(
            "expected %d flow fields, got %d" % (F - 1, len(flows)))
    kernel = gaussian_kernel(k, sigma_g)
    reference = sequence[reference_index]
    ref = _as_float_image(reference)
    raw = np.zeros((F, ref.shape[0], ref.shape[1]))
    others = [f for f in range(F) if f != reference_index]
    for flow, f in zip(flows, others):
        raw[f] = _raw_map(reference, sequence[f], flow, kernel)
    maps = _discretize(raw)
    maps[reference_index] = 0.0
    return OcclusionTensor(maps=maps, kernel_size=k, kernel_sigma=sigma_g)


def ti_series(tensor, epsilon=None, epsilon_prime=None):
    """Accumulated occlusion-map mass, as a fraction of full saturation."""
    F = tensor.frames
    area = tensor.maps.shape[1] * tensor.maps.shape[2]
    per_frame = tensor.maps.reshape(F, -1).sum(axis=1) / (255.0 * area)
    return TiSeries(per_frame=per_frame, cumulative=np.cumsum(per_frame),
                    epsilon=epsilon, epsilon_prime=epsilon_prime)


def select_prior_window(ti, epsilon=0.05, epsilon_prime=0.02, min_window=5):
    """Number of initial frames clean enough for prior estimation.

    A frame count f qualifies when the accumulated mass up to f stays
    below epsilon and the centered difference of the accumulated series
    stays below epsilon_prime for every frame up to f.  Returns the
    largest qualifying count; raises when even `min_window` frames fail.
    """
    eps = ti.epsilon if ti.epsilon is not None else epsilon
    epsp = ti.epsilon_prime if ti.epsilon_prime is not None else epsilon_prime
    cum = ti.cumulative
    F = len(cum)
    slope_ok = np.ones(F, dtype=bool)
    for g in range(1, F - 1):
        slope_ok[g] = (cum[g + 1] - cum[g - 1]) / 2.0 <= epsp
    f_sp = 0
    for f in range(F):
        if cum[f] <= eps and slope_ok[:f + 1].all():
            f_sp = f + 1
        else:
            break
    if f_sp < min_window:
        raise InsufficientCleanFramesError(
            "only %d clean initial frames, need at least %d"
            % (f_sp, min_window))
    return f_sp


def mean_map(tensor):
    """Temporal mean occlusion map over the non-reference frames."""
    return tensor.maps.mean(axis=0)


def build_weights(tensor, mask, mode, binarize=False, threshold=0.5,
                  average_map=False):
    """Prior weights from an occlusion tensor over the active pixels.

    per_pixel: one weight per frame and active pixel, replicated over the
    three coordinates.  per_frame: mean map value per frame, optionally
    binarized.  per_sequence: scalar weight 1.
    """
    if mode == "per_sequence":
        return 1.0
    F = tensor.frames
    ys, xs = np.nonzero(mask.active)
    order = np.argsort(mask.point_index[ys, xs])
    ys, xs = ys[order], xs[order]
    maps = tensor.maps
    if average_map:
        maps = np.broadcast_to(mean_map(tensor), maps.shape)
    per_pixel = maps[:, ys, xs] / 255.0          # (F, N)
    if mode == "per_pixel":
        return np.repeat(per_pixel, 3, axis=0)   # (3F, N)
    if mode == "per_frame":
        w = per_pixel.mean(axis=1)
        if binarize:
            w = (w >= threshold).astype(float)
        return w
    raise InvalidInputError("unknown weight mode %r" % (mode,))


def write_ti_csv(ti, path):
    """CSV of (frame, per_frame, cumulative); '.' decimal, LF endings."""
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame", "per_frame", "cumulative"])
        for f in range(len(ti.per_frame)):
            writer.writerow([f, repr(float(ti.per_frame[f])),
                             repr(float(ti.cumulative[f]))])

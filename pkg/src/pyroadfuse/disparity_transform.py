# -*- coding: utf-8 -*-
"""
Disparity transformation: coarse road detection in the v-disparity domain,
roll-angle estimation, road-profile fitting, and the transform that flattens
the drivable area of a disparity image.

The road model is d(u, v) = a0 + a1 * (v cos(theta) - u sin(theta)), with u
the column and v the row of a pixel.  The transformed disparity is

    D_t = D_o - d(u, v) + delta,

where delta is chosen per image so that every valid pixel of D_t is
non-negative.
"""
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numexpr as ne
import numpy as np
from scipy.optimize import minimize_scalar
from sklearn.linear_model import LinearRegression
from sklearn.linear_model import RANSACRegressor

from . import io
from .utils import pixel_grid

logger = logging.getLogger(__name__)

ROLL_BOUND = math.radians(30.)
ROLL_GRID_POINTS = 61
ROLL_XTOL = 1e-9
RANSAC_TRIALS = 500
RANSAC_THRESHOLD = 2.
PEAK_MIN_COUNT = 3
MASK_TOLERANCE = 3.
MIN_CONSENSUS = 0.2
MAX_SAMPLES = 5000
REFINE_ITERATIONS = 2


class EmptyInputError(ValueError):
    """Raised when a disparity image has no valid pixel."""


class NoRoadFoundError(ValueError):
    """Raised when the v-disparity analysis finds no dominant road line."""


class DegenerateFitError(ValueError):
    """Raised when the samples do not determine the road profile."""


@dataclass
class RoadModel:
    """
    Fitted road parameters.

    Parameters
    ----------
    a0 : float
        Disparity offset of the road profile, in pixels.
    a1 : float
        Disparity slope along the rotated row coordinate, in pixels per row.
    theta : float
        Stereo-rig roll angle in radians.
    delta : float, optional
        Offset added by the transform so that its output is non-negative.
    energy : float, optional
        Residual energy E(theta) of the least-squares fit.
    inlier_count : int, optional
        Number of disparity samples used in the fit.
    """
    a0: float
    a1: float
    theta: float
    delta: float = 0.
    energy: float = 0.
    inlier_count: int = 2

    def __post_init__(self):
        if self.energy < 0:
            raise ValueError('Road model energy must be non-negative, got %r' % self.energy)
        if abs(self.theta) > ROLL_BOUND + 1e-12:
            raise ValueError('Roll angle %r rad exceeds the search bound of %r rad' % (self.theta, ROLL_BOUND))
        if self.inlier_count < 2:
            raise ValueError('A road model needs at least 2 samples, got %d' % self.inlier_count)


@dataclass
class VDisparityMap:
    """
    Histogram of disparities per image row, with bins one pixel wide.

    counts[v, b] is the number of valid pixels in row v whose disparity
    floors to b.
    """
    rows: int
    bins: int
    counts: np.ndarray


@dataclass
class CoarseMask:
    """
    Boolean mask of the coarse drivable area.
    """
    width: int
    height: int
    mask: np.ndarray

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != (self.height, self.width):
            raise ValueError('Mask shape %s does not match %s' % (self.mask.shape, (self.height, self.width)))


def build_v_disparity(d):
    """
    Builds the v-disparity map of a disparity image.

    Parameters
    ----------
    d : DisparityImage
        Input disparities.

    Returns
    -------
    vmap : VDisparityMap
        Row-by-bin histogram of the valid disparities.
    """
    if d.n_valid == 0:
        raise EmptyInputError('Disparity image has no valid pixels')
    v_idx, u_idx = np.nonzero(d.valid_mask)
    bins = np.floor(d.data[v_idx, u_idx]).astype(np.int64)
    n_bins = int(bins.max()) + 1
    counts = np.zeros((d.height, n_bins), dtype=np.int64)
    np.add.at(counts, (v_idx, bins), 1)
    return VDisparityMap(rows=d.height, bins=n_bins, counts=counts)


def _row_peaks(d, vmap):
    """
    Per-row peak candidates of the v-disparity map.  The candidate is the
    fullest bin (ties go to the bin nearest the row median), refined to the
    mean disparity of the pixels falling in it.
    """
    rows = []
    peaks = []
    for v in range(vmap.rows):
        row_counts = vmap.counts[v]
        best = row_counts.max()
        if best < PEAK_MIN_COUNT:
            continue
        row_valid = d.valid_mask[v]
        row_d = d.data[v, row_valid]
        tied = np.flatnonzero(row_counts == best)
        b = tied[np.argmin(np.abs(tied + 0.5 - np.median(row_d)))]
        rows.append(v)
        peaks.append(np.mean(row_d[np.floor(row_d) == b]))
    return np.array(rows, dtype=np.float64), np.array(peaks, dtype=np.float64)


def coarse_road_mask(d, random_state=0, tolerance=MASK_TOLERANCE):
    """
    Detects the coarse drivable area through v-disparity analysis.

    A line d = m * v + c is fitted by RANSAC to the per-row peaks of the
    v-disparity map; pixels whose disparity lies within ``tolerance`` of the
    line are marked as road.

    Parameters
    ----------
    d : DisparityImage
        Input disparities.
    random_state : int, optional
        Seed of the RANSAC sampler.
    tolerance : scalar, optional
        Maximum distance, in disparity pixels, between a road pixel and the line.

    Returns
    -------
    mask : CoarseMask
        Coarse drivable area; only valid pixels can be set.
    line : tuple (m, c)
        Slope and intercept of the road line in the v-disparity domain.
    """
    vmap = build_v_disparity(d)
    rows, peaks = _row_peaks(d, vmap)
    if len(rows) < 2:
        raise NoRoadFoundError('Only %d image rows have a v-disparity peak, need at least 2' % len(rows))
    ransac = RANSACRegressor(estimator=LinearRegression(), min_samples=2,
                             residual_threshold=RANSAC_THRESHOLD, max_trials=RANSAC_TRIALS,
                             random_state=random_state)
    try:
        ransac.fit(rows.reshape(-1, 1), peaks)
    except ValueError as err:
        raise NoRoadFoundError('RANSAC found no road line: %s' % err)
    consensus = np.count_nonzero(ransac.inlier_mask_) / float(len(rows))
    if consensus < MIN_CONSENSUS:
        raise NoRoadFoundError('RANSAC consensus %.2f is below %.2f' % (consensus, MIN_CONSENSUS))
    m = float(ransac.estimator_.coef_[0])
    c = float(ransac.estimator_.intercept_)
    logger.debug('v-disparity road line d = %.6f v + %.6f, consensus %.2f', m, c, consensus)

    _, v = pixel_grid(d.height, d.width)
    mask = d.valid_mask & (np.abs(d.data - (m * v + c)) < tolerance)
    return CoarseMask(d.width, d.height, mask), (m, c)


def sample_disparities(d, mask, max_samples=MAX_SAMPLES):
    """
    Collects (u, v, disparity) samples from the masked pixels, uniformly
    strided so that at most ``max_samples`` are returned.

    Returns
    -------
    samples : numpy array, shape (k, 3)
    """
    mask = np.asarray(mask, dtype=bool) & d.valid_mask
    flat = np.flatnonzero(mask)
    if len(flat) > max_samples:
        stride = int(math.ceil(len(flat) / float(max_samples)))
        flat = flat[::stride]
    v, u = np.unravel_index(flat, mask.shape)
    return np.column_stack([u, v, d.data[v, u]]).astype(np.float64)


def _rotated_rows(samples, theta):
    return samples[:, 1] * math.cos(theta) - samples[:, 0] * math.sin(theta)


def _centered_fit(samples, theta):
    """
    Least-squares fit of d = a0 + a1 * t for t = v cos(theta) - u sin(theta).
    The 2x2 normal equations are solved in centered form, which keeps the
    solve well conditioned for large row coordinates.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 3:
        raise ValueError('Samples must have shape (k, 3), got %s' % (samples.shape,))
    if samples.shape[0] < 3:
        raise DegenerateFitError('Need at least 3 samples, got %d' % samples.shape[0])
    t = _rotated_rows(samples, theta)
    d = samples[:, 2]
    t_mean = np.mean(t)
    d_mean = np.mean(d)
    tc = t - t_mean
    stt = np.dot(tc, tc)
    if stt <= 1e-12 * (np.dot(t, t) + 1.):
        raise DegenerateFitError('Rotated row coordinates do not vary at theta=%r; T^T T is singular' % theta)
    a1 = np.dot(tc, d - d_mean) / stt
    a0 = d_mean - a1 * t_mean
    residual = d - a0 - a1 * t
    return a0, a1, np.dot(residual, residual)


def roll_energy(d_samples, theta):
    """
    Residual energy E(theta) of the road-profile fit at a given roll angle.

    E(theta) = d^T d - d^T T (T^T T)^-1 T^T d, with T = [1, v cos(theta) - u sin(theta)].
    It is evaluated as the residual sum of squares of the fit, which is the
    same quantity without the cancellation of the expanded form.

    Parameters
    ----------
    d_samples : array-like, shape (k, 3)
        Rows of (u, v, disparity).
    theta : scalar
        Roll angle in radians.

    Returns
    -------
    energy : float
    """
    return float(_centered_fit(d_samples, theta)[2])


def fit_profile(d_samples, theta):
    """
    Road-profile coefficients a(theta) = (T^T T)^-1 T^T d.

    Returns
    -------
    a0, a1 : float
    """
    a0, a1, _ = _centered_fit(d_samples, theta)
    return float(a0), float(a1)


def estimate_roll(d_samples, bound=ROLL_BOUND):
    """
    Estimates the roll angle by minimizing E(theta) over [-bound, bound].

    A 61-point grid locates the basin; a bounded scalar minimization
    (golden-section steps with parabolic acceleration) then refines the angle
    to ``ROLL_XTOL`` rad inside the neighbouring grid cells.

    Returns
    -------
    theta : float
        Estimated roll angle in radians.
    energy : float
        E(theta) at the estimate.
    """
    grid = np.linspace(-bound, bound, ROLL_GRID_POINTS)
    energies = np.array([roll_energy(d_samples, theta) for theta in grid])
    i = int(np.argmin(energies))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]
    result = minimize_scalar(lambda theta: roll_energy(d_samples, theta), bounds=(lo, hi),
                             method='bounded', options={'xatol': ROLL_XTOL})
    theta, energy = float(result.x), float(result.fun)
    if energies[i] < energy:
        theta, energy = float(grid[i]), float(energies[i])
    logger.debug('Roll estimate %.6f rad (grid cell %d), E=%.6g', theta, i, energy)
    return theta, energy


def road_disparity(model, width, height):
    """
    Evaluates the road profile a0 + a1 * (v cos(theta) - u sin(theta)) over
    the pixel grid.

    Returns
    -------
    f : numpy array, shape (height, width)
    """
    u, v = pixel_grid(height, width)
    a0 = float(model.a0)
    a1 = float(model.a1)
    cos_t = math.cos(model.theta)
    sin_t = math.sin(model.theta)
    return ne.evaluate('a0 + a1 * (v * cos_t - u * sin_t)')


def compute_delta(d, model):
    """
    Per-image non-negativity offset: max(0, -min residual) + 1, rounded up to
    an integer, where the residual is D_o minus the road profile over the
    valid pixels.
    """
    if d.n_valid == 0:
        raise EmptyInputError('Disparity image has no valid pixels')
    residual = d.data - road_disparity(model, d.width, d.height)
    min_residual = float(np.min(residual[d.valid_mask]))
    return float(math.ceil(max(0., -min_residual) + 1.))


def transform(d, model, return_delta=False):
    """
    Applies the disparity transformation D_t = D_o - f(p, a, theta) + delta.

    Invalid pixels stay invalid.  If ``model.delta`` is too small to keep every
    valid output non-negative, delta is recomputed for this image with
    ``compute_delta`` and a warning is issued.

    Parameters
    ----------
    d : DisparityImage
        Original disparities D_o.
    model : RoadModel
        Road model; ``model.delta`` is the requested offset.
    return_delta : boolean, optional
        If True, also returns the offset actually used.

    Returns
    -------
    d_t : DisparityImage
        Transformed disparities.
    delta : float
        Offset used.  Only returned if return_delta is True.
    """
    residual = d.data - road_disparity(model, d.width, d.height)
    delta = float(model.delta)
    if d.n_valid and np.min(residual[d.valid_mask]) + delta < 0:
        new_delta = compute_delta(d, model)
        warnings.warn('delta=%r leaves negative transformed disparities; using per-image delta=%r'
                      % (delta, new_delta))
        delta = new_delta
    data = np.where(d.valid_mask, residual + delta, 0.)
    d_t = io.DisparityImage(d.width, d.height, data, d.valid_mask.copy(), d.scale)
    if return_delta:
        return d_t, delta
    return d_t


def inverse_transform(d_t, model, delta=None):
    """
    Reconstructs D_o = D_t + f(p, a, theta) - delta on the valid pixels.
    """
    if delta is None:
        delta = model.delta
    data = d_t.data + road_disparity(model, d_t.width, d_t.height) - delta
    data = np.where(d_t.valid_mask, data, 0.)
    return io.DisparityImage(d_t.width, d_t.height, data, d_t.valid_mask.copy(), d_t.scale)


def fit_road_model(d, mask, max_samples=MAX_SAMPLES):
    """
    Estimates the roll angle and the road profile from the disparities inside
    a road mask.

    Returns
    -------
    model : RoadModel
        Fitted model with delta = 0.
    """
    samples = sample_disparities(d, getattr(mask, 'mask', mask), max_samples=max_samples)
    theta, energy = estimate_roll(samples)
    a0, a1 = fit_profile(samples, theta)
    return RoadModel(a0=a0, a1=a1, theta=theta, delta=0., energy=energy, inlier_count=len(samples))


def refine_road_mask(d, model, tolerance=MASK_TOLERANCE):
    """
    Segments the disparity image with a fitted road model: valid pixels whose
    disparity lies within ``tolerance`` of the road profile.
    """
    residual = d.data - road_disparity(model, d.width, d.height)
    return CoarseMask(d.width, d.height, d.valid_mask & (np.abs(residual) < tolerance))


def run_dt_pipeline(d, random_state=0, max_samples=MAX_SAMPLES):
    """
    Runs the full disparity transformation on one image: coarse road mask,
    disparity sampling, roll estimation, profile fit and transform.

    The v-disparity mask is refined up to ``REFINE_ITERATIONS`` times by
    segmenting the image with the current road model and refitting, which
    drops obstacle and pothole pixels the v-disparity band let through on a
    rolled road.

    Returns
    -------
    d_t : DisparityImage
        Transformed disparities.
    model : RoadModel
        Fitted road model, with the delta used by the transform.
    mask : CoarseMask
        Drivable area the model was fitted on.
    """
    if d.n_valid == 0:
        raise EmptyInputError('Disparity image has no valid pixels')
    mask, _ = coarse_road_mask(d, random_state=random_state)
    model = fit_road_model(d, mask, max_samples=max_samples)
    for _ in range(REFINE_ITERATIONS):
        refined = refine_road_mask(d, model)
        if np.count_nonzero(refined.mask) < 3 or np.array_equal(refined.mask, mask.mask):
            break
        mask = refined
        model = fit_road_model(d, mask, max_samples=max_samples)
    model.delta = compute_delta(d, model)
    logger.info('Road model a0=%.4f a1=%.5f theta=%.4f deg delta=%g from %d samples',
                model.a0, model.a1, math.degrees(model.theta), model.delta, model.inlier_count)
    return transform(d, model), model, mask


class DisparityTransformer(object):
    """
    Estimator-style wrapper around the disparity transformation.

    Parameters
    ----------
    random_state : int, optional
        Seed of the RANSAC sampler used by the coarse road detection.
    max_samples : int, optional
        Maximum number of road pixels used to fit the road model.

    Examples
    --------
    >>> dt = DisparityTransformer()  # doctest: +SKIP
    >>> d_t = dt.fit_transform(disparity_image)  # doctest: +SKIP
    """

    def __init__(self, random_state=0, max_samples=MAX_SAMPLES):
        self.random_state = random_state
        self.max_samples = max_samples
        self.model = None
        self.mask = None

    def fit(self, d):
        """
        Fits the road model to a disparity image.

        Returns
        -------
        self : the object itself
        """
        _, self.model, self.mask = run_dt_pipeline(d, random_state=self.random_state,
                                                   max_samples=self.max_samples)
        return self

    def transform(self, d):
        """
        Transforms a disparity image with the fitted road model.
        """
        if self.model is None:
            raise RuntimeError('DisparityTransformer must be fitted before transform')
        return transform(d, self.model)

    def fit_transform(self, d):
        """
        Fits the road model and transforms the same image.
        """
        return self.fit(d).transform(d)

    def inverse_transform(self, d_t):
        if self.model is None:
            raise RuntimeError('DisparityTransformer must be fitted before inverse_transform')
        return inverse_transform(d_t, self.model)


def _pipeline_to_dir(path, out_dir, random_state):
    d = io.read_pgm16(path)
    d_t, model, mask = run_dt_pipeline(d, random_state=random_state)
    stem = os.path.splitext(os.path.basename(path))[0]
    outputs = {
        'tdisp': os.path.join(out_dir, stem + '_tdisp.pgm'),
        'model': os.path.join(out_dir, stem + '_model.txt'),
        'mask': os.path.join(out_dir, stem + '_mask.pgm'),
        'vdisp': os.path.join(out_dir, stem + '_vdisp.pgm'),
    }
    io.write_pgm16(d_t, outputs['tdisp'])
    io.write_road_model(model, outputs['model'])
    io.write_mask(mask.mask, outputs['mask'])
    counts = np.minimum(build_v_disparity(d).counts, 65535).astype(np.float64)
    io.write_pgm16(io.DisparityImage.from_array(counts, counts > 0, scale=1), outputs['vdisp'])
    return model, outputs


def run_dt_batch(paths, out_dir, threads=1, random_state=0):
    """
    Runs the pipeline on several disparity files and writes, per input, the
    transformed disparity, the road model, the coarse mask and the v-disparity
    counts into ``out_dir``.

    Returns
    -------
    results : list of (RoadModel, dict)
        Fitted model and output paths per input, in input order.
    """
    if not os.path.isdir(out_dir):
        os.makedirs(out_dir)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(lambda p: _pipeline_to_dir(p, out_dir, random_state), paths))

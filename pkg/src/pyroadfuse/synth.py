# -*- coding: utf-8 -*-
"""
Synthetic road scenes with known ground truth.

A scene is a planar road, d = a0 + a1 * (v cos(theta) - u sin(theta)), with
rectangular anomaly patches raised above it (positive disparity offset) or
sunk into it (negative offset).  Every scene comes with its label image, a
shaded RGB proxy and the camera model, so the estimators downstream can be
checked against the exact parameters that produced the data.
"""
import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field

import numexpr as ne
import numpy as np

from . import io
from .utils import pixel_grid
from .utils import spawn_rngs

logger = logging.getLogger(__name__)

DEFAULT_WIDTH = 96
DEFAULT_HEIGHT = 64
DEFAULT_NOISE = 0.25
THETA_RANGE = (math.radians(-10.), math.radians(10.))
A0_RANGE = (1., 4.)
A1_RANGE = (0.2, 0.8)
MAX_ANOMALIES = 3
DELTA_RANGE = (5., 15.)
MIN_ROAD_DISPARITY = 1.
SPLIT_RATIOS = (('train', 70), ('val', 15), ('test', 15))
MANIFEST_COLUMNS = ('id', 'split', 'a0', 'a1', 'theta_rad', 'noise_sigma', 'n_anomalies')


class InvalidSpecError(ValueError):
    """
    Raised when a scene spec cannot be generated.  ``pixel`` is the (u, v)
    position of the offending pixel when there is one.
    """

    def __init__(self, message, pixel=None):
        if pixel is not None:
            message = '%s at pixel (u=%d, v=%d)' % (message, pixel[0], pixel[1])
        super(InvalidSpecError, self).__init__(message)
        self.pixel = pixel


@dataclass
class Anomaly:
    """
    Rectangular patch [u, u + width) x [v, v + height) whose disparity is
    offset by ``delta`` pixels from the road.
    """
    u: int
    v: int
    width: int
    height: int
    delta: float

    def overlaps(self, other, margin=0):
        return not (self.u + self.width + margin <= other.u or other.u + other.width + margin <= self.u
                    or self.v + self.height + margin <= other.v or other.v + other.height + margin <= self.v)


@dataclass
class SceneSpec:
    """
    Parameters of a synthetic road scene.

    Parameters
    ----------
    width, height : int
        Image size in pixels.
    a0, a1 : float
        Road profile coefficients.
    theta : float
        Roll angle in radians.
    anomalies : list of Anomaly, optional
        Raised or sunken patches.
    noise_sigma : float, optional
        Standard deviation of the gaussian disparity noise, in pixels.
    seed : int, optional
        Seed of the noise and texture generator.
    """
    width: int
    height: int
    a0: float
    a1: float
    theta: float
    anomalies: list = field(default_factory=list)
    noise_sigma: float = DEFAULT_NOISE
    seed: int = 0


@dataclass
class ManifestEntry:
    id: str
    split: str
    a0: float
    a1: float
    theta_rad: float
    noise_sigma: float
    n_anomalies: int


def default_camera(width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT):
    """
    Camera used for every synthetic scene: 100 px focal length, principal
    point at the image centre, 0.54 m baseline.
    """
    return io.CameraModel(fx=100., fy=100., u0=width / 2., v0=height / 2., baseline=0.54)


def planar_disparity(spec):
    """
    Noise-free road disparity a0 + a1 * (v cos(theta) - u sin(theta)).
    """
    u, v = pixel_grid(spec.height, spec.width)
    a0 = float(spec.a0)
    a1 = float(spec.a1)
    cos_t = math.cos(spec.theta)
    sin_t = math.sin(spec.theta)
    return ne.evaluate('a0 + a1 * (v * cos_t - u * sin_t)')


def plane_disparity(normal, offset, camera, width, height):
    """
    Exact disparity of the 3-D plane n . X + offset = 0 seen by a camera.

    Camera coordinates have x to the right, y down and z along the optical
    axis.  Pixels whose ray does not hit the plane in front of the camera
    get a non-positive value.

    Parameters
    ----------
    normal : array-like, shape (3,)
        Plane normal (need not be unit length).
    offset : scalar
        Plane offset, in meters times |normal|.
    camera : CameraModel
        Camera viewing the plane.
    width, height : int
        Image size.

    Returns
    -------
    d : numpy array, shape (height, width)
    """
    if offset == 0:
        raise ValueError('A plane through the camera centre has no finite disparity')
    nx, ny, nz = [float(x) for x in normal]
    u, v = pixel_grid(height, width)
    rx = (u - camera.u0) / camera.fx
    ry = (v - camera.v0) / camera.fy
    return -camera.fx * camera.baseline * (nx * rx + ny * ry + nz) / float(offset)


def _anomaly_mask(spec):
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    offsets = np.zeros((spec.height, spec.width))
    for anomaly in spec.anomalies:
        rows = slice(anomaly.v, anomaly.v + anomaly.height)
        cols = slice(anomaly.u, anomaly.u + anomaly.width)
        mask[rows, cols] = True
        offsets[rows, cols] = anomaly.delta
    return mask, offsets


def validate_spec(spec):
    """
    Checks that anomaly rectangles lie inside the image and that the
    noise-free disparity is positive everywhere.

    Raises
    ------
    InvalidSpecError
    """
    if spec.width <= 0 or spec.height <= 0:
        raise InvalidSpecError('Image size must be positive, got %dx%d' % (spec.width, spec.height))
    if spec.noise_sigma < 0:
        raise InvalidSpecError('Noise sigma must be non-negative')
    for anomaly in spec.anomalies:
        if (anomaly.width <= 0 or anomaly.height <= 0 or anomaly.u < 0 or anomaly.v < 0
                or anomaly.u + anomaly.width > spec.width or anomaly.v + anomaly.height > spec.height):
            raise InvalidSpecError('Anomaly %r does not lie inside the %dx%d image'
                                   % (anomaly, spec.width, spec.height))
    _, offsets = _anomaly_mask(spec)
    disparity = planar_disparity(spec) + offsets
    bad = disparity <= 0
    if np.any(bad):
        v, u = np.argwhere(bad)[0]
        raise InvalidSpecError('Non-positive disparity %r' % disparity[v, u], (u, v))


def render_rgb(spec, rng):
    """
    Shaded grayscale render of a scene: brightness follows the road
    disparity, anomalies carry a faint tint, and a texture noise is added.

    Returns
    -------
    rgb : numpy array of uint8, shape (height, width, 3)
    """
    road = planar_disparity(spec)
    lo, hi = np.min(road), np.max(road)
    shade = 70. + 110. * (road - lo) / max(hi - lo, 1e-12)
    rgb = np.repeat(shade[:, :, np.newaxis], 3, axis=2)
    for anomaly in spec.anomalies:
        rows = slice(anomaly.v, anomaly.v + anomaly.height)
        cols = slice(anomaly.u, anomaly.u + anomaly.width)
        channel = 0 if anomaly.delta > 0 else 2
        rgb[rows, cols, channel] += 14.
    rgb += rng.normal(0., 10., size=rgb.shape)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def generate(spec, camera=None, return_rgb=False):
    """
    Generates the disparity, labels and camera of a scene.

    Road pixels take the planar disparity plus gaussian noise and label 1;
    anomaly pixels are additionally offset by their patch delta and take
    label 2.  Noisy samples that fall to zero or below are marked invalid.

    Parameters
    ----------
    spec : SceneSpec
        Scene to generate.
    camera : CameraModel, optional
        Camera to report.  Defaults to ``default_camera`` for the spec size.
    return_rgb : boolean, optional
        If True, also returns the shaded RGB proxy.

    Returns
    -------
    disparity : DisparityImage
    labels : LabelImage
    camera : CameraModel
    rgb : numpy array of uint8, shape (height, width, 3)
        Only returned if return_rgb is True.
    """
    validate_spec(spec)
    if camera is None:
        camera = default_camera(spec.width, spec.height)
    rng = np.random.default_rng(spec.seed)
    anomaly, offsets = _anomaly_mask(spec)
    data = planar_disparity(spec) + offsets
    if spec.noise_sigma > 0:
        data = data + rng.normal(0., spec.noise_sigma, size=data.shape)
    valid = data > 0
    disparity = io.DisparityImage(spec.width, spec.height, np.where(valid, data, 0.), valid)
    labels = io.LabelImage(spec.width, spec.height, np.where(anomaly, 2, 1))
    if return_rgb:
        return disparity, labels, camera, render_rgb(spec, rng)
    return disparity, labels, camera


def _draw_anomaly(rng, spec, placed):
    width = int(rng.integers(6, max(7, int(0.2 * spec.width) + 1)))
    height = int(rng.integers(4, max(5, int(0.2 * spec.height) + 1)))
    width = min(width, spec.width)
    height = min(height, spec.height)
    u = int(rng.integers(0, spec.width - width + 1))
    v = int(rng.integers(0, spec.height - height + 1))
    magnitude = float(rng.uniform(*DELTA_RANGE))
    delta = magnitude if rng.random() < 0.5 else -magnitude
    candidate = Anomaly(u, v, width, height, delta)
    if any(candidate.overlaps(other, margin=1) for other in placed):
        return None
    if delta < 0:
        road = planar_disparity(spec)[v:v + height, u:u + width]
        if np.min(road) <= magnitude + 1.:
            return None
    return candidate


def random_spec(rng, width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT, noise_sigma=DEFAULT_NOISE,
                max_anomalies=MAX_ANOMALIES, max_tries=1000):
    """
    Draws a scene spec from the default parameter ranges, redrawing until the
    road disparity stays at or above 1 px and the anomalies are inside the
    image and do not overlap.

    Parameters
    ----------
    rng : numpy.random.Generator
        Source of randomness; the spec seed is drawn from it as well.
    width, height : int, optional
        Image size.
    noise_sigma : float, optional
        Disparity noise of the scene.
    max_anomalies : int, optional
        Upper bound on the number of anomaly patches.
    max_tries : int, optional
        Number of road draws before giving up.

    Returns
    -------
    spec : SceneSpec
    """
    for _ in range(max_tries):
        spec = SceneSpec(width=width, height=height,
                         a0=float(rng.uniform(*A0_RANGE)),
                         a1=float(rng.uniform(*A1_RANGE)),
                         theta=float(rng.uniform(*THETA_RANGE)),
                         noise_sigma=noise_sigma)
        if np.min(planar_disparity(spec)) < MIN_ROAD_DISPARITY:
            continue
        n_anomalies = int(rng.integers(0, max_anomalies + 1))
        attempts = 0
        while len(spec.anomalies) < n_anomalies and attempts < 50:
            attempts += 1
            anomaly = _draw_anomaly(rng, spec, spec.anomalies)
            if anomaly is not None:
                spec.anomalies.append(anomaly)
        spec.seed = int(rng.integers(0, 2 ** 63 - 1))
        validate_spec(spec)
        return spec
    raise InvalidSpecError('No valid scene spec found in %d draws' % max_tries)


def split_sizes(n):
    """
    Number of scenes per split at the 70/15/15 ratio; rounding leftovers go
    to the test split.
    """
    if n < 1:
        raise ValueError('Need at least one scene, got %d' % n)
    n_train = max(1, n * SPLIT_RATIOS[0][1] // 100)
    n_val = min(n - n_train, n * SPLIT_RATIOS[1][1] // 100)
    return {'train': n_train, 'val': n_val, 'test': n - n_train - n_val}


def scene_paths(split_dir, scene_id):
    return {
        'disp': os.path.join(split_dir, 'disp', scene_id + '.pgm'),
        'rgb': os.path.join(split_dir, 'rgb', scene_id + '.ppm'),
        'label': os.path.join(split_dir, 'label', scene_id + '.pgm'),
    }


def write_scene(spec, split_dir, scene_id, camera=None):
    """
    Generates a scene and writes its disparity, RGB proxy and labels under
    ``split_dir``.
    """
    disparity, labels, camera, rgb = generate(spec, camera=camera, return_rgb=True)
    paths = scene_paths(split_dir, scene_id)
    for path in paths.values():
        os.makedirs(os.path.dirname(path), exist_ok=True)
    io.write_pgm16(disparity, paths['disp'])
    io.write_ppm(rgb, paths['rgb'])
    io.write_pgm8(labels, paths['label'])
    return paths


def load_scene(split_dir, scene_id):
    """
    Reads back a scene written by ``write_scene``.

    Returns
    -------
    disparity : DisparityImage
    rgb : numpy array of uint8, shape (height, width, 3)
    labels : LabelImage
    """
    paths = scene_paths(split_dir, scene_id)
    return io.read_pgm16(paths['disp']), io.read_ppm(paths['rgb']), io.read_pgm8(paths['label'])


def write_manifest(entries, path):
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for e in entries:
            writer.writerow([e.id, e.split, repr(e.a0), repr(e.a1), repr(e.theta_rad),
                             repr(e.noise_sigma), e.n_anomalies])


def load_manifest(path):
    """
    Reads a manifest written by ``make_split`` or ``generate_scenes``.

    Returns
    -------
    entries : list of ManifestEntry
    """
    with open(path, newline='') as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise io.FormatError('Manifest columns %s, expected %s' % (reader.fieldnames, MANIFEST_COLUMNS))
        try:
            return [ManifestEntry(id=row['id'], split=row['split'], a0=float(row['a0']), a1=float(row['a1']),
                                  theta_rad=float(row['theta_rad']), noise_sigma=float(row['noise_sigma']),
                                  n_anomalies=int(row['n_anomalies']))
                    for row in reader]
        except ValueError as err:
            raise io.FormatError('Malformed manifest row: %s' % err)


def _write_all(jobs, out_dir, threads):
    """Writes (spec, split, scene_id) jobs, then the camera and the manifest."""
    os.makedirs(out_dir, exist_ok=True)
    camera = None
    if jobs:
        camera = default_camera(jobs[0][0].width, jobs[0][0].height)

    def run(job):
        spec, split, scene_id = job
        split_dir = os.path.join(out_dir, split) if split != 'all' else out_dir
        write_scene(spec, split_dir, scene_id, camera=camera)
        return ManifestEntry(id=scene_id, split=split, a0=spec.a0, a1=spec.a1, theta_rad=spec.theta,
                             noise_sigma=spec.noise_sigma, n_anomalies=len(spec.anomalies))

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        entries = list(pool.map(run, jobs))
    if camera is not None:
        io.write_camera(camera, os.path.join(out_dir, 'camera.txt'))
    write_manifest(entries, os.path.join(out_dir, 'manifest.csv'))
    logger.info('Wrote %d scenes to %s', len(entries), out_dir)
    return entries


def generate_scenes(n, seed, out_dir, threads=1, width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT,
                    noise_sigma=DEFAULT_NOISE):
    """
    Writes n random scenes directly under ``out_dir`` (split "all"), with
    ``manifest.csv`` and ``camera.txt``.

    Returns
    -------
    manifest : list of ManifestEntry
    """
    rngs = spawn_rngs(seed, n)
    jobs = [(random_spec(rngs[i], width, height, noise_sigma), 'all', 'scene_%04d' % i) for i in range(n)]
    return _write_all(jobs, out_dir, threads)


def make_split(n, seed, out_dir, threads=1, width=DEFAULT_WIDTH, height=DEFAULT_HEIGHT,
               noise_sigma=DEFAULT_NOISE):
    """
    Writes n random scenes into ``train``, ``val`` and ``test`` subdirectories
    at a 70/15/15 ratio, plus ``manifest.csv`` and ``camera.txt``.

    Each scene draws its spec from its own generator, derived from (seed,
    scene index), so the output does not depend on ``threads``.

    Returns
    -------
    manifest : list of ManifestEntry
    """
    sizes = split_sizes(n)
    splits = [name for name, _ in SPLIT_RATIOS for _ in range(sizes[name])]
    rngs = spawn_rngs(seed, n)
    jobs = [(random_spec(rngs[i], width, height, noise_sigma), splits[i], 'scene_%04d' % i) for i in range(n)]
    return _write_all(jobs, out_dir, threads)

# -*- coding: utf-8 -*-
"""
Geometric feature images derived from a disparity image and a camera model:
depth, surface normals, elevation above the fitted ground plane, HHA
encodings and the transformed disparity.
"""
import logging
from dataclasses import dataclass
from dataclasses import field

import numpy as np
import scipy.linalg

from . import disparity_transform as dt
from .metrics import coeff_variation

logger = logging.getLogger(__name__)

FEATURE_KINDS = ('depth', 'normal3', 'elevation', 'hha3', 'tdisp')
HHA_RANGES = {'disparity': (0., 64.), 'elevation': (-0.5, 2.), 'angle': (0., 90.)}
ELEVATION_CV_OFFSET = 1.


class DegeneratePlaneError(dt.DegenerateFitError):
    """Raised when the masked points do not determine a plane."""


@dataclass
class DerivedFeature:
    """
    A feature image with its validity mask.

    Parameters
    ----------
    kind : string
        One of ``FEATURE_KINDS``.
    map : numpy array, shape (H, W, C)
        Feature values; undefined pixels hold 0.
    valid : numpy array of bool, shape (H, W)
        True where the feature is defined.
    meta : dict, optional
        Provenance: camera, road model, plane or normalization ranges.
    """
    kind: str
    map: np.ndarray
    valid: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError('Unknown feature kind %r, expected one of %s' % (self.kind, FEATURE_KINDS))
        self.map = np.asarray(self.map, dtype=np.float64)
        if self.map.ndim == 2:
            self.map = self.map[:, :, np.newaxis]
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.map.shape[:2]:
            raise ValueError('Feature mask %s does not match map %s' % (self.valid.shape, self.map.shape))


def _mask_array(mask):
    return np.asarray(getattr(mask, 'mask', mask), dtype=bool)


def depth_from_disparity(d, cam):
    """
    Depth z = fx * baseline / disparity, in meters.  Invalid pixels and
    zero disparities are masked and hold 0.

    Returns
    -------
    depth : DerivedFeature of kind 'depth', shape (H, W, 1)
    """
    valid = d.valid_mask & (d.data > 0)
    z = np.zeros_like(d.data)
    z[valid] = cam.fx * cam.baseline / d.data[valid]
    return DerivedFeature('depth', z, valid, {'camera': cam})


def back_project(d, cam):
    """
    Back-projects every pixel to camera coordinates (x right, y down, z
    forward).

    Returns
    -------
    points : numpy array, shape (H, W, 3)
        3-D point of each pixel in meters; 0 where undefined.
    valid : numpy array of bool, shape (H, W)
    """
    depth = depth_from_disparity(d, cam)
    z = depth.map[:, :, 0]
    v, u = np.mgrid[0:d.height, 0:d.width].astype(np.float64)
    points = np.stack([(u - cam.u0) * z / cam.fx, (v - cam.v0) * z / cam.fy, z], axis=-1)
    return points, depth.valid


def normal_image(d, cam):
    """
    Surface normals from the cross product of central-difference tangents of
    the back-projected points.

    Each normal is oriented toward the camera, n . X < 0, which gives n_z < 0
    for surfaces facing the camera.  Pixels on the image border, pixels
    lacking a valid 4-neighbourhood and pixels with a vanishing cross
    product are masked.

    Returns
    -------
    normals : DerivedFeature of kind 'normal3', shape (H, W, 3)
        Unit normals where defined.
    """
    points, valid = back_project(d, cam)
    normals = np.zeros_like(points)
    defined = np.zeros_like(valid)
    if d.height >= 3 and d.width >= 3:
        tu = points[1:-1, 2:] - points[1:-1, :-2]
        tv = points[2:, 1:-1] - points[:-2, 1:-1]
        n = np.cross(tu, tv)
        norm = np.linalg.norm(n, axis=-1)
        ok = (valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1]
              & valid[1:-1, 1:-1] & (norm > 0))
        n = np.where(ok[:, :, np.newaxis], n / np.where(norm > 0, norm, 1.)[:, :, np.newaxis], 0.)
        facing = np.sum(n * points[1:-1, 1:-1], axis=-1)
        n = np.where((facing > 0)[:, :, np.newaxis], -n, n)
        normals[1:-1, 1:-1] = n
        defined[1:-1, 1:-1] = ok
    return DerivedFeature('normal3', normals, defined, {'camera': cam})


def normal_rgb(normals):
    """
    Standard (n + 1) / 2 encoding of a normal image into [0, 1]; undefined
    pixels stay 0.
    """
    return np.where(normals.valid[:, :, np.newaxis], (normals.map + 1.) / 2., 0.)


def fit_ground_plane(points, mask):
    """
    Least-squares plane through the masked 3-D points.

    The plane is returned as n . X + offset = 0 with n a unit vector and the
    camera on its positive side (offset > 0), so n . X + offset is the signed
    height above the plane.

    Parameters
    ----------
    points : numpy array, shape (H, W, 3)
        Back-projected points.
    mask : array-like of bool, shape (H, W), or CoarseMask
        Pixels on the ground.

    Returns
    -------
    normal : numpy array, shape (3,)
    offset : float
    """
    mask = _mask_array(mask)
    p = points[mask]
    if len(p) < 3:
        raise DegeneratePlaneError('Need at least 3 points to fit a plane, got %d' % len(p))
    centroid = np.mean(p, axis=0)
    _, s, vt = scipy.linalg.svd(p - centroid, full_matrices=False)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise DegeneratePlaneError('Masked points are collinear; the ground plane is undetermined')
    normal = vt[-1]
    offset = -float(np.dot(normal, centroid))
    if offset < 0:
        normal, offset = -normal, -offset
    return normal, offset


def elevation_map(d, cam, mask):
    """
    Signed distance, in meters, of every pixel's 3-D point to the ground
    plane fitted on the masked pixels; positive above the road.

    Returns
    -------
    elevation : DerivedFeature of kind 'elevation', shape (H, W, 1)
        ``meta`` holds the plane normal and offset.
    """
    mask = _mask_array(mask)
    if not np.any(mask):
        raise DegeneratePlaneError('Ground mask is empty')
    points, valid = back_project(d, cam)
    normal, offset = fit_ground_plane(points, mask & valid)
    elevation = np.where(valid, np.tensordot(points, normal, axes=([2], [0])) + offset, 0.)
    logger.debug('Ground plane n=%s, offset=%.4f m', np.round(normal, 4), offset)
    return DerivedFeature('elevation', elevation, valid,
                          {'camera': cam, 'plane_normal': normal, 'plane_offset': offset})


def angle_to_ground(normals, ground_normal):
    """
    Angle in degrees between each surface normal and the ground-plane
    normal; 0 where the normal is undefined.
    """
    cos = np.clip(np.tensordot(normals.map, ground_normal, axes=([2], [0])), -1., 1.)
    return np.where(normals.valid, np.degrees(np.arccos(cos)), 0.)


def _rescale(x, bounds):
    lo, hi = bounds
    return np.clip((x - lo) / (hi - lo), 0., 1.)


def hha_image(d, cam, mask):
    """
    HHA encoding: disparity, elevation above the fitted ground plane, and the
    angle between the surface normal and the ground normal (which stands in
    for gravity).  Each channel is rescaled to [0, 1] with the fixed ranges
    of ``HHA_RANGES`` and clamped.

    Returns
    -------
    hha : DerivedFeature of kind 'hha3', shape (H, W, 3)
        ``meta`` holds the ranges and the ground plane.
    """
    normals = normal_image(d, cam)
    elevation = elevation_map(d, cam, mask)
    angle = angle_to_ground(normals, elevation.meta['plane_normal'])
    valid = normals.valid & elevation.valid
    channels = [_rescale(d.data, HHA_RANGES['disparity']),
                _rescale(elevation.map[:, :, 0], HHA_RANGES['elevation']),
                _rescale(angle, HHA_RANGES['angle'])]
    hha = np.where(valid[:, :, np.newaxis], np.stack(channels, axis=-1), 0.)
    meta = {'camera': cam, 'ranges': dict(HHA_RANGES),
            'plane_normal': elevation.meta['plane_normal'], 'plane_offset': elevation.meta['plane_offset']}
    return DerivedFeature('hha3', hha, valid, meta)


def tdisp_feature(d, model):
    """
    Transformed disparity D_t as a feature image.
    """
    d_t, delta = dt.transform(d, model, return_delta=True)
    return DerivedFeature('tdisp', d_t.data, d_t.valid_mask, {'road_model': model, 'delta': delta})


def difference_map(feature, region):
    """
    Per-pixel absolute deviation from the feature mean over a region; the
    channel mean is used for multi-channel features.  Pixels outside the
    region hold 0.
    """
    values = feature.map.mean(axis=2)
    region = _mask_array(region) & feature.valid
    if not np.any(region):
        raise ValueError('Region has no pixel where the feature is defined')
    return np.where(region, np.abs(values - np.mean(values[region])), 0.)


def consistency_report(d, cam, road_mask, model=None):
    """
    Coefficient of variation, over the road pixels, of the transformed
    disparity, of the mean channel of the (n + 1) / 2 normal encoding, and of
    the elevation shifted by ``ELEVATION_CV_OFFSET`` meters.

    Parameters
    ----------
    d : DisparityImage
        Original disparities.
    cam : CameraModel
        Camera of the image.
    road_mask : array-like of bool or CoarseMask
        Pixels the statistics are computed over; also the ground-plane fit.
    model : RoadModel, optional
        Road model for the transform.  Estimated from d when omitted.

    Returns
    -------
    report : dict
        Keys 'tdisp', 'normal', 'elevation' (c_v values) and
        'elevation_offset'.
    """
    road_mask = _mask_array(road_mask)
    if model is None:
        _, model, _ = dt.run_dt_pipeline(d)
    tdisp = tdisp_feature(d, model)
    normals = normal_image(d, cam)
    elevation = elevation_map(d, cam, road_mask)
    normal_mean = normal_rgb(normals).mean(axis=2)
    report = {
        'tdisp': coeff_variation(tdisp.map[:, :, 0][road_mask & tdisp.valid]),
        'normal': coeff_variation(normal_mean[road_mask & normals.valid]),
        'elevation': coeff_variation(elevation.map[:, :, 0][road_mask & elevation.valid] + ELEVATION_CV_OFFSET),
        'elevation_offset': ELEVATION_CV_OFFSET,
    }
    logger.info('c_v over %d road pixels: tdisp=%.5f normal=%.5f elevation=%.5f',
                int(np.count_nonzero(road_mask)), report['tdisp'], report['normal'], report['elevation'])
    return report


def derive(kind, d, cam, mask=None, model=None):
    """
    Computes a feature by name; ``mask`` is needed for 'elevation' and
    'hha3', ``model`` is optional for 'tdisp' (estimated when omitted).
    """
    if kind == 'depth':
        return depth_from_disparity(d, cam)
    if kind == 'normal3':
        return normal_image(d, cam)
    if kind in ('elevation', 'hha3'):
        if mask is None:
            mask, _ = dt.coarse_road_mask(d)
        return elevation_map(d, cam, mask) if kind == 'elevation' else hha_image(d, cam, mask)
    if kind == 'tdisp':
        if model is None:
            _, model, _ = dt.run_dt_pipeline(d)
        return tdisp_feature(d, model)
    raise ValueError('Unknown feature kind %r, expected one of %s' % (kind, FEATURE_KINDS))

# -*- coding: utf-8 -*-
"""
Readers and writers for the on-disk formats: 16-bit disparity images, label
and mask images, RGB proxies, PFM feature maps, TNSR tensors, and the
key-value documents holding road models and camera models.

Every reader works on the raw bytes of the file and converts any problem into
a FormatError carrying the byte offset at which parsing failed.
"""
import re
import struct
from dataclasses import dataclass

import numpy as np

DISPARITY_SCALE = 256
TENSOR_MAGIC = b'TNSR'
TENSOR_VERSION = 1
LABEL_CLASSES = (0, 1, 2)
ROAD_MODEL_KEYS = ('a0', 'a1', 'theta_rad', 'delta', 'energy', 'inlier_count')
CAMERA_KEYS = ('fx', 'fy', 'u0', 'v0', 'baseline')


class FormatError(ValueError):
    """
    Raised when a file does not follow its format.  ``offset`` is the byte
    offset at which the problem was found, or None when it is not tied to a
    position (e.g. a missing key).
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = '%s (at byte %d)' % (message, offset)
        super(FormatError, self).__init__(message)
        self.offset = offset


class RangeError(ValueError):
    """
    Raised when a value cannot be represented in the target format.  ``pixel``
    is the (u, v) position of the first offending sample.
    """

    def __init__(self, message, pixel=None):
        if pixel is not None:
            message = '%s at pixel (u=%d, v=%d)' % (message, pixel[0], pixel[1])
        super(RangeError, self).__init__(message)
        self.pixel = pixel


@dataclass
class DisparityImage:
    """
    Dense disparity image with a validity mask.

    Parameters
    ----------
    width, height : int
        Image size in pixels.
    data : numpy array, shape (height, width)
        Disparity in pixels.  Invalid pixels hold 0.
    valid_mask : numpy array of bool, shape (height, width)
        True where the disparity is known.
    scale : int, optional
        Fixed-point denominator used on disk.
    """
    width: int
    height: int
    data: np.ndarray
    valid_mask: np.ndarray
    scale: int = DISPARITY_SCALE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        shape = (self.height, self.width)
        if self.data.shape != shape or self.valid_mask.shape != shape:
            raise ValueError('Disparity data %s and mask %s do not match the image size %s'
                             % (self.data.shape, self.valid_mask.shape, shape))
        valid = self.data[self.valid_mask]
        if not np.all(np.isfinite(valid)) or np.any(valid < 0):
            raise ValueError('Valid disparities must be finite and non-negative')

    @classmethod
    def from_array(cls, data, valid_mask=None, scale=DISPARITY_SCALE):
        """
        Wraps a (height, width) array.  If no mask is given, every finite,
        strictly positive value is valid.
        """
        data = np.array(data, dtype=np.float64)
        if valid_mask is None:
            valid_mask = np.isfinite(data) & (data > 0)
        valid_mask = np.asarray(valid_mask, dtype=bool)
        data = np.where(valid_mask, data, 0.)
        height, width = data.shape
        return cls(width, height, data, valid_mask, scale)

    @property
    def n_valid(self):
        return int(np.count_nonzero(self.valid_mask))


@dataclass
class LabelImage:
    """
    Per-pixel class labels: 0 unlabeled, 1 drivable area, 2 road anomaly.
    """
    width: int
    height: int
    classes: np.ndarray

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.uint8)
        if self.classes.shape != (self.height, self.width):
            raise ValueError('Label array %s does not match the image size %s'
                             % (self.classes.shape, (self.height, self.width)))
        if not np.all(np.isin(self.classes, LABEL_CLASSES)):
            raise ValueError('Labels must lie in %s' % (LABEL_CLASSES,))

    @classmethod
    def from_array(cls, classes):
        classes = np.asarray(classes)
        return cls(classes.shape[1], classes.shape[0], classes)


@dataclass
class CameraModel:
    """
    Pinhole stereo camera.

    Parameters
    ----------
    fx, fy : float
        Focal lengths in pixels.
    u0, v0 : float
        Principal point in pixels.
    baseline : float
        Stereo baseline in meters.
    """
    fx: float
    fy: float
    u0: float
    v0: float
    baseline: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0 and self.baseline > 0):
            raise ValueError('Camera focal lengths and baseline must be positive')


# FeatureMap: numpy array of shape (H, W, C).


def _read_bytes(path):
    with open(path, 'rb') as fh:
        return fh.read()


def _write_bytes(path, payload):
    with open(path, 'wb') as fh:
        fh.write(payload)


def _parse_netpbm_header(buf, magics):
    """
    Parses a binary netpbm header (magic, width, height, maxval), allowing
    comments.  Returns the magic, the three fields, their byte offsets and the
    offset of the first payload byte.
    """
    if len(buf) < 2:
        raise FormatError('File too short for a netpbm header', 0)
    magic = buf[:2].decode('latin-1')
    if magic not in magics:
        raise FormatError('Unexpected magic %r, expected one of %s' % (magic, magics), 0)
    pos = 2
    values = []
    offsets = []
    while len(values) < 3:
        if pos < len(buf) and not (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b'#'):
            raise FormatError('Expected whitespace between header fields', pos)
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b'#'):
            if buf[pos:pos + 1] == b'#':
                end = buf.find(b'\n', pos)
                pos = len(buf) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError('Expected an integer header field', start)
        values.append(int(buf[start:pos]))
        offsets.append(start)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError('Missing whitespace after the maxval field', pos)
    width, height, maxval = values
    if width <= 0 or height <= 0:
        raise FormatError('Image dimensions must be positive, got %dx%d' % (width, height), offsets[0])
    return magic, width, height, maxval, offsets, pos + 1


def _read_netpbm(buf, magic, maxval, channels):
    _, width, height, file_maxval, offsets, start = _parse_netpbm_header(buf, (magic,))
    if file_maxval != maxval:
        raise FormatError('Unsupported maxval %d, expected %d' % (file_maxval, maxval), offsets[2])
    sample_bytes = 2 if maxval > 255 else 1
    n_bytes = width * height * channels * sample_bytes
    if len(buf) - start < n_bytes:
        raise FormatError('Truncated payload: expected %d bytes, found %d' % (n_bytes, len(buf) - start),
                          len(buf))
    dtype = '>u2' if sample_bytes == 2 else 'u1'
    raw = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=start)
    if channels == 1:
        return raw.reshape(height, width), start
    return raw.reshape(height, width, channels), start


def _netpbm_header(magic, width, height, maxval):
    return ('%s\n%d %d\n%d\n' % (magic, width, height, maxval)).encode('ascii')


def read_pgm16(path, scale=DISPARITY_SCALE):
    """
    Reads a 16-bit binary PGM disparity image.

    Parameters
    ----------
    path : string or path-like
        File to read.  Must be P5 with maxval 65535, big-endian samples.
    scale : int, optional
        Fixed-point denominator: disparity = sample / scale.  A sample of 0
        marks an invalid pixel.

    Returns
    -------
    img : DisparityImage
    """
    raw, _ = _read_netpbm(_read_bytes(path), 'P5', 65535, 1)
    valid = raw != 0
    data = raw.astype(np.float64) / scale
    height, width = raw.shape
    return DisparityImage(width, height, data, valid, scale)


def write_pgm16(img, path):
    """
    Writes a disparity image as a 16-bit binary PGM.  Values are quantized to
    1/scale; a valid disparity below 0.5/scale becomes 0 and therefore reads
    back as invalid.

    Raises
    ------
    RangeError
        If a valid value falls outside [0, 65535] once quantized.
    """
    q = np.where(img.valid_mask, np.round(img.data * img.scale), 0.)
    bad = ~np.isfinite(q) | (q < 0) | (q > 65535)
    if np.any(bad):
        v, u = np.argwhere(bad)[0]
        raise RangeError('Disparity %r is not representable with scale %d' % (img.data[v, u], img.scale),
                         (u, v))
    payload = q.astype('>u2').tobytes()
    _write_bytes(path, _netpbm_header('P5', img.width, img.height, 65535) + payload)


def read_pgm8(path):
    """
    Reads an 8-bit binary PGM holding a LabelImage.
    """
    buf = _read_bytes(path)
    raw, start = _read_netpbm(buf, 'P5', 255, 1)
    bad = ~np.isin(raw, LABEL_CLASSES)
    if np.any(bad):
        first = int(np.flatnonzero(bad)[0])
        raise FormatError('Label %d is not a known class' % raw.flat[first], start + first)
    return LabelImage.from_array(raw.copy())


def write_pgm8(labels, path):
    """
    Writes a LabelImage as an 8-bit binary PGM.
    """
    payload = np.ascontiguousarray(labels.classes, dtype=np.uint8).tobytes()
    _write_bytes(path, _netpbm_header('P5', labels.width, labels.height, 255) + payload)


def read_mask(path):
    """
    Reads a boolean mask stored as an 8-bit PGM (0 false, anything else true).
    """
    raw, _ = _read_netpbm(_read_bytes(path), 'P5', 255, 1)
    return raw > 0


def write_mask(mask, path):
    """
    Writes a boolean mask as an 8-bit PGM with values 0 and 255.
    """
    mask = np.asarray(mask, dtype=bool)
    payload = (mask.astype(np.uint8) * 255).tobytes()
    _write_bytes(path, _netpbm_header('P5', mask.shape[1], mask.shape[0], 255) + payload)


def read_ppm(path):
    """
    Reads a binary PPM (P6, maxval 255) into an array of shape (H, W, 3).
    """
    raw, _ = _read_netpbm(_read_bytes(path), 'P6', 255, 3)
    return raw.copy()


def write_ppm(rgb, path):
    """
    Writes an (H, W, 3) uint8 array as a binary PPM.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError('RGB proxy must have shape (H, W, 3), got %s' % (rgb.shape,))
    if rgb.dtype != np.uint8:
        if np.any(rgb < 0) or np.any(rgb > 255):
            raise RangeError('RGB values must lie in [0, 255]')
        rgb = rgb.astype(np.uint8)
    payload = np.ascontiguousarray(rgb).tobytes()
    _write_bytes(path, _netpbm_header('P6', rgb.shape[1], rgb.shape[0], 255) + payload)


def _read_line(buf, pos):
    end = buf.find(b'\n', pos)
    if end < 0:
        raise FormatError('Unterminated header line', pos)
    return buf[pos:end], end + 1


def read_pfm(path):
    """
    Reads a grayscale PFM file.

    Returns
    -------
    fmap : numpy array of float32, shape (H, W, 1)
        Rows are returned top-down; the file stores them bottom-up.
    """
    buf = _read_bytes(path)
    line, pos = _read_line(buf, 0)
    tag = line.strip()
    if tag == b'PF':
        raise FormatError('Color PFM (PF) is not supported, only grayscale Pf', 0)
    if tag != b'Pf':
        raise FormatError('Not a PFM file', 0)
    dims_at = pos
    line, pos = _read_line(buf, pos)
    match = re.match(rb'^\s*(\d+)\s+(\d+)\s*$', line)
    if not match:
        raise FormatError('Malformed PFM dimensions line', dims_at)
    width, height = int(match.group(1)), int(match.group(2))
    if width <= 0 or height <= 0:
        raise FormatError('PFM dimensions must be positive', dims_at)
    scale_at = pos
    line, pos = _read_line(buf, pos)
    try:
        scale = float(line.decode('ascii').strip())
    except (UnicodeDecodeError, ValueError):
        raise FormatError('Malformed PFM scale line', scale_at)
    if scale == 0 or not np.isfinite(scale):
        raise FormatError('PFM scale must be finite and non-zero', scale_at)
    endian = '<' if scale < 0 else '>'
    n_bytes = width * height * 4
    if len(buf) - pos < n_bytes:
        raise FormatError('Truncated payload: expected %d bytes, found %d' % (n_bytes, len(buf) - pos), len(buf))
    data = np.frombuffer(buf, dtype=endian + 'f4', count=width * height, offset=pos)
    data = np.flipud(data.reshape(height, width)).astype(np.float32)
    return data[:, :, np.newaxis]


def write_pfm(fmap, path):
    """
    Writes a single-channel feature map, shape (H, W) or (H, W, 1), as a
    little-endian grayscale PFM.

    Raises
    ------
    RangeError
        If the map contains NaN.
    """
    fmap = np.asarray(fmap)
    if fmap.ndim == 3 and fmap.shape[2] == 1:
        fmap = fmap[:, :, 0]
    if fmap.ndim != 2:
        raise ValueError('PFM output must be single-channel, got shape %s' % (fmap.shape,))
    if np.any(np.isnan(fmap)):
        v, u = np.argwhere(np.isnan(fmap))[0]
        raise RangeError('NaN sample cannot be written to PFM', (u, v))
    height, width = fmap.shape
    payload = np.flipud(fmap).astype('<f4').tobytes()
    header = ('Pf\n%d %d\n-1.0\n' % (width, height)).encode('ascii')
    _write_bytes(path, header + payload)


def read_tensor(path):
    """
    Reads a TNSR file: magic "TNSR", u32 version, u32 rank, rank u32 dims,
    then float32 little-endian samples in row-major order (last axis
    innermost).

    Returns
    -------
    tensor : numpy array of float32
    """
    buf = _read_bytes(path)
    if len(buf) < 12:
        raise FormatError('File too short for a TNSR header', len(buf))
    if buf[:4] != TENSOR_MAGIC:
        raise FormatError('Bad magic %r, expected %r' % (buf[:4], TENSOR_MAGIC), 0)
    version, rank = struct.unpack_from('<II', buf, 4)
    if version != TENSOR_VERSION:
        raise FormatError('Unsupported TNSR version %d' % version, 4)
    dims_end = 12 + 4 * rank
    if len(buf) < dims_end:
        raise FormatError('Truncated dimension list for rank %d' % rank, len(buf))
    dims = struct.unpack_from('<%dI' % rank, buf, 12)
    count = 1
    for dim in dims:
        count *= dim
    if len(buf) - dims_end != 4 * count:
        raise FormatError('Payload length mismatch: expected %d bytes, found %d'
                          % (4 * count, len(buf) - dims_end), dims_end)
    data = np.frombuffer(buf, dtype='<f4', count=count, offset=dims_end)
    return data.reshape(dims).astype(np.float32)


def write_tensor(tensor, path):
    """
    Writes an array as a TNSR file.  Samples are stored as float32.
    """
    tensor = np.asarray(tensor)
    header = TENSOR_MAGIC + struct.pack('<II', TENSOR_VERSION, tensor.ndim)
    header += struct.pack('<%dI' % tensor.ndim, *tensor.shape)
    _write_bytes(path, header + np.ascontiguousarray(tensor).astype('<f4').tobytes())


def _read_key_values(path, keys):
    buf = _read_bytes(path)
    try:
        text = buf.decode('utf-8')
    except UnicodeDecodeError as err:
        raise FormatError('Document is not valid UTF-8', err.start)
    values = {}
    offsets = {}
    pos = 0
    for line in text.splitlines(True):
        stripped = line.strip()
        if stripped and not stripped.startswith('#'):
            if '=' not in stripped:
                raise FormatError('Expected key=value, got %r' % stripped, pos)
            key, value = [s.strip() for s in stripped.split('=', 1)]
            values[key] = value
            offsets[key] = pos
        pos += len(line.encode('utf-8'))
    for key in keys:
        if key not in values:
            raise FormatError('Missing key %r' % key)
    return values, offsets


def _parse_float(values, offsets, key):
    try:
        value = float(values[key])
    except ValueError:
        raise FormatError('Value of %r is not numeric: %r' % (key, values[key]), offsets[key])
    if not np.isfinite(value):
        raise FormatError('Value of %r is not finite' % key, offsets[key])
    return value


def read_road_model(path):
    """
    Reads a road model from its key-value text document.

    Returns
    -------
    model : disparity_transform.RoadModel
    """
    from .disparity_transform import RoadModel
    values, offsets = _read_key_values(path, ROAD_MODEL_KEYS)
    floats = {key: _parse_float(values, offsets, key) for key in ROAD_MODEL_KEYS[:-1]}
    try:
        inliers = int(values['inlier_count'])
    except ValueError:
        raise FormatError('Value of inlier_count is not an integer: %r' % values['inlier_count'],
                          offsets['inlier_count'])
    return RoadModel(a0=floats['a0'], a1=floats['a1'], theta=floats['theta_rad'],
                     delta=floats['delta'], energy=floats['energy'], inlier_count=inliers)


def write_road_model(model, path):
    """
    Writes a road model as a key-value text document.  Floats are written
    with repr, so reading back reproduces them exactly.
    """
    lines = ['a0=%r' % float(model.a0),
             'a1=%r' % float(model.a1),
             'theta_rad=%r' % float(model.theta),
             'delta=%r' % float(model.delta),
             'energy=%r' % float(model.energy),
             'inlier_count=%d' % int(model.inlier_count)]
    _write_bytes(path, ('\n'.join(lines) + '\n').encode('utf-8'))


def read_camera(path):
    """
    Reads a camera model from a key-value text document with keys fx, fy, u0,
    v0 and baseline.
    """
    values, offsets = _read_key_values(path, CAMERA_KEYS)
    return CameraModel(**{key: _parse_float(values, offsets, key) for key in CAMERA_KEYS})


def write_camera(camera, path):
    lines = ['%s=%r' % (key, float(getattr(camera, key))) for key in CAMERA_KEYS]
    _write_bytes(path, ('\n'.join(lines) + '\n').encode('utf-8'))

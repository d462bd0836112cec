import math

import numpy as np
import pytest

from pyroadfuse import io
from pyroadfuse.disparity_transform import RoadModel


@pytest.fixture
def disparity():
    rng = np.random.default_rng(0)
    data = rng.uniform(0.5, 120., size=(7, 9))
    valid = rng.random((7, 9)) > 0.2
    return io.DisparityImage.from_array(data, valid)


class TestDisparityImage():
    def test_from_array_masks_non_positive(self):
        img = io.DisparityImage.from_array([[0., 1.], [np.nan, 2.5]])
        assert(img.width == 2 and img.height == 2)
        assert(img.n_valid == 2)
        assert(img.data[1, 0] == 0.)

    def test_rejects_negative_valid(self):
        with pytest.raises(ValueError):
            io.DisparityImage(2, 1, np.array([[1., -1.]]), np.array([[True, True]]))

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            io.DisparityImage(3, 1, np.zeros((1, 2)), np.zeros((1, 2), dtype=bool))


class TestPgm16():
    def test_round_trip_within_quantum(self, disparity, tmp_path):
        path = str(tmp_path / 'd.pgm')
        io.write_pgm16(disparity, path)
        back = io.read_pgm16(path)
        assert(back.width == disparity.width and back.height == disparity.height)
        assert(np.array_equal(back.valid_mask, disparity.valid_mask))
        err = np.abs(back.data - disparity.data)[disparity.valid_mask]
        assert(np.all(err <= 0.5 / io.DISPARITY_SCALE + 1e-12))

    def test_exact_fixed_point_values(self, tmp_path):
        img = io.DisparityImage.from_array(np.array([[1.5, 0.25, 255.]]))
        path = str(tmp_path / 'd.pgm')
        io.write_pgm16(img, path)
        assert(np.array_equal(io.read_pgm16(path).data, img.data))

    def test_header_layout(self, disparity, tmp_path):
        path = tmp_path / 'd.pgm'
        io.write_pgm16(disparity, str(path))
        payload = path.read_bytes()
        assert(payload.startswith(b'P5\n9 7\n65535\n'))
        assert(len(payload) == len(b'P5\n9 7\n65535\n') + 2 * 63)

    def test_out_of_range(self, tmp_path):
        img = io.DisparityImage.from_array(np.array([[1., 300.]]))
        with pytest.raises(io.RangeError) as excinfo:
            io.write_pgm16(img, str(tmp_path / 'd.pgm'))
        assert(excinfo.value.pixel == (1, 0))

    def test_truncated(self, disparity, tmp_path):
        path = tmp_path / 'd.pgm'
        io.write_pgm16(disparity, str(path))
        payload = path.read_bytes()
        path.write_bytes(payload[:-3])
        with pytest.raises(io.FormatError) as excinfo:
            io.read_pgm16(str(path))
        assert(excinfo.value.offset == len(payload) - 3)

    @pytest.mark.parametrize('header', [b'P2\n2 1\n65535\n', b'P5\n2 1\n255\n', b'P5\nx 1\n65535\n'])
    def test_bad_header(self, header, tmp_path):
        path = tmp_path / 'd.pgm'
        path.write_bytes(header + b'\x00' * 8)
        with pytest.raises(io.FormatError):
            io.read_pgm16(str(path))

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / 'd.pgm'
        path.write_bytes(b'P5\n# made by hand\n2 1\n65535\n\x01\x00\x00\x00')
        img = io.read_pgm16(str(path))
        assert(img.data[0, 0] == 1.)
        assert(not img.valid_mask[0, 1])


class TestLabels():
    def test_round_trip(self, tmp_path):
        labels = io.LabelImage.from_array(np.array([[0, 1, 2], [2, 1, 0]]))
        path = str(tmp_path / 'l.pgm')
        io.write_pgm8(labels, path)
        assert(np.array_equal(io.read_pgm8(path).classes, labels.classes))

    def test_unknown_class(self, tmp_path):
        path = tmp_path / 'l.pgm'
        path.write_bytes(b'P5\n2 1\n255\n\x01\x07')
        with pytest.raises(io.FormatError) as excinfo:
            io.read_pgm8(str(path))
        assert(excinfo.value.offset == len(b'P5\n2 1\n255\n') + 1)

    def test_label_image_rejects_class(self):
        with pytest.raises(ValueError):
            io.LabelImage.from_array(np.array([[3]]))


class TestMaskAndRgb():
    def test_mask_round_trip(self, tmp_path):
        mask = np.array([[True, False], [False, True]])
        path = str(tmp_path / 'm.pgm')
        io.write_mask(mask, path)
        assert(np.array_equal(io.read_mask(path), mask))

    def test_ppm_round_trip(self, tmp_path):
        rgb = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
        path = str(tmp_path / 'c.ppm')
        io.write_ppm(rgb, path)
        assert(np.array_equal(io.read_ppm(path), rgb))

    def test_ppm_range(self, tmp_path):
        with pytest.raises(io.RangeError):
            io.write_ppm(np.full((1, 1, 3), 300.), str(tmp_path / 'c.ppm'))


class TestPfm():
    def test_round_trip_and_orientation(self, tmp_path):
        fmap = np.arange(12, dtype=np.float32).reshape(3, 4)
        path = str(tmp_path / 'f.pfm')
        io.write_pfm(fmap, path)
        back = io.read_pfm(path)
        assert(back.shape == (3, 4, 1))
        assert(np.array_equal(back[:, :, 0], fmap))

    def test_big_endian_file(self, tmp_path):
        path = tmp_path / 'f.pfm'
        rows = np.array([[1., 2.], [3., 4.]], dtype='>f4')
        path.write_bytes(b'Pf\n2 2\n1.0\n' + rows.tobytes())
        back = io.read_pfm(str(path))
        # the file stores the bottom row first
        assert(np.array_equal(back[:, :, 0], [[3., 4.], [1., 2.]]))

    def test_color_rejected(self, tmp_path):
        path = tmp_path / 'f.pfm'
        path.write_bytes(b'PF\n1 1\n-1.0\n' + b'\x00' * 12)
        with pytest.raises(io.FormatError):
            io.read_pfm(str(path))

    def test_nan_rejected(self, tmp_path):
        with pytest.raises(io.RangeError):
            io.write_pfm(np.array([[0., np.nan]]), str(tmp_path / 'f.pfm'))


class TestTensor():
    @pytest.mark.parametrize('shape', [(5,), (2, 3), (2, 3, 4), (1, 2, 3, 2)])
    def test_round_trip(self, shape, tmp_path):
        data = np.random.default_rng(1).normal(size=shape).astype(np.float32)
        path = str(tmp_path / 't.tnsr')
        io.write_tensor(data, path)
        back = io.read_tensor(path)
        assert(back.shape == shape)
        assert(np.array_equal(back, data))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 't.tnsr'
        path.write_bytes(b'TNSX' + b'\x01\x00\x00\x00' + b'\x00' * 4)
        with pytest.raises(io.FormatError) as excinfo:
            io.read_tensor(str(path))
        assert(excinfo.value.offset == 0)

    def test_payload_mismatch(self, tmp_path):
        path = tmp_path / 't.tnsr'
        io.write_tensor(np.zeros((2, 2)), str(path))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(io.FormatError):
            io.read_tensor(str(path))


class TestKeyValueDocuments():
    def test_road_model_round_trip(self, tmp_path):
        model = RoadModel(a0=2.0000001, a1=0.4999, theta=math.radians(-3.3), delta=7., energy=1e-9,
                          inlier_count=4321)
        path = str(tmp_path / 'm.txt')
        io.write_road_model(model, path)
        assert(io.read_road_model(path) == model)

    def test_road_model_missing_key(self, tmp_path):
        path = tmp_path / 'm.txt'
        path.write_text('a0=1\na1=0.5\n')
        with pytest.raises(io.FormatError):
            io.read_road_model(str(path))

    def test_road_model_bad_value(self, tmp_path):
        path = tmp_path / 'm.txt'
        text = 'a0=1\na1=abc\ntheta_rad=0\ndelta=1\nenergy=0\ninlier_count=3\n'
        path.write_text(text)
        with pytest.raises(io.FormatError) as excinfo:
            io.read_road_model(str(path))
        assert(excinfo.value.offset == len('a0=1\n'))

    def test_camera_round_trip(self, camera, tmp_path):
        path = str(tmp_path / 'cam.txt')
        io.write_camera(camera, path)
        assert(io.read_camera(path) == camera)

import math
import os

import numpy as np
import pytest

from pyroadfuse import io
from pyroadfuse import synth


class TestGenerate():
    def test_flat_rows_follow_profile(self, flat_scene):
        disparity, labels, camera = flat_scene
        v = np.arange(64, dtype=np.float64)
        assert(np.allclose(disparity.data, (2. + 0.5 * v)[:, np.newaxis], atol=1e-12))
        assert(np.all(disparity.valid_mask))
        assert(np.all(labels.classes == 1))

    def test_anomaly_offset_and_label(self):
        anomaly = synth.Anomaly(u=10, v=20, width=8, height=5, delta=10.)
        spec = synth.SceneSpec(width=96, height=64, a0=2., a1=0.5, theta=0., anomalies=[anomaly], noise_sigma=0.)
        disparity, labels, _ = synth.generate(spec)
        road = synth.planar_disparity(spec)
        inside = (slice(20, 25), slice(10, 18))
        assert(np.allclose(disparity.data[inside], road[inside] + 10.))
        assert(np.all(labels.classes[inside] == 2))
        assert(np.count_nonzero(labels.classes == 2) == 40)

    def test_rolled_profile(self, rolled_spec, rolled_scene):
        disparity, _, _ = rolled_scene
        theta = rolled_spec.theta
        u, v = 40, 30
        expected = 2. + 0.5 * (v * math.cos(theta) - u * math.sin(theta))
        assert(abs(disparity.data[v, u] - expected) < 1e-12)

    def test_deterministic(self, pothole_spec):
        first = synth.generate(pothole_spec, return_rgb=True)
        second = synth.generate(pothole_spec, return_rgb=True)
        assert(np.array_equal(first[0].data, second[0].data))
        assert(np.array_equal(first[3], second[3]))

    def test_noise_level(self, pothole_spec, pothole_scene):
        disparity, labels = pothole_scene[0], pothole_scene[1]
        road = synth.planar_disparity(pothole_spec)
        residual = (disparity.data - road)[labels.classes == 1]
        assert(abs(np.std(residual) - 0.25) < 0.02)

    def test_rgb_proxy(self, pothole_scene):
        rgb = pothole_scene[3]
        assert(rgb.shape == (64, 96, 3))
        assert(rgb.dtype == np.uint8)

    def test_non_positive_rejected(self):
        spec = synth.SceneSpec(width=96, height=64, a0=2., a1=0.5, theta=math.radians(5.), noise_sigma=0.)
        with pytest.raises(synth.InvalidSpecError) as excinfo:
            synth.generate(spec)
        u, v = excinfo.value.pixel
        assert(synth.planar_disparity(spec)[v, u] <= 0)

    def test_anomaly_outside_rejected(self, flat_spec):
        spec = synth.SceneSpec(width=96, height=64, a0=2., a1=0.5, theta=0.,
                               anomalies=[synth.Anomaly(90, 10, 10, 4, 5.)])
        with pytest.raises(synth.InvalidSpecError):
            synth.generate(spec)

    def test_plane_disparity_matches_road(self, camera):
        # the ground y = h seen by a level camera has disparity fx b (v - v0) / (fy h)
        h = 1.5
        d = synth.plane_disparity([0., 1., 0.], -h, camera, 96, 64)
        v = np.arange(64, dtype=np.float64)
        expected = camera.fx * camera.baseline * (v - camera.v0) / (camera.fy * h)
        assert(np.allclose(d, expected[:, np.newaxis]))


class TestRandomSpec():
    def test_specs_are_valid(self, random_specs):
        for spec in random_specs:
            synth.validate_spec(spec)
            assert(abs(spec.theta) <= math.radians(10.) + 1e-12)
            assert(synth.A0_RANGE[0] <= spec.a0 <= synth.A0_RANGE[1])
            assert(np.min(synth.planar_disparity(spec)) >= synth.MIN_ROAD_DISPARITY)
            assert(len(spec.anomalies) <= synth.MAX_ANOMALIES)
            for i, a in enumerate(spec.anomalies):
                for b in spec.anomalies[i + 1:]:
                    assert(not a.overlaps(b))

    def test_seeded(self):
        first = synth.random_spec(np.random.default_rng(5))
        second = synth.random_spec(np.random.default_rng(5))
        assert(first == second)


class TestSplit():
    @pytest.mark.parametrize('n, sizes', [(20, (14, 3, 3)), (1, (1, 0, 0)), (10, (7, 1, 2))])
    def test_split_sizes(self, n, sizes):
        got = synth.split_sizes(n)
        assert((got['train'], got['val'], got['test']) == sizes)

    def test_make_split_layout(self, tmp_path):
        out = str(tmp_path / 'data')
        manifest = synth.make_split(20, 7, out)
        assert(len(manifest) == 20)
        for split, count in (('train', 14), ('val', 3), ('test', 3)):
            assert(len(os.listdir(os.path.join(out, split, 'disp'))) == count)
        entries = synth.load_manifest(os.path.join(out, 'manifest.csv'))
        assert(entries == manifest)
        cam = io.read_camera(os.path.join(out, 'camera.txt'))
        assert(cam == synth.default_camera())

    def test_threads_do_not_change_output(self, tmp_path):
        one = synth.make_split(6, 3, str(tmp_path / 'a'), threads=1)
        four = synth.make_split(6, 3, str(tmp_path / 'b'), threads=4)
        assert(one == four)
        for entry in one:
            split = entry.split
            a = (tmp_path / 'a' / split / 'disp' / (entry.id + '.pgm')).read_bytes()
            b = (tmp_path / 'b' / split / 'disp' / (entry.id + '.pgm')).read_bytes()
            assert(a == b)

    def test_load_scene(self, tmp_path, pothole_spec):
        split_dir = str(tmp_path / 'train')
        synth.write_scene(pothole_spec, split_dir, 'scene_0000')
        disparity, rgb, labels = synth.load_scene(split_dir, 'scene_0000')
        expected, expected_labels, _, expected_rgb = synth.generate(pothole_spec, return_rgb=True)
        assert(np.allclose(disparity.data, expected.data, atol=0.5 / 256))
        assert(np.array_equal(labels.classes, expected_labels.classes))
        assert(np.array_equal(rgb, expected_rgb))

    def test_bad_manifest(self, tmp_path):
        path = tmp_path / 'manifest.csv'
        path.write_text('id,split\nscene_0000,train\n')
        with pytest.raises(io.FormatError):
            synth.load_manifest(str(path))

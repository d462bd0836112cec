import math

import numpy as np
import pytest

from pyroadfuse import features
from pyroadfuse import io
from pyroadfuse import synth


def _degrees(normals, reference):
    cos = np.clip(normals @ reference / np.linalg.norm(reference), -1., 1.)
    return np.degrees(np.arccos(cos))


def _interior(mask):
    inner = np.zeros_like(mask)
    inner[1:-1, 1:-1] = (mask[1:-1, 1:-1] & mask[:-2, 1:-1] & mask[2:, 1:-1]
                         & mask[1:-1, :-2] & mask[1:-1, 2:])
    return inner


@pytest.fixture(scope='module')
def clean_pothole(pothole_spec):
    spec = synth.SceneSpec(width=pothole_spec.width, height=pothole_spec.height, a0=pothole_spec.a0,
                           a1=pothole_spec.a1, theta=pothole_spec.theta, anomalies=pothole_spec.anomalies,
                           noise_sigma=0.)
    return synth.generate(spec)


@pytest.fixture(scope='module')
def wall_scene(flat_scene, camera):
    """Flat road with a vertical wall x = 0.2 m on the right."""
    road = flat_scene[0].data
    wall = synth.plane_disparity((1., 0., 0.), -0.2, camera, 96, 64)
    d = io.DisparityImage.from_array(np.maximum(road, wall))
    return d, road >= wall


class TestDepth():
    def test_formula(self):
        cam = io.CameraModel(fx=100., fy=100., u0=1., v0=1., baseline=0.5)
        d = io.DisparityImage.from_array([[2., 4.], [0., 1.]])
        depth = features.depth_from_disparity(d, cam)
        assert(depth.kind == 'depth')
        assert(depth.map.shape == (2, 2, 1))
        assert(np.allclose(depth.map[:, :, 0], [[25., 12.5], [0., 50.]]))
        assert(np.array_equal(depth.valid, [[True, True], [False, True]]))

    def test_doubling_halves(self, flat_scene, camera):
        d = flat_scene[0]
        double = io.DisparityImage.from_array(2. * d.data)
        z1 = features.depth_from_disparity(d, camera).map
        z2 = features.depth_from_disparity(double, camera).map
        assert(np.allclose(z2, z1 / 2.))


class TestNormals():
    def test_fronto_parallel(self):
        cam = io.CameraModel(fx=50., fy=50., u0=6., v0=5., baseline=0.5)
        d = io.DisparityImage.from_array(np.full((10, 12), 5.))
        normals = features.normal_image(d, cam)
        assert(not np.any(normals.valid[0]) and not np.any(normals.valid[:, -1]))
        assert(np.all(normals.valid[1:-1, 1:-1]))
        assert(np.allclose(normals.map[1:-1, 1:-1], [0., 0., -1.]))

    @pytest.mark.parametrize('scene', ['flat_scene', 'rolled_scene'])
    def test_ground_plane_constant(self, scene, camera, request):
        d = request.getfixturevalue(scene)[0]
        normals = features.normal_image(d, camera)
        n = normals.map[normals.valid]
        assert(np.allclose(np.linalg.norm(n, axis=1), 1., atol=1e-6))
        assert(np.max(_degrees(n, n[0])) < 0.5)
        points, _ = features.back_project(d, camera)
        assert(np.all(np.sum(normals.map * points, axis=-1)[normals.valid] < 0))

    @pytest.mark.parametrize('scene', ['flat_scene', 'rolled_scene'])
    def test_ground_faces_camera(self, scene, camera, request):
        normals = features.normal_image(request.getfixturevalue(scene)[0], camera)
        assert(np.count_nonzero(normals.valid) > 0)
        assert(np.all(normals.map[normals.valid][:, 2] < 0))

    def test_anomaly_edges(self, clean_pothole, camera):
        d = clean_pothole[0]
        normals = features.normal_image(d, camera)
        reference = normals.map[55, 10]
        for v, u in [(45, 29), (45, 30), (45, 49), (45, 50)]:
            assert(normals.valid[v, u])
            assert(_degrees(normals.map[v, u], reference) > 10.)

    def test_scale_invariance(self, rolled_scene, camera):
        d = rolled_scene[0]
        scaled = io.DisparityImage.from_array(3. * d.data)
        first = features.normal_image(d, camera)
        second = features.normal_image(scaled, camera)
        assert(np.array_equal(first.valid, second.valid))
        assert(np.allclose(first.map, second.map, atol=1e-6))

    def test_invalid_neighbour(self, flat_scene, camera):
        data = flat_scene[0].data.copy()
        data[20, 30] = 0.
        normals = features.normal_image(io.DisparityImage.from_array(data), camera)
        for v, u in [(20, 30), (19, 30), (21, 30), (20, 29), (20, 31)]:
            assert(not normals.valid[v, u])
            assert(np.all(normals.map[v, u] == 0))
        assert(normals.valid[19, 29])

    def test_rgb_encoding(self, flat_scene, camera):
        normals = features.normal_image(flat_scene[0], camera)
        rgb = features.normal_rgb(normals)
        assert(np.all((rgb >= 0) & (rgb <= 1)))
        assert(np.all(rgb[0] == 0))


class TestElevation():
    def test_flat_road_zero(self, flat_scene, camera):
        d = flat_scene[0]
        elevation = features.elevation_map(d, camera, np.ones((64, 96), dtype=bool))
        values = elevation.map[:, :, 0][elevation.valid]
        assert(np.max(np.abs(values)) < 1e-6)
        assert(abs(np.mean(values)) < 1e-9)
        normal = elevation.meta['plane_normal']
        assert(abs(np.linalg.norm(normal) - 1.) < 1e-12)
        assert(elevation.meta['plane_offset'] > 0)

    def test_anomaly_sign(self, clean_pothole, camera):
        d, labels, _ = clean_pothole
        elevation = features.elevation_map(d, camera, labels.classes == 1).map[:, :, 0]
        assert(np.all(elevation[40:50, 30:50] < 0))
        assert(np.all(elevation[20:28, 70:80] > 0))
        assert(np.max(np.abs(elevation[labels.classes == 1])) < 1e-6)

    def test_accepts_coarse_mask(self, flat_scene, camera):
        from pyroadfuse import disparity_transform as dt
        mask, _ = dt.coarse_road_mask(flat_scene[0])
        elevation = features.elevation_map(flat_scene[0], camera, mask)
        assert(np.max(np.abs(elevation.map)) < 1e-6)

    def test_empty_mask(self, flat_scene, camera):
        with pytest.raises(features.DegeneratePlaneError):
            features.elevation_map(flat_scene[0], camera, np.zeros((64, 96), dtype=bool))

    def test_collinear(self, flat_scene, camera):
        mask = np.zeros((64, 96), dtype=bool)
        mask[30] = True
        with pytest.raises(features.DegeneratePlaneError):
            features.elevation_map(flat_scene[0], camera, mask)
        assert(issubclass(features.DegeneratePlaneError, ValueError))


class TestHHA():
    def test_range(self, pothole_scene, camera):
        d, labels = pothole_scene[0], pothole_scene[1]
        hha = features.hha_image(d, camera, labels.classes == 1)
        assert(hha.map.shape == (64, 96, 3))
        assert(np.all((hha.map >= 0) & (hha.map <= 1)))
        assert(hha.meta['ranges'] == features.HHA_RANGES)

    def test_wall_and_road(self, wall_scene, camera):
        d, road = wall_scene
        hha = features.hha_image(d, camera, road)
        wall = _interior(~road) & hha.valid
        floor = _interior(road) & hha.valid
        assert(np.count_nonzero(wall) > 100 and np.count_nonzero(floor) > 1000)
        assert(np.allclose(hha.map[:, :, 2][wall], 1., atol=1e-6))
        assert(np.all(hha.map[:, :, 2][floor] < 1e-5))
        assert(np.allclose(hha.map[:, :, 1][floor], 0.5 / 2.5, atol=1e-6))

    def test_angle_to_ground(self, wall_scene, camera):
        d, road = wall_scene
        normals = features.normal_image(d, camera)
        ground = features.elevation_map(d, camera, road).meta['plane_normal']
        angle = features.angle_to_ground(normals, ground)
        wall = _interior(~road) & normals.valid
        assert(np.allclose(angle[wall], 90., atol=1e-4))
        assert(np.all(angle[~normals.valid] == 0))


class TestConsistency():
    def test_ordering(self, pothole_scene, camera):
        d, labels = pothole_scene[0], pothole_scene[1]
        rep = features.consistency_report(d, camera, labels.classes == 1)
        assert(rep['elevation_offset'] == features.ELEVATION_CV_OFFSET)
        assert(rep['tdisp'] < rep['normal'])
        assert(rep['tdisp'] < rep['elevation'])

    def test_difference_map(self, flat_scene):
        from pyroadfuse import disparity_transform as dt
        _, model, _ = dt.run_dt_pipeline(flat_scene[0])
        tdisp = features.tdisp_feature(flat_scene[0], model)
        diff = features.difference_map(tdisp, np.ones((64, 96), dtype=bool))
        assert(np.max(diff) < 1e-5)
        with pytest.raises(ValueError):
            features.difference_map(tdisp, np.zeros((64, 96), dtype=bool))


class TestDerive():
    @pytest.mark.parametrize('kind,channels', [('depth', 1), ('normal3', 3), ('elevation', 1),
                                               ('hha3', 3), ('tdisp', 1)])
    def test_kinds(self, kind, channels, pothole_scene, camera):
        feature = features.derive(kind, pothole_scene[0], camera)
        assert(feature.kind == kind)
        assert(feature.map.shape == (64, 96, channels))
        assert(np.all(np.isfinite(feature.map)))

    def test_unknown(self, flat_scene, camera):
        with pytest.raises(ValueError):
            features.derive('curvature', flat_scene[0], camera)

    def test_feature_validation(self):
        feature = features.DerivedFeature('depth', np.ones((3, 4)), np.ones((3, 4), dtype=bool))
        assert(feature.map.shape == (3, 4, 1))
        with pytest.raises(ValueError):
            features.DerivedFeature('colour', np.ones((3, 4)), np.ones((3, 4), dtype=bool))
        with pytest.raises(ValueError):
            features.DerivedFeature('depth', np.ones((3, 4)), np.ones((4, 3), dtype=bool))

    def test_tdisp_on_road(self, rolled_scene):
        from pyroadfuse import disparity_transform as dt
        _, model, _ = dt.run_dt_pipeline(rolled_scene[0])
        tdisp = features.tdisp_feature(rolled_scene[0], model)
        values = tdisp.map[:, :, 0][tdisp.valid]
        assert(np.ptp(values) < 1e-5)
        assert(math.isclose(tdisp.meta['delta'], model.delta))

import logging

import numpy as np
import pytest

from pyroadfuse import utils


class TestConfigureLogging():
    @pytest.mark.parametrize('level,expected', [('debug', logging.DEBUG), ('INFO', logging.INFO),
                                                ('error', logging.ERROR)])
    def test_levels(self, level, expected):
        logger = utils.configure_logging(level)
        assert(logger.level == expected)
        assert(len(logger.handlers) == 1)

    def test_environment(self, monkeypatch):
        monkeypatch.setenv('GS_LOG', 'debug')
        assert(utils.configure_logging().level == logging.DEBUG)
        monkeypatch.delenv('GS_LOG')
        assert(utils.configure_logging().level == logging.ERROR)

    def test_bad_level(self):
        with pytest.raises(ValueError):
            utils.configure_logging('verbose')


class TestPixelGrid():
    def test_orientation(self):
        u, v = utils.pixel_grid(2, 3)
        assert(u.shape == (2, 3) and u.dtype == np.float64)
        assert(np.array_equal(u[1], [0., 1., 2.]))
        assert(np.array_equal(v[:, 2], [0., 1.]))


class TestSpawnRngs():
    def test_deterministic(self):
        first = [rng.random() for rng in utils.spawn_rngs(5, 3)]
        second = [rng.random() for rng in utils.spawn_rngs(5, 3)]
        assert(first == second)
        assert(len(set(first)) == 3)

    def test_prefix_stable(self):
        short = [rng.random() for rng in utils.spawn_rngs(5, 2)]
        long = [rng.random() for rng in utils.spawn_rngs(5, 4)]
        assert(short == long[:2])


class TestMinmaxNormalize():
    def test_range(self):
        x = utils.minmax_normalize([[2., 4.], [3., 6.]])
        assert(x.min() == 0. and x.max() == 1.)
        assert(x[1, 0] == 0.25)

    def test_constant(self):
        assert(np.all(utils.minmax_normalize(np.full((3, 3), 7.)) == 0.))


class TestNumericGrad():
    def test_quadratic(self):
        x = np.array([[1., -2.], [0.5, 3.]])
        grad = utils.numeric_grad(lambda: np.sum(x ** 2), x)
        assert(np.allclose(grad, 2. * x, atol=1e-8))
        assert(np.array_equal(x, [[1., -2.], [0.5, 3.]]))

    def test_rel_error(self):
        assert(utils.rel_error([1., 2.], [1., 2.]) == 0.)
        assert(abs(utils.rel_error([1.], [1.1]) - 0.1 / 2.1) < 1e-12)
        assert(utils.rel_error([1e-9], [0.]) < 1e-4)
        assert(utils.rel_error([], []) == 0.)

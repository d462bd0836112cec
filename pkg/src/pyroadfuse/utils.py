# -*- coding: utf-8 -*-
"""
Utilities shared by the disparity, feature and network modules.
"""
import logging
import os

import numpy as np

LOG_LEVELS = {'error': logging.ERROR, 'info': logging.INFO, 'debug': logging.DEBUG}


def configure_logging(level=None):
    """
    Installs a single stderr handler on the package logger.

    Parameters
    ----------
    level : string or None, optional
        One of 'error', 'info' or 'debug'.  If None, the value of the GS_LOG
        environment variable is used, falling back to 'error'.

    Returns
    -------
    logger : logging.Logger
        The configured ``pyroadfuse`` logger.
    """
    if level is None:
        level = os.environ.get('GS_LOG', 'error')
    level = level.lower()
    if level not in LOG_LEVELS:
        raise ValueError('Did not understand log level %s, expected one of %s' % (level, sorted(LOG_LEVELS)))
    logger = logging.getLogger('pyroadfuse')
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter('%(levelname)s %(name)s: %(message)s'))
    logger.addHandler(handler)
    logger.setLevel(LOG_LEVELS[level])
    logger.propagate = False
    return logger


def pixel_grid(height, width):
    """
    Builds the column and row coordinate grids of an image.

    Parameters
    ----------
    height : int
        Number of image rows.
    width : int
        Number of image columns.

    Returns
    -------
    u : numpy array, shape (height, width)
        Column index of every pixel, as 64-bit reals.
    v : numpy array, shape (height, width)
        Row index of every pixel, as 64-bit reals.
    """
    v, u = np.mgrid[0:height, 0:width].astype(np.float64)
    return u, v


def spawn_rngs(seed, n):
    """
    Derives n independent random generators from one seed, one per scene or
    per run, so that results do not depend on the order of evaluation.
    """
    children = np.random.SeedSequence(seed).spawn(n)
    return [np.random.default_rng(child) for child in children]


def minmax_normalize(x):
    """
    Affinely rescales an array to [0, 1].  A constant array maps to zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    lo, hi = np.min(x), np.max(x)
    if hi - lo <= 0.:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def numeric_grad(fxn, x, h=1e-5):
    """
    Central finite-difference gradient of a scalar function.

    Parameters
    ----------
    fxn : callable
        Function of no arguments returning a scalar.  It must read the current
        contents of x.
    x : numpy array
        Array that is perturbed in place, one entry at a time, and restored.
    h : scalar, optional
        Step size.

    Returns
    -------
    grad : numpy array, same shape as x
        Estimate of d fxn / d x.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=['multi_index'], op_flags=['readwrite'])
    while not it.finished:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        f_pos = float(fxn())
        x[idx] = old - h
        f_neg = float(fxn())
        x[idx] = old
        grad[idx] = (f_pos - f_neg) / (2. * h)
        it.iternext()
    return grad


def rel_error(a, b, eps=1e-4):
    """
    Maximum elementwise relative error, |a - b| / max(eps, |a| + |b|).

    Entries with magnitude below eps are compared in absolute terms.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.
    return float(np.max(np.abs(a - b) / np.maximum(eps, np.abs(a) + np.abs(b))))

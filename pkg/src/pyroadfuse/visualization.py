# -*- coding: utf-8 -*-
"""
Some convenient visualisation routines.
"""
import matplotlib.pyplot as plt
import numpy as np

from .dfm import mean_activation_map
from .metrics import CLASS_NAMES


def pr_curve_plot(curves, plot_kwargs=None, show=True):
    """
    Plots precision against recall for one or more classes.

    Parameters
    ----------
    curves : dict of int to PrCurve
        Curves keyed by class.
    plot_kwargs : dict, optional
        Optional arguments passed to every line, e.g. linewidth.
    show : boolean, optional
        If true, calls plt.show()

    Returns
    -------
    fig : pyplot figure object
        Figure object where everything is plotted on.
    """
    if plot_kwargs is None:
        plot_kwargs = {}
    fig = plt.figure(figsize=(6, 6))
    for cls in sorted(curves):
        curve = curves[cls]
        label = '%s (AP %.3f)' % (CLASS_NAMES.get(cls, cls), curve.ap)
        plt.plot(curve.recall, curve.precision, label=label, **plot_kwargs)
    plt.xlim(0., 1.)
    plt.ylim(0., 1.05)
    plt.xlabel('recall')
    plt.ylabel('precision')
    plt.title('Precision-recall curves')
    plt.legend(loc='lower left')
    if show:
        plt.show()
    return fig


def v_disparity_plot(vmap, line=None, imshow_kwargs=None, show=True):
    """
    Shows a v-disparity histogram, optionally with the fitted road line
    d = m * v + c overlaid.

    Parameters
    ----------
    vmap : VDisparityMap
    line : tuple of float, optional
        (m, c) of the road line.
    imshow_kwargs : dict, optional
    show : boolean, optional
        If true, calls plt.show()

    Returns
    -------
    fig : pyplot figure object
    """
    if imshow_kwargs is None:
        imshow_kwargs = {'cmap': 'magma'}
    fig = plt.figure(figsize=(5, 6))
    plt.imshow(np.log1p(vmap.counts), aspect='auto', origin='upper', **imshow_kwargs)
    if line is not None:
        m, c = line
        v = np.arange(vmap.rows)
        plt.plot(m * v + c, v, 'c-', linewidth=1)
        plt.xlim(0, vmap.bins - 1)
        plt.ylim(vmap.rows - 1, 0)
    plt.xlabel('disparity bin')
    plt.ylabel('v')
    plt.title('v-disparity')
    if show:
        plt.show()
    return fig


def activation_map_plot(activations, imshow_kwargs=None, show=True):
    """
    Side by side mean activation maps of encoder features.

    Parameters
    ----------
    activations : dict of string to array, shape (H, W, C)
        e.g. the output of ``fusionnet.encoder_activations``.
    imshow_kwargs : dict, optional
    show : boolean, optional
        If true, calls plt.show()

    Returns
    -------
    fig : pyplot figure object
    """
    if imshow_kwargs is None:
        imshow_kwargs = {'cmap': 'jet', 'vmin': 0., 'vmax': 1.}
    names = list(activations)
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3), squeeze=False)
    for ax, name in zip(axes[0], names):
        ax.imshow(mean_activation_map(activations[name])[:, :, 0], **imshow_kwargs)
        ax.set_title(name)
        ax.axis('off')
    if show:
        plt.show()
    return fig


def feature_plot(feature, imshow_kwargs=None, show=True):
    """
    Shows a derived feature image; three-channel features are displayed as
    RGB after min-max scaling, one-channel features with a colormap.

    Parameters
    ----------
    feature : DerivedFeature
    imshow_kwargs : dict, optional
    show : boolean, optional
        If true, calls plt.show()

    Returns
    -------
    fig : pyplot figure object
    """
    if imshow_kwargs is None:
        imshow_kwargs = {}
    fmap = feature.map
    fig = plt.figure(figsize=(6, 4))
    if fmap.shape[2] == 3:
        lo, hi = fmap[feature.valid].min(initial=0.), fmap[feature.valid].max(initial=1.)
        img = np.clip((fmap - lo) / (hi - lo if hi > lo else 1.), 0., 1.)
        plt.imshow(np.where(feature.valid[:, :, np.newaxis], img, 0.), **imshow_kwargs)
    else:
        masked = np.ma.masked_where(~feature.valid, fmap[:, :, 0])
        plt.imshow(masked, **dict({'cmap': 'viridis'}, **imshow_kwargs))
        plt.colorbar()
    plt.title(feature.kind)
    plt.axis('off')
    if show:
        plt.show()
    return fig

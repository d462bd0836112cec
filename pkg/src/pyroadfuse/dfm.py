# -*- coding: utf-8 -*-
"""
Dynamic fusion of two feature maps.

The kernels applied to the RGB feature F_r are generated from the feature to
fuse, F_t, so they depend on its content and differ per pixel.  The naive
form generates a full K x K x C x C' kernel at every pixel.  The factorized
form splits it into

    stage 1: a channel-wise, spatially variant K x K convolution whose kernels
             W1 = conv_omega1(F_t) come from a 3 x 3 convolution of F_t, and
    stage 2: a 1 x 1 cross-channel mixing W2 = FC_omega2(avgpool(F_t)), shared
             by all pixels,

and the fusion output adds F_r back: F_r + stage2(stage1(F_r, F_t)).

Kernel layouts: W1 has shape (H, W, K * K * C) with the offset index major and
the channel innermost; offsets run row-major over the K x K window.  The
naive kernel has shape (H, W, K * K * C * C') ordered (offset, c, c').  W2 is
the C' x C matrix stored row-major in the FC output.
"""
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .utils import minmax_normalize
from .utils import numeric_grad
from .utils import rel_error

logger = logging.getLogger(__name__)

GENERATOR_SIZE = 3
DEFAULT_K = 3
PARAM_GROUPS = ('f_r', 'f_t', 'omega1', 'omega2')


@dataclass
class DfmParams:
    """
    Learnable parameters of a factorized dynamic fusion.

    Parameters
    ----------
    omega1_w : Tensor, shape (3, 3, C, K * K * C)
        Kernel-generating convolution.
    omega1_b : Tensor, shape (K * K * C,)
    omega2_w : Tensor, shape (C' * C, C)
        Fully connected kernel generator.
    omega2_b : Tensor, shape (C' * C,)
    k : int
        Spatial size K of the dynamic kernels (odd).
    c_in, c_out : int
        Channels C of the inputs and C' of the output.
    """
    omega1_w: tc.Tensor
    omega1_b: tc.Tensor
    omega2_w: tc.Tensor
    omega2_b: tc.Tensor
    k: int
    c_in: int
    c_out: int

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError('Dynamic kernel size must be odd and positive, got %d' % self.k)
        kk = self.k * self.k
        expected = {
            'omega1_w': (GENERATOR_SIZE, GENERATOR_SIZE, self.c_in, kk * self.c_in),
            'omega1_b': (kk * self.c_in,),
            'omega2_w': (self.c_out * self.c_in, self.c_in),
            'omega2_b': (self.c_out * self.c_in,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise tc.ShapeError('%s has shape %s, expected %s' % (name, getattr(self, name).shape, shape))

    def tensors(self):
        return [self.omega1_w, self.omega1_b, self.omega2_w, self.omega2_b]


@dataclass
class NaiveParams:
    """
    Generator of the naive dynamic kernel: a 3 x 3 convolution from C to
    K * K * C * C' channels.
    """
    omega_w: tc.Tensor
    omega_b: tc.Tensor
    k: int
    c_in: int
    c_out: int


def _param(data, name):
    return tc.Tensor(data, requires_grad=True, name=name)


def identity_params(c, k=DEFAULT_K, c_out=None):
    """
    Parameters for which stage 2 of stage 1 reproduces F_r: zero weights, a
    one-hot centre tap per channel in the omega1 bias and the flattened
    identity matrix in the omega2 bias.  The residual fusion then returns
    2 * F_r.
    """
    c_out = c if c_out is None else c_out
    kk = k * k
    b1 = np.zeros(kk * c)
    centre = (kk - 1) // 2
    b1[centre * c:(centre + 1) * c] = 1.
    return DfmParams(omega1_w=_param(np.zeros((GENERATOR_SIZE, GENERATOR_SIZE, c, kk * c)), 'omega1_w'),
                     omega1_b=_param(b1, 'omega1_b'),
                     omega2_w=_param(np.zeros((c_out * c, c)), 'omega2_w'),
                     omega2_b=_param(np.eye(c_out, c).ravel(), 'omega2_b'),
                     k=k, c_in=c, c_out=c_out)


def zero_params(c, k=DEFAULT_K, c_out=None):
    """Parameters whose stage outputs vanish; the residual fusion returns F_r."""
    c_out = c if c_out is None else c_out
    kk = k * k
    return DfmParams(omega1_w=_param(np.zeros((GENERATOR_SIZE, GENERATOR_SIZE, c, kk * c)), 'omega1_w'),
                     omega1_b=_param(np.zeros(kk * c), 'omega1_b'),
                     omega2_w=_param(np.zeros((c_out * c, c)), 'omega2_w'),
                     omega2_b=_param(np.zeros(c_out * c), 'omega2_b'),
                     k=k, c_in=c, c_out=c_out)


def random_params(rng, c, k=DEFAULT_K, c_out=None, scale=0.5):
    """Gaussian parameters with standard deviation ``scale``."""
    c_out = c if c_out is None else c_out
    kk = k * k
    return DfmParams(omega1_w=_param(rng.normal(0., scale, (GENERATOR_SIZE, GENERATOR_SIZE, c, kk * c)), 'omega1_w'),
                     omega1_b=_param(rng.normal(0., scale, kk * c), 'omega1_b'),
                     omega2_w=_param(rng.normal(0., scale, (c_out * c, c)), 'omega2_w'),
                     omega2_b=_param(rng.normal(0., scale, c_out * c), 'omega2_b'),
                     k=k, c_in=c, c_out=c_out)


def _check_pair(f_r, f_t, c_in):
    if f_r.data.ndim != 3 or f_r.shape != f_t.shape:
        raise tc.ShapeError('F_r %s and F_t %s must be equal (H, W, C) tensors' % (f_r.shape, f_t.shape))
    if f_r.shape[2] != c_in:
        raise tc.ShapeError('Features have %d channels, parameters expect %d' % (f_r.shape[2], c_in))


def _window_offsets(k):
    offsets = [(di, dj) for di in range(k) for dj in range(k)]
    return [(o, di, dj) for o, (di, dj) in enumerate(offsets)], k // 2


def channelwise_dynamic_conv(f_r, w1, k):
    """
    Spatially variant channel-wise convolution.

    F'(p, c) = sum over window offsets o of W1(p)[o, c] * F_r(p + o, c), with
    zero padding.

    Parameters
    ----------
    f_r : Tensor, shape (H, W, C)
    w1 : Tensor, shape (H, W, K * K * C)
    k : int

    Returns
    -------
    f : Tensor, shape (H, W, C)
    """
    h, w, c = f_r.shape
    if w1.shape != (h, w, k * k * c):
        raise tc.ShapeError('Dynamic kernel %s does not match features %s with K=%d' % (w1.shape, f_r.shape, k))
    offsets, r = _window_offsets(k)
    frp = np.pad(f_r.data, ((r, r), (r, r), (0, 0)))
    kern = w1.data.reshape(h, w, k * k, c)
    out = np.zeros((h, w, c))
    for o, di, dj in offsets:
        out += kern[:, :, o] * frp[di:di + h, dj:dj + w]

    def backward(g):
        dfrp = np.zeros_like(frp)
        dkern = np.zeros_like(kern)
        for o, di, dj in offsets:
            dkern[:, :, o] = g * frp[di:di + h, dj:dj + w]
            dfrp[di:di + h, dj:dj + w] += g * kern[:, :, o]
        return dfrp[r:r + h, r:r + w], dkern.reshape(w1.shape)

    return tc.custom_op(out, (f_r, w1), backward)


def cross_channel(f, w2):
    """
    Pixelwise matrix product F(p) = W2 . F'(p) with a C' x C matrix shared
    by all pixels.
    """
    if f.data.ndim != 3 or w2.data.ndim != 2 or w2.shape[1] != f.shape[2]:
        raise tc.ShapeError('Cannot mix %s features with a %s matrix' % (f.shape, w2.shape))
    out = f.data @ w2.data.T

    def backward(g):
        return g @ w2.data, np.tensordot(g, f.data, axes=([0, 1], [0, 1]))

    return tc.custom_op(out, (f, w2), backward)


def dynamic_cross_channel_conv(f_r, kernel, k, c_out):
    """
    Spatially variant cross-channel convolution with a full per-pixel kernel.

    F(p, c') = sum over offsets o and channels c of W(p)[o, c, c'] * F_r(p + o, c).

    Parameters
    ----------
    f_r : Tensor, shape (H, W, C)
    kernel : Tensor, shape (H, W, K * K * C * C')
    """
    h, w, c = f_r.shape
    if kernel.shape != (h, w, k * k * c * c_out):
        raise tc.ShapeError('Naive kernel %s does not match features %s with K=%d, C\'=%d'
                            % (kernel.shape, f_r.shape, k, c_out))
    offsets, r = _window_offsets(k)
    frp = np.pad(f_r.data, ((r, r), (r, r), (0, 0)))
    kern = kernel.data.reshape(h, w, k * k, c, c_out)
    out = np.zeros((h, w, c_out))
    for o, di, dj in offsets:
        out += np.einsum('hwc,hwcd->hwd', frp[di:di + h, dj:dj + w], kern[:, :, o])

    def backward(g):
        dfrp = np.zeros_like(frp)
        dkern = np.zeros_like(kern)
        for o, di, dj in offsets:
            dkern[:, :, o] = np.einsum('hwc,hwd->hwcd', frp[di:di + h, dj:dj + w], g)
            dfrp[di:di + h, dj:dj + w] += np.einsum('hwcd,hwd->hwc', kern[:, :, o], g)
        return dfrp[r:r + h, r:r + w], dkern.reshape(kernel.shape)

    return tc.custom_op(out, (f_r, kernel), backward)


def dfm_naive_forward(f_r, f_t, params):
    """
    Naive dynamic fusion: generates the full per-pixel K x K x C x C' kernel
    from F_t and applies it to F_r.

    Parameters
    ----------
    f_r, f_t : Tensor, shape (H, W, C)
    params : NaiveParams

    Returns
    -------
    f : Tensor, shape (H, W, C')
    """
    _check_pair(f_r, f_t, params.c_in)
    kernel = tc.conv2d(f_t, params.omega_w, params.omega_b, padding='same')
    return dynamic_cross_channel_conv(f_r, kernel, params.k, params.c_out)


def dfm_stage1(f_r, f_t, params):
    """
    Channel-wise stage: W1 = conv_omega1(F_t), then the spatially variant
    channel-wise convolution of F_r with W1.

    Returns
    -------
    f_f_prime : Tensor, shape (H, W, C)
    w1 : Tensor, shape (H, W, K * K * C)
    """
    _check_pair(f_r, f_t, params.c_in)
    w1 = tc.conv2d(f_t, params.omega1_w, params.omega1_b, padding='same')
    return channelwise_dynamic_conv(f_r, w1, params.k), w1


def dfm_stage2(f_f_prime, f_t, params):
    """
    Cross-channel stage: W2 = FC_omega2(avgpool(F_t)) reshaped to C' x C,
    applied as a 1 x 1 convolution to F'.

    Returns
    -------
    f_f : Tensor, shape (H, W, C')
    w2 : Tensor, shape (C', C)
    """
    if f_f_prime.shape[:2] != f_t.shape[:2] or f_t.shape[2] != params.c_in:
        raise tc.ShapeError('Stage-2 inputs %s and %s are inconsistent' % (f_f_prime.shape, f_t.shape))
    pooled = tc.reshape(tc.avg_pool_global(f_t), (params.c_in,))
    w2 = tc.reshape(tc.fully_connected(pooled, params.omega2_w, params.omega2_b), (params.c_out, params.c_in))
    return cross_channel(f_f_prime, w2), w2


def dfm_forward(f_r, f_t, params, residual=True):
    """
    Factorized dynamic fusion, F_r + stage2(stage1(F_r, F_t)).

    Raises
    ------
    ShapeError
        If the residual is requested while C' differs from C.
    """
    if residual and params.c_out != params.c_in:
        raise tc.ShapeError('Residual fusion needs C\' == C, got C=%d, C\'=%d' % (params.c_in, params.c_out))
    f_prime, _ = dfm_stage1(f_r, f_t, params)
    f_f, _ = dfm_stage2(f_prime, f_t, params)
    return tc.add(f_r, f_f) if residual else f_f


def naive_params_from_factorized(params, f_t):
    """
    Naive generator reproducing the factorized result for a fixed F_t.

    W2 depends on F_t only through its global mean, so for a fixed F_t the
    per-pixel kernel W(p)[o, c, c'] = W1(p)[o, c] * W2[c', c] is again a
    linear 3 x 3 convolution of F_t.
    """
    ft = tc.Tensor(getattr(f_t, 'data', f_t))
    pooled = tc.reshape(tc.avg_pool_global(ft), (params.c_in,))
    w2 = tc.fully_connected(pooled, params.omega2_w, params.omega2_b).data.reshape(params.c_out, params.c_in)
    kk = params.k * params.k
    c, c_out = params.c_in, params.c_out
    w1 = params.omega1_w.data.reshape(GENERATOR_SIZE, GENERATOR_SIZE, c, kk, c)
    b1 = params.omega1_b.data.reshape(kk, c)
    omega_w = np.einsum('abioc,dc->abiocd', w1, w2).reshape(GENERATOR_SIZE, GENERATOR_SIZE, c, kk * c * c_out)
    omega_b = np.einsum('oc,dc->ocd', b1, w2).reshape(kk * c * c_out)
    return NaiveParams(omega_w=tc.Tensor(omega_w), omega_b=tc.Tensor(omega_b), k=params.k, c_in=c, c_out=c_out)


class DynamicFusion(object):
    """
    Residual dynamic fusion layer.

    Parameters
    ----------
    params : DfmParams
        Layer parameters; updated in place by an optimizer.
    residual : boolean, optional
        Whether F_r is added to the fused output.

    Examples
    --------
    >>> layer = DynamicFusion(identity_params(2))
    >>> f_r = np.arange(8.).reshape(2, 2, 2)
    >>> out = layer.forward(f_r, np.ones((2, 2, 2)))
    >>> bool(np.allclose(out, 2 * f_r))
    True
    """

    def __init__(self, params, residual=True):
        self.params = params
        self.residual = residual
        self._tape = None

    def forward(self, f_r, f_t):
        """
        Fuses two (H, W, C) arrays and records the computation for backward.

        Returns
        -------
        out : numpy array, shape (H, W, C')
        """
        self._f_r = tc.Tensor(f_r, requires_grad=True, name='f_r')
        self._f_t = tc.Tensor(f_t, requires_grad=True, name='f_t')
        with tc.Tape() as tape:
            self._out = dfm_forward(self._f_r, self._f_t, self.params, residual=self.residual)
        self._tape = tape
        return self._out.data.copy()

    def backward(self, upstream):
        """
        Gradients of the last forward pass.

        Parameters
        ----------
        upstream : array-like, shape of the output
            d loss / d output.

        Returns
        -------
        grads : dict
            Gradients keyed 'f_r', 'f_t', 'omega1_w', 'omega1_b', 'omega2_w'
            and 'omega2_b'.
        """
        if self._tape is None:
            raise tc.GradientError('DynamicFusion.backward called before forward')
        tensors = {'f_r': self._f_r, 'f_t': self._f_t, 'omega1_w': self.params.omega1_w,
                   'omega1_b': self.params.omega1_b, 'omega2_w': self.params.omega2_w,
                   'omega2_b': self.params.omega2_b}
        for t in tensors.values():
            t.zero_grad()
        self._tape.backward(self._out, upstream)
        return {name: t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
                for name, t in tensors.items()}


def dfm_backward(layer, upstream):
    """Gradients of ``layer``'s last forward pass; see ``DynamicFusion.backward``."""
    return layer.backward(upstream)


def mean_activation_map(f):
    """
    Per-pixel mean over channels, min-max normalized to [0, 1].  A constant
    map gives all zeros.

    Returns
    -------
    m : numpy array, shape (H, W, 1)
    """
    data = np.asarray(getattr(f, 'data', f), dtype=np.float64)
    if data.ndim != 3 or data.shape[2] < 1:
        raise tc.ShapeError('Expected an (H, W, C) feature with C >= 1, got %s' % (data.shape,))
    return minmax_normalize(data.mean(axis=2))[:, :, np.newaxis]


def cost_model(h, w, c, c_out, k, variant, include_generation=False):
    """
    Multiply-accumulate count of a dynamic fusion.

    Application: naive H W K^2 C C'; factorized H W K^2 C + H W C C'.  With
    ``include_generation`` the 3 x 3 kernel-generating convolution (and, for
    the factorized form, the fully connected layer) is added.

    Parameters
    ----------
    h, w, c, c_out, k : int
        Feature size, channels, output channels and kernel size.
    variant : {'naive', 'factorized'}

    Returns
    -------
    macs : int
    """
    for name, value in (('h', h), ('w', w), ('c', c), ('c_out', c_out), ('k', k)):
        if int(value) <= 0:
            raise ValueError('%s must be positive, got %r' % (name, value))
    g2 = GENERATOR_SIZE * GENERATOR_SIZE
    if variant == 'naive':
        macs = h * w * k * k * c * c_out
        if include_generation:
            macs += h * w * g2 * c * (k * k * c * c_out)
    elif variant == 'factorized':
        macs = h * w * k * k * c + h * w * c * c_out
        if include_generation:
            macs += h * w * g2 * c * (k * k * c) + (c * c_out) * c
    else:
        raise ValueError('Did not understand variant %r, expected naive or factorized' % variant)
    return int(macs)


def bench_cost(h, w, c, c_out, k, include_generation=False, seed=0, repeats=1):
    """
    MAC counts of both variants plus their measured runtime on random inputs.

    Returns
    -------
    rows : list of dict
        One row per variant with keys 'variant', 'macs' and 'runtime_ms'.
    ratio : float
        Factorized over naive MACs.
    """
    rng = np.random.default_rng(seed)
    f_r = tc.Tensor(rng.normal(size=(h, w, c)))
    f_t = tc.Tensor(rng.normal(size=(h, w, c)))
    params = random_params(rng, c, k=k, c_out=c_out)
    naive = naive_params_from_factorized(params, f_t)
    runs = {
        'naive': lambda: dfm_naive_forward(f_r, f_t, naive),
        'factorized': lambda: dfm_forward(f_r, f_t, params, residual=False),
    }
    rows = []
    for variant in ('naive', 'factorized'):
        start = time.perf_counter()
        for _ in range(repeats):
            runs[variant]()
        runtime = (time.perf_counter() - start) * 1000. / repeats
        rows.append({'variant': variant, 'macs': cost_model(h, w, c, c_out, k, variant, include_generation),
                     'runtime_ms': runtime})
        logger.debug('%s fusion: %d MACs, %.3f ms', variant, rows[-1]['macs'], runtime)
    return rows, rows[1]['macs'] / float(rows[0]['macs'])


def gradcheck(seed, h=4, w=4, c=2, k=3, step=1e-5):
    """
    Compares the analytic gradients of the residual fusion with central
    finite differences on random inputs and parameters.

    The scalar checked is sum(R * out) for a random R.

    Returns
    -------
    errors : dict
        Maximum relative error per parameter group 'f_r', 'f_t', 'omega1' and
        'omega2'.
    """
    rng = np.random.default_rng(seed)
    f_r = rng.normal(size=(h, w, c))
    f_t = rng.normal(size=(h, w, c))
    params = random_params(rng, c, k=k)
    weights = rng.normal(size=(h, w, c))

    layer = DynamicFusion(params)
    layer.forward(f_r, f_t)
    grads = layer.backward(weights)

    def loss():
        out = dfm_forward(tc.Tensor(f_r), tc.Tensor(f_t), params)
        return np.sum(out.data * weights)

    numeric = {'f_r': numeric_grad(loss, f_r, step), 'f_t': numeric_grad(loss, f_t, step)}
    for name in ('omega1_w', 'omega1_b', 'omega2_w', 'omega2_b'):
        numeric[name] = numeric_grad(loss, getattr(params, name).data, step)
    errors = {
        'f_r': rel_error(grads['f_r'], numeric['f_r']),
        'f_t': rel_error(grads['f_t'], numeric['f_t']),
        'omega1': max(rel_error(grads['omega1_w'], numeric['omega1_w']),
                      rel_error(grads['omega1_b'], numeric['omega1_b'])),
        'omega2': max(rel_error(grads['omega2_w'], numeric['omega2_w']),
                      rel_error(grads['omega2_b'], numeric['omega2_b'])),
    }
    logger.info('gradcheck seed=%d: %s', seed, errors)
    return errors

# -*- coding: utf-8 -*-
"""
A small dense-tensor substrate with recording-based reverse-mode gradients.

Tensors hold 64-bit arrays laid out H x W x C (channel innermost).  Ops
executed inside an active ``Tape`` record a backward closure; ``backward``
replays the tape in reverse and accumulates gradients into the ``grad`` of
every leaf tensor created with ``requires_grad=True``.

Examples
--------
>>> x = Tensor(np.ones((2, 2, 1)), requires_grad=True)
>>> w = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
>>> with Tape() as tape:
...     y = conv2d(x, w)
>>> tape.backward(y, np.ones((2, 2, 1)))
>>> float(w.grad.sum())
4.0
"""
import threading

import numpy as np

DEBUG = False

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


class GradientError(RuntimeError):
    """Raised when backward is requested for something that was not recorded."""


class NonFiniteError(ValueError):
    """Raised in debug mode when an op produces NaN or Inf."""


class Tensor(object):
    """
    Dense 64-bit tensor.

    Parameters
    ----------
    data : array-like
        Values; copied and converted to float64.
    requires_grad : boolean, optional
        If True, backward accumulates into ``grad``.
    name : string, optional
        Label used in error messages and parameter listings.
    """

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        if self.data.ndim > 4:
            raise ShapeError('Tensors have rank at most 4, got %d' % self.data.ndim)
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self._tape = None

    @classmethod
    def _wrap(cls, data):
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.name = None
        out.grad = None
        out._tape = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._tape is None

    def zero_grad(self):
        self.grad = None

    def check_finite(self):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError('Tensor %s holds NaN or Inf values' % (self.name or self.shape,))
        return self

    def __repr__(self):
        return 'Tensor(shape=%s, name=%r, requires_grad=%s)' % (self.shape, self.name, self.requires_grad)


def _tape_stack():
    if not hasattr(_state, 'stack'):
        _state.stack = []
    return _state.stack


class Tape(object):
    """
    Records the backward closures of the ops run while it is active.

    A tape is single-threaded: it records the ops executed by the thread that
    entered it.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def record(self, out, inputs, backward):
        self.records.append((out, inputs, backward))

    def backward(self, output, grad=None):
        """
        Reverse-mode pass from ``output``.

        Parameters
        ----------
        output : Tensor
            Tensor produced by an op recorded on this tape.
        grad : array-like, optional
            Upstream gradient d loss / d output; defaults to ones.

        Raises
        ------
        GradientError
            If nothing was recorded, or ``output`` was not produced on this
            tape.
        """
        if not self.records:
            raise GradientError('backward called before any recorded forward pass')
        if output._tape is not self:
            raise GradientError('Output %r was not produced on this tape' % (output,))
        grad = np.ones_like(output.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != output.shape:
            raise ShapeError('Upstream gradient %s does not match output %s' % (grad.shape, output.shape))
        pending = {id(output): grad}
        for out, inputs, backward in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    t.grad = gi.copy() if t.grad is None else t.grad + gi
                else:
                    pending[id(t)] = gi if id(t) not in pending else pending[id(t)] + gi


def current_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def backward(output, grad=None):
    """
    Runs the reverse pass of the tape that produced ``output``.
    """
    if output._tape is None:
        raise GradientError('backward before forward: %r was not produced by a recorded op' % (output,))
    output._tape.backward(output, grad)


def custom_op(data, inputs, backward):
    """
    Wraps the result of a forward computation and records its backward
    closure on the active tape.

    Parameters
    ----------
    data : numpy array
        Forward result.
    inputs : sequence of Tensor
        Operands the result depends on.
    backward : callable
        Maps the upstream gradient to a sequence of gradients, one per input
        (None for inputs without one).

    Returns
    -------
    out : Tensor
    """
    out = Tensor._wrap(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.record(out, tuple(inputs), backward)
    if DEBUG:
        out.check_finite()
    return out


def _same_padding(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x, w, b=None, stride=1, padding='same'):
    """
    2-D cross-correlation of an H x W x Cin tensor with a Kh x Kw x Cin x Cout
    kernel.

    Parameters
    ----------
    x : Tensor
        Input, shape (H, W, Cin).
    w : Tensor
        Kernel, shape (Kh, Kw, Cin, Cout).
    b : Tensor, optional
        Bias, shape (Cout,).
    stride : int, optional
        Step between output samples along both axes.
    padding : {'same', 'valid'}, optional
        'same' zero-pads so that the output has ceil(H / stride) rows (and
        likewise for columns); 'valid' does not pad.

    Returns
    -------
    y : Tensor, shape (Ho, Wo, Cout)
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError('conv2d expects an (H, W, C) input and a (Kh, Kw, Cin, Cout) kernel, got %s and %s'
                         % (x.shape, w.shape))
    h, wd, cin = x.shape
    kh, kw, kcin, cout = w.shape
    if kcin != cin:
        raise ShapeError('Kernel expects %d input channels, input has %d' % (kcin, cin))
    if b is not None and b.shape != (cout,):
        raise ShapeError('Bias shape %s does not match %d output channels' % (b.shape, cout))
    if padding == 'same':
        ho, top, bottom = _same_padding(h, kh, stride)
        wo, left, right = _same_padding(wd, kw, stride)
    elif padding == 'valid':
        if h < kh or wd < kw:
            raise ShapeError('Input %s is smaller than the kernel %s' % (x.shape[:2], w.shape[:2]))
        ho, top, bottom = (h - kh) // stride + 1, 0, 0
        wo, left, right = (wd - kw) // stride + 1, 0, 0
    else:
        raise ValueError('Did not understand padding %r, expected same or valid' % padding)
    xp = np.pad(x.data, ((top, bottom), (left, right), (0, 0)))
    rows = (ho - 1) * stride + 1
    cols = (wo - 1) * stride + 1

    y = np.zeros((ho, wo, cout))
    for i in range(kh):
        for j in range(kw):
            y += xp[i:i + rows:stride, j:j + cols:stride] @ w.data[i, j]
    if b is not None:
        y += b.data

    def backward(g):
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w.data)
        for i in range(kh):
            for j in range(kw):
                patch = xp[i:i + rows:stride, j:j + cols:stride]
                dw[i, j] = np.tensordot(patch, g, axes=([0, 1], [0, 1]))
                dxp[i:i + rows:stride, j:j + cols:stride] += g @ w.data[i, j].T
        dx = dxp[top:top + h, left:left + wd]
        db = g.sum(axis=(0, 1)) if b is not None else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return custom_op(y, inputs, lambda g: backward(g)[:len(inputs)])


def avg_pool_global(x):
    """
    Per-channel mean of an (H, W, C) tensor, shape (1, 1, C).
    """
    if x.data.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError('avg_pool_global expects a non-empty (H, W, C) tensor, got %s' % (x.shape,))
    h, w, _ = x.shape
    y = x.data.mean(axis=(0, 1), keepdims=True)
    return custom_op(y, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))


def fully_connected(x, w, b=None):
    """
    y = W x + b for a vector x of length n and an m x n matrix W.
    """
    if x.data.ndim != 1 or w.data.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeError('fully_connected expects x (n,) and W (m, n), got %s and %s' % (x.shape, w.shape))
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError('Bias shape %s does not match %d outputs' % (b.shape, w.shape[0]))
    y = w.data @ x.data
    if b is not None:
        y = y + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        return (w.data.T @ g, np.outer(g, x.data), g.copy())[:len(inputs)]

    return custom_op(y, inputs, backward)


def reshape(x, shape):
    y = x.data.reshape(shape)
    return custom_op(y, (x,), lambda g: (g.reshape(x.shape),))


def relu(x):
    on = x.data > 0
    return custom_op(np.where(on, x.data, 0.), (x,), lambda g: (np.where(on, g, 0.),))


def add(a, b):
    """Elementwise sum of two tensors of the same shape."""
    if a.shape != b.shape:
        raise ShapeError('Cannot add tensors of shapes %s and %s' % (a.shape, b.shape))
    return custom_op(a.data + b.data, (a, b), lambda g: (g, g))


def scale(x, alpha):
    """Multiplication by a constant."""
    alpha = float(alpha)
    return custom_op(alpha * x.data, (x,), lambda g: (alpha * g,))


def concat(tensors, axis=-1):
    """Concatenation along an axis (the channel axis by default)."""
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as err:
        raise ShapeError('Cannot concatenate: %s' % err)
    splits = np.cumsum(sizes)[:-1]
    return custom_op(y, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def upsample_nearest(x, factor=2):
    """Nearest-neighbour upsampling of an (H, W, C) tensor by an integer factor."""
    h, w, c = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=0), factor, axis=1)
    return custom_op(y, (x,), lambda g: (g.reshape(h, factor, w, factor, c).sum(axis=(1, 3)),))


def softmax(logits):
    """Softmax over the last axis of an array, with max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_ce(logits, labels, ignore=0, class_weights=None):
    """
    Mean softmax cross-entropy of H x W x Cls logits against per-pixel labels.

    Pixels labeled ``ignore`` do not contribute.  With class weights w the
    loss is the weighted mean sum(w_y * l) / sum(w_y).

    Parameters
    ----------
    logits : Tensor or array-like, shape (H, W, Cls)
    labels : LabelImage or array of int, shape (H, W)
        Class index per pixel.
    ignore : int, optional
        Label excluded from the loss.
    class_weights : array-like, shape (Cls,), optional

    Returns
    -------
    loss : float
    grad : numpy array, shape (H, W, Cls)
        d loss / d logits.
    """
    z = np.asarray(getattr(logits, 'data', logits), dtype=np.float64)
    y = np.asarray(getattr(labels, 'classes', labels)).astype(np.int64)
    if z.ndim != 3 or z.shape[2] < 2:
        raise ShapeError('softmax_ce expects (H, W, Cls) logits with Cls >= 2, got %s' % (z.shape,))
    if y.shape != z.shape[:2]:
        raise ShapeError('Labels %s do not match logits %s' % (y.shape, z.shape))
    n_cls = z.shape[2]
    counted = y != ignore
    if not np.any(counted):
        raise ValueError('Every pixel carries the ignored label %d' % ignore)
    if np.any(y[counted] < 0) or np.any(y[counted] >= n_cls):
        raise ShapeError('Labels must lie in [0, %d)' % n_cls)
    weights = np.ones(n_cls) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    yc = np.where(counted, y, 0)
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    log_p = np.take_along_axis(shifted, yc[:, :, np.newaxis], axis=-1)[:, :, 0] - log_norm
    w = np.where(counted, weights[yc], 0.)
    total = w.sum()
    if total <= 0:
        raise ValueError('Class weights of the counted pixels sum to zero')
    loss = float(-(w * log_p).sum() / total)
    grad = softmax(z)
    grad[np.arange(z.shape[0])[:, None], np.arange(z.shape[1])[None, :], yc] -= 1.
    grad *= (w / total)[:, :, np.newaxis]
    return loss, grad


class SGD(object):
    """
    Stochastic gradient descent with momentum.

    v <- momentum * v + g, p <- p - lr * v.

    Parameters
    ----------
    params : list of Tensor
        Parameters to update in place.
    lr : float
        Learning rate.
    momentum : float, optional
        Momentum coefficient; 0 gives plain SGD.
    """

    def __init__(self, params, lr, momentum=0.9):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v

"""Dense tensors with a reverse-mode tape, plus the raw numpy kernels.

The kernels (``conv2d_forward``, ``conv2d_backward``, ``batchnorm_forward``,
``avgpool2d_forward`` ...) are pure functions over arrays. The ``Tensor``
wrappers below record closures so that ``Tensor.backward`` can sweep the
graph in reverse topological order.

All reductions are carried out in float64 and cast back to the storage
dtype of the inputs.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

_ACC = np.float64
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


@dataclass
class ConvParams:
    """Weight ``(D, C, Kh, Kw)``, bias ``(D,)``, stride and (ph, pw) zero padding."""

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=_ACC)
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be 4-d, got shape {self.weight.shape}")
        if self.bias is None:
            self.bias = np.zeros(self.weight.shape[0], dtype=_ACC)
        self.bias = np.asarray(self.bias, dtype=_ACC)
        if self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"conv bias shape {self.bias.shape} does not match weight shape {self.weight.shape}"
            )
        self.stride = int(self.stride)
        self.padding = _pair(self.padding)
        if self.stride < 1 or min(self.padding) < 0:
            raise ValueError(f"bad stride/padding {self.stride}/{self.padding}")

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def kernel_size(self):
        return self.weight.shape[2], self.weight.shape[3]

    def apply(self, x):
        return conv2d_forward(x, self.weight, self.bias, self.stride, self.padding)


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    calibrated: bool = True

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=_ACC))
        c = self.gamma.shape
        if not (self.beta.shape == self.running_mean.shape == self.running_var.shape == c):
            raise ValueError("batch norm parameter shapes differ")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    @property
    def num_channels(self):
        return self.gamma.shape[0]

    def scale_shift(self):
        """Per-channel ``(a, c)`` such that eval-mode BN is ``a * x + c``."""
        a = self.gamma / np.sqrt(self.running_var + self.eps)
        return a, self.beta - self.running_mean * a


# ---------------------------------------------------------------------------
# raw kernels
# ---------------------------------------------------------------------------


def conv_output_size(h, k, stride, pad):
    return (h + 2 * pad - k) // stride + 1


def _pad(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _check_conv(x, weight, stride, padding):
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d: input shape {tuple(x.shape)} incompatible with weight shape {tuple(weight.shape)}"
        )
    ph, pw = padding
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * ph < kh or x.shape[3] + 2 * pw < kw:
        raise ValueError(
            f"conv2d: padded input {tuple(x.shape)} (padding {padding}) smaller than kernel {tuple(weight.shape)}"
        )
    oh = conv_output_size(x.shape[2], kh, stride, ph)
    ow = conv_output_size(x.shape[3], kw, stride, pw)
    return oh, ow


def _nhwc_padded(x, ph, pw):
    n, c, h, w = x.shape
    xt = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=_ACC)
    xt[:, ph : ph + h, pw : pw + w, :] = x.transpose(0, 2, 3, 1)
    return xt


def _im2col(xt, kh, kw, stride, oh, ow):
    """``(N*oh*ow, kh*kw*C)`` patch matrix of a padded channels-last input."""
    n, c = xt.shape[0], xt.shape[3]
    cols = np.empty((n, oh, ow, kh, kw, c), dtype=_ACC)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
    return cols.reshape(n * oh * ow, kh * kw * c)


def conv2d_forward(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation ``out[n,d,y,x] = b[d] + sum F[d,c,i,j] * xpad[n,c,y*s+i,x*s+j]``."""
    padding = _pair(padding)
    oh, ow = _check_conv(x, weight, stride, padding)
    d, _, kh, kw = weight.shape
    cols = _im2col(_nhwc_padded(x, *padding), kh, kw, stride, oh, ow)
    out = cols @ np.asarray(weight, dtype=_ACC).transpose(0, 2, 3, 1).reshape(d, -1).T
    if bias is not None:
        out += np.asarray(bias, dtype=_ACC)
    return np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, d).transpose(0, 3, 1, 2))


def conv2d_backward(grad_out, x, weight, stride=1, padding=0):
    """Return ``(grad_input, grad_weight, grad_bias)`` for :func:`conv2d_forward`."""
    padding = _pair(padding)
    oh, ow = _check_conv(x, weight, stride, padding)
    n, c, h, w = x.shape
    d, _, kh, kw = weight.shape
    if tuple(grad_out.shape) != (n, d, oh, ow):
        raise ValueError(
            f"conv2d backward: grad_out shape {tuple(grad_out.shape)} != output shape {(n, d, oh, ow)}"
        )
    ph, pw = padding
    g2 = np.asarray(grad_out, dtype=_ACC).transpose(0, 2, 3, 1).reshape(-1, d)
    wr = np.asarray(weight, dtype=_ACC).transpose(0, 2, 3, 1).reshape(d, -1)
    xt = _nhwc_padded(x, ph, pw)
    grad_w = (g2.T @ _im2col(xt, kh, kw, stride, oh, ow)).reshape(d, kh, kw, c).transpose(0, 3, 1, 2)
    grad_b = g2.sum(axis=0)
    gcols = (g2 @ wr).reshape(n, oh, ow, kh, kw, c)
    gxt = np.zeros(xt.shape, dtype=_ACC)
    for i in range(kh):
        for j in range(kw):
            gxt[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += gcols[:, :, :, i, j]
    grad_x = gxt[:, ph : ph + h, pw : pw + w].transpose(0, 3, 1, 2)
    return np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_w), grad_b


def avgpool2d_forward(x, kernel_size, stride=1, padding=0):
    """Mean over each ``K x K`` window; padded cells count toward the ``K**2`` divisor."""
    k = int(kernel_size)
    if k % 2 == 0:
        raise ValueError(f"average pool kernel must be odd, got {k}")
    if x.ndim != 4:
        raise ValueError(f"avgpool2d: expected 4-d input, got shape {tuple(x.shape)}")
    oh = conv_output_size(x.shape[2], k, stride, padding)
    ow = conv_output_size(x.shape[3], k, stride, padding)
    if oh < 1 or ow < 1:
        raise ValueError(f"avgpool2d: input {tuple(x.shape)} smaller than kernel {k}")
    xp = _pad(np.asarray(x, dtype=_ACC), padding, padding)
    out = np.zeros(x.shape[:2] + (oh, ow), dtype=_ACC)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
    out /= k * k
    return out


def avgpool2d_backward(grad_out, in_shape, kernel_size, stride=1, padding=0):
    k = int(kernel_size)
    n, c, h, w = in_shape
    oh, ow = grad_out.shape[2:]
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=_ACC)
    g = np.asarray(grad_out, dtype=_ACC) / (k * k)
    for i in range(k):
        for j in range(k):
            gxp[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += g
    return gxp[:, :, padding : padding + h, padding : padding + w]


def batchnorm_forward(x, params: BnParams, mode="eval", update_stats=True):
    """Per-channel batch normalization.

    ``mode="train"`` normalises by the (biased) batch statistics and, when
    ``update_stats`` is set, moves the running statistics of ``params`` in
    place. ``mode="eval"`` uses the running statistics.

    Returns ``(y, cache)``; the cache feeds :func:`batchnorm_backward`.
    """
    if x.ndim != 4 or x.shape[1] != params.num_channels:
        raise ValueError(
            f"batchnorm: input shape {tuple(x.shape)} does not match {params.num_channels} channels"
        )
    shape = x.shape
    n, c = shape[:2]
    # channels-major view so every per-channel broadcast runs over contiguous rows
    x3 = np.asarray(x, dtype=_ACC).reshape(n, c, -1)
    if mode == "train":
        m = x3.shape[0] * x3.shape[2]
        if m == 1:
            raise ValueError("batchnorm: train mode needs more than one value per channel")
        mean = x3.sum(axis=2).sum(axis=0) / m
        xc = x3 - mean[:, None]
        var = np.einsum("ncl,ncl->c", xc, xc) / m
        if update_stats:
            mom = params.momentum
            params.running_mean[...] = (1 - mom) * params.running_mean + mom * mean
            params.running_var[...] = (1 - mom) * params.running_var + mom * var
    elif mode == "eval":
        mean, var = params.running_mean, params.running_var
        xc = x3 - mean[:, None]
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv = 1.0 / np.sqrt(var + params.eps)
    xhat = xc
    xhat *= inv[:, None]
    y = xhat * params.gamma[:, None]
    y += params.beta[:, None]
    return y.reshape(shape), (mode, xhat, inv)


def batchnorm_backward(grad_out, params: BnParams, cache):
    mode, xhat, inv = cache
    shape = grad_out.shape
    g = np.asarray(grad_out, dtype=_ACC).reshape(xhat.shape)
    grad_beta = g.sum(axis=2).sum(axis=0)
    grad_gamma = np.einsum("ncl,ncl->c", g, xhat)
    scale = params.gamma * inv
    if mode == "eval":
        return (g * scale[:, None]).reshape(shape), grad_gamma, grad_beta
    m = g.shape[0] * g.shape[2]
    grad_x = g * m
    grad_x -= grad_beta[:, None]
    grad_x -= xhat * grad_gamma[:, None]
    grad_x *= (scale / m)[:, None]
    return grad_x.reshape(shape), grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Tensor:
    """An array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_swept")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward = None
        self._swept = False

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"

    @property
    def shape(self):
        return tuple(self.data.shape)

    @property
    def size(self):
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def backward(self, grad=None):
        """Reverse sweep from this node, accumulating into leaf ``grad`` buffers."""
        if self._swept:
            raise RuntimeError("backward already ran on this graph; run a new forward pass first")
        if grad is None:
            if self.size != 1:
                raise ValueError(f"backward without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones(self.data.shape, dtype=_ACC)
        self._swept = True
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=_ACC)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.data.dtype)
                else:
                    node.grad = node.grad + g.astype(node.data.dtype)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # Free the graph behind this node.
            node._parents = ()
            node._backward = None


def _out_dtype(*tensors):
    return np.result_type(*[t.data.dtype for t in tensors])


def _make(data, parents: Sequence[Tensor], backward, dtype):
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(np.asarray(data).astype(dtype, copy=False))
    if needs:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    padding = _pair(padding)
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = conv2d_forward(x.data, weight.data, None if bias is None else bias.data, stride, padding)

    def backward(g):
        gx, gw, gb = conv2d_backward(g, x.data, weight.data, stride, padding)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(out, parents, backward, _out_dtype(*parents))


def batch_norm(x, gamma, beta, running_mean, running_var, eps=1e-5, momentum=0.1, mode="eval",
               update_stats=True):
    """Batch norm over a tensor; running arrays are updated in place in train mode."""
    params = BnParams.__new__(BnParams)
    params.gamma, params.beta = gamma.data.astype(_ACC), beta.data.astype(_ACC)
    params.running_mean, params.running_var = running_mean, running_var
    params.eps, params.momentum = eps, momentum
    if x.data.ndim != 4 or x.data.shape[1] != params.gamma.shape[0]:
        raise ValueError(
            f"batchnorm: input shape {x.shape} does not match {params.gamma.shape[0]} channels"
        )
    y, cache = batchnorm_forward(x.data, params, mode, update_stats)

    def backward(g):
        return batchnorm_backward(g, params, cache)

    return _make(y, (x, gamma, beta), backward, _out_dtype(x, gamma))


def avg_pool2d(x, kernel_size, stride=1, padding=0):
    out = avgpool2d_forward(x.data, kernel_size, stride, padding)
    in_shape = x.shape

    def backward(g):
        return (avgpool2d_backward(g, in_shape, kernel_size, stride, padding),)

    return _make(out, (x,), backward, x.dtype)


def pad2d(x, padding):
    """Zero-pad (positive) or crop (negative) the two spatial axes symmetrically."""
    ph, pw = _pair(padding)
    if ph == 0 and pw == 0:
        return x
    n, c, h, w = x.shape
    if h + 2 * ph < 1 or w + 2 * pw < 1:
        raise ValueError(f"pad2d: cropping {(ph, pw)} empties input of shape {x.shape}")
    ch, cw = max(-ph, 0), max(-pw, 0)
    qh, qw = max(ph, 0), max(pw, 0)
    core = x.data[:, :, ch : h - ch, cw : w - cw]
    out = _pad(core, qh, qw)
    ih, iw = core.shape[2:]

    def backward(g):
        gx = np.zeros((n, c, h, w), dtype=_ACC)
        gx[:, :, ch : h - ch, cw : w - cw] = g[:, :, qh : qh + ih, qw : qw + iw]
        return (gx,)

    return _make(out, (x,), backward, x.dtype)


def add(*tensors):
    """Elementwise sum of equally shaped tensors, accumulated in float64."""
    tensors = tuple(_as_tensor(t) for t in tensors)
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ValueError(f"add: shape {t.shape} != {shape}")
    out = np.zeros(shape, dtype=_ACC)
    for t in tensors:
        out += t.data

    def backward(g):
        return tuple(g for _ in tensors)

    return _make(out, tensors, backward, _out_dtype(*tensors))


def relu(x):
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), backward, x.dtype)


def global_avg_pool(x):
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),)

    return _make(x.data.astype(_ACC).mean(axis=(2, 3)), (x,), backward, x.dtype)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` for ``x`` of shape ``(N, F)`` and ``weight`` ``(O, F)``."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    xd, wd = x.data.astype(_ACC), weight.data.astype(_ACC)
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data.astype(_ACC)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        grads = (g @ wd, g.T @ xd)
        return grads if bias is None else grads + (g.sum(axis=0),)

    return _make(out, parents, backward, _out_dtype(*parents))


def tsum(x):
    def backward(g):
        return (np.broadcast_to(g, x.shape).astype(_ACC),)

    return _make(np.asarray(x.data.astype(_ACC).sum()), (x,), backward, x.dtype)


def log_softmax(z):
    z = np.asarray(z, dtype=_ACC)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy for integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if logits.data.ndim != 2 or labels.shape != (n,):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return _make(np.asarray(loss), (logits,), backward, logits.dtype)

"""Forward and backward passes for every layer primitive.

All functions are pure: they take arrays and return new arrays. Spatial
convolutions use "same" zero padding and stride 1, computed as one matrix
product over an im2col buffer. A tied deconvolution is an ordinary
convolution whose kernel is the adjoint view of its partner's kernel, so
the two share one code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from tiedseg.errors import ConfigError, InputError, ShapeError
from tiedseg.tensor import DTYPE, check_finite

NORM_EPS = 1e-5


@dataclass
class LayerGrad:
    d_input: np.ndarray | None
    d_weight: np.ndarray | None = None
    d_bias: np.ndarray | None = None


@dataclass
class PoolSwitches:
    """Within-window argmax positions recorded by a max-pool."""

    input_dims: tuple[int, int, int, int]
    window: tuple[int, int]
    stride: tuple[int, int]
    argmax: np.ndarray  # (n, c, h // sh, w // sw), flat index into the window

    @property
    def pooled_dims(self) -> tuple[int, int, int, int]:
        n, c, h, w = self.input_dims
        return (n, c, h // self.stride[0], w // self.stride[1])


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _check_kernel(w: np.ndarray) -> None:
    if w.ndim != 4:
        raise ShapeError(f"kernel must be (out_c, in_c, kh, kw), got {w.shape}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ShapeError(f"kernel spatial size must be odd, got {w.shape[2:]}")


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Patch matrix of shape (c*kh*kw, n*h*w) for a same-padded conv."""
    n, c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, h, w, kh, kw
    cols = np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3))
    return cols.reshape(c * kh * kw, n * h * w)


def conv_forward(
    x: np.ndarray,
    w: np.ndarray,
    b: np.ndarray | None = None,
    stride: int = 1,
    cols: np.ndarray | None = None,
) -> np.ndarray:
    """Same-padded stride-1 cross-correlation plus bias."""
    _check_kernel(w)
    if stride != 1:
        raise ConfigError(f"only stride 1 is supported, got {stride}")
    n, c, h, wd = x.shape
    out_c, in_c, kh, kw = w.shape
    if c != in_c:
        raise ShapeError(f"input has {c} channels, kernel expects {in_c}")
    if cols is None:
        cols = im2col(x, kh, kw)
    y = w.reshape(out_c, -1) @ cols  # out_c, n*h*w
    y = y.reshape(out_c, n, h, wd).transpose(1, 0, 2, 3)
    if b is not None:
        y = y + b.reshape(1, out_c, 1, 1)
    return np.ascontiguousarray(y)


def adjoint_kernel(w: np.ndarray, flip: bool = True) -> np.ndarray:
    """Swap the channel axes and (optionally) rotate the kernel by 180 degrees.

    Returns a view, so writes to ``w`` show through. Applying it twice gives
    back ``w``.
    """
    v = w.swapaxes(0, 1)
    if flip:
        v = v[:, :, ::-1, ::-1]
    return v


def conv_backward(
    x: np.ndarray,
    w: np.ndarray,
    d_out: np.ndarray,
    cols: np.ndarray | None = None,
    need_input: bool = True,
) -> LayerGrad:
    _check_kernel(w)
    n, c, h, wd = x.shape
    out_c, in_c, kh, kw = w.shape
    if d_out.shape != (n, out_c, h, wd):
        raise ShapeError(f"d_out {d_out.shape} does not match conv output {(n, out_c, h, wd)}")
    if cols is None:
        cols = im2col(x, kh, kw)
    g = d_out.transpose(1, 0, 2, 3).reshape(out_c, -1)
    d_w = (g @ cols.T).reshape(w.shape)
    d_b = g.sum(axis=1)
    d_x = None
    if need_input:
        # same-padded conv with the adjoint kernel is the exact input gradient
        d_x = conv_forward(d_out, np.ascontiguousarray(adjoint_kernel(w)))
    return LayerGrad(d_x, d_w, d_b)


def deconv_forward(
    x: np.ndarray,
    w_tied: np.ndarray,
    b: np.ndarray | None = None,
    cols: np.ndarray | None = None,
) -> np.ndarray:
    """Convolve with a tied kernel view (already in adjoint layout)."""
    return conv_forward(x, np.ascontiguousarray(w_tied), b, cols=cols)


def deconv_backward(
    x: np.ndarray,
    w_tied: np.ndarray,
    d_out: np.ndarray,
    cols: np.ndarray | None = None,
    need_input: bool = True,
) -> LayerGrad:
    """Gradient w.r.t. the tied view; the caller maps it back to the partner."""
    return conv_backward(x, np.ascontiguousarray(w_tied), d_out, cols, need_input)


# --------------------------------------------------------------------------
# nonlinearity, pooling
# --------------------------------------------------------------------------


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, d_out, 0.0)


def _pool_geometry(x_shape, window, stride):
    window = tuple(window)
    stride = tuple(stride)
    if window != stride:
        raise ConfigError(f"pool window {window} must equal stride {stride} (non-overlapping)")
    n, c, h, w = x_shape
    sh, sw = stride
    if h % sh or w % sw:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by pool stride {stride}")
    return window, stride


def maxpool_forward(x: np.ndarray, window=(2, 2), stride=(2, 2)) -> tuple[np.ndarray, PoolSwitches]:
    """Non-overlapping max-pool; ties resolve to the first row-major position."""
    window, stride = _pool_geometry(x.shape, window, stride)
    n, c, h, w = x.shape
    kh, kw = window
    blocks = x.reshape(n, c, h // kh, kh, w // kw, kw).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // kh, w // kw, kh * kw)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), PoolSwitches((n, c, h, w), window, stride, arg)


def unpool_forward(p: np.ndarray, sw: PoolSwitches) -> np.ndarray:
    """Place each pooled value at its recorded position; zeros elsewhere."""
    if p.shape != sw.pooled_dims:
        raise ShapeError(f"pooled input {p.shape} does not match switches {sw.pooled_dims}")
    n, c, h, w = sw.input_dims
    kh, kw = sw.window
    blocks = np.zeros((n, c, h // kh, w // kw, kh * kw), dtype=DTYPE)
    np.put_along_axis(blocks, sw.argmax[..., None], p[..., None], axis=-1)
    out = blocks.reshape(n, c, h // kh, w // kw, kh, kw).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(out.reshape(n, c, h, w))


def maxpool_backward(d_out: np.ndarray, sw: PoolSwitches) -> np.ndarray:
    return unpool_forward(d_out, sw)


def unpool_backward(d_out: np.ndarray, sw: PoolSwitches) -> np.ndarray:
    """Gather the gradient at each switch position."""
    if d_out.shape != sw.input_dims:
        raise ShapeError(f"d_out {d_out.shape} does not match unpooled dims {sw.input_dims}")
    n, c, h, w = sw.input_dims
    kh, kw = sw.window
    blocks = d_out.reshape(n, c, h // kh, kh, w // kw, kw).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // kh, w // kw, kh * kw)
    return np.ascontiguousarray(np.take_along_axis(blocks, sw.argmax[..., None], axis=-1)[..., 0])


# --------------------------------------------------------------------------
# feature stacking
# --------------------------------------------------------------------------


NORM_SCOPES = {"plane": (2, 3), "map": (1, 2, 3), "none": None}


def _norm_axes(scope: str) -> tuple[int, ...]:
    try:
        return NORM_SCOPES[scope]
    except KeyError:
        raise ConfigError(f"normalization scope must be one of {sorted(NORM_SCOPES)}, got {scope!r}") from None


def normalize_map(h: np.ndarray, eps: float = NORM_EPS, scope: str = "plane") -> np.ndarray:
    """Zero-mean, unit-variance normalization of each sample's feature map.

    ``scope="plane"`` uses statistics per (sample, channel) plane;
    ``scope="map"`` uses one mean/variance over all channels of a sample.
    """
    axes = _norm_axes(scope)
    if axes is None:
        return h
    mean = h.mean(axis=axes, keepdims=True)
    var = ((h - mean) ** 2).mean(axis=axes, keepdims=True)
    return (h - mean) / np.sqrt(var + eps)


def normalize_map_backward(h: np.ndarray, d_out: np.ndarray, eps: float = NORM_EPS, scope: str = "plane") -> np.ndarray:
    # mean and variance are differentiated as functions of the input
    axes = _norm_axes(scope)
    if axes is None:
        return d_out
    mean = h.mean(axis=axes, keepdims=True)
    var = ((h - mean) ** 2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (h - mean) * inv
    g_mean = d_out.mean(axis=axes, keepdims=True)
    gy_mean = (d_out * y).mean(axis=axes, keepdims=True)
    return inv * (d_out - g_mean - y * gy_mean)


def expand_ratio(h: int, w: int, target_h: int, target_w: int) -> tuple[int, int]:
    if target_h % h or target_w % w:
        raise ShapeError(f"cannot expand {(h, w)} to {(target_h, target_w)} by integer ratios")
    return target_h // h, target_w // w


def expand_map(h: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbour upscaling by integer ratios."""
    rh, rw = expand_ratio(h.shape[2], h.shape[3], target_h, target_w)
    if rh == 1 and rw == 1:
        return h
    return np.repeat(np.repeat(h, rh, axis=2), rw, axis=3)


def expand_map_backward(d_out: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c, th, tw = d_out.shape
    rh, rw = expand_ratio(h, w, th, tw)
    if rh == 1 and rw == 1:
        return d_out
    return d_out.reshape(n, c, h, rh, w, rw).sum(axis=(3, 5))


def concat_maps(maps: list[np.ndarray]) -> np.ndarray:
    if not maps:
        raise ShapeError("concat_maps needs at least one map")
    ref = maps[0].shape
    for m in maps[1:]:
        if (m.shape[0], m.shape[2], m.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"cannot concatenate {m.shape} with {ref}")
    if len(maps) == 1:
        return maps[0]
    return np.concatenate(maps, axis=1)


def split_channels(d: np.ndarray, counts: list[int]) -> list[np.ndarray]:
    offsets = np.cumsum(counts)[:-1]
    return np.split(d, offsets, axis=1)


# --------------------------------------------------------------------------
# head, pooling to image level, losses
# --------------------------------------------------------------------------


def classmap_forward(f: np.ndarray, w_m: np.ndarray, b_m: np.ndarray | None = None) -> np.ndarray:
    return conv_forward(f, w_m, b_m)


def channel_softmax(h: np.ndarray) -> np.ndarray:
    z = h - h.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def channel_softmax_backward(s: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    """``s`` is the softmax output."""
    return s * (d_out - (d_out * s).sum(axis=1, keepdims=True))


def lse_pool(a: np.ndarray, s: float) -> np.ndarray:
    """(1/s) * log(mean(exp(s * a))) over each map, shape (n, c)."""
    if s <= 0:
        raise ConfigError(f"LSE sharpness must be positive, got {s}")
    n, c, h, w = a.shape
    flat = s * a.reshape(n, c, h * w)
    m = flat.max(axis=2)
    lse = m + np.log(np.exp(flat - m[..., None]).sum(axis=2))
    return (lse - np.log(h * w)) / s


def lse_pool_backward(a: np.ndarray, s: float, d_y: np.ndarray) -> np.ndarray:
    n, c, h, w = a.shape
    flat = s * a.reshape(n, c, h * w)
    e = np.exp(flat - flat.max(axis=2, keepdims=True))
    resp = e / e.sum(axis=2, keepdims=True)
    return (resp * d_y[..., None]).reshape(n, c, h, w)


def _check_targets(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=DTYPE)
    if t.shape != y.shape:
        raise InputError(f"targets {t.shape} do not match predictions {y.shape}")
    if not np.all((t == 0) | (t == 1)):
        raise InputError("target entries must be 0 or 1")
    return t


def sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def bce_multilabel_loss(
    y_pred: np.ndarray, t: np.ndarray, link: str = "identity", eps: float = 1e-12
) -> tuple[float, np.ndarray]:
    """Sum over classes of binary cross-entropy, averaged over the batch.

    ``link="identity"`` reads ``y_pred`` directly as probabilities (it lies in
    [0, 1] when pooled from softmaxed maps); ``link="logistic"`` squashes it
    first.
    """
    t = _check_targets(t, y_pred)
    n = y_pred.shape[0]
    if link == "logistic":
        p = sigmoid(y_pred)
        p = np.clip(p, eps, 1 - eps)
        loss = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum() / n
        return float(loss), (p - t) / n
    if link != "identity":
        raise ConfigError(f"unknown link {link!r}")
    p = np.clip(y_pred, eps, 1 - eps)
    loss = -(t * np.log(p) + (1 - t) * np.log(1 - p)).sum() / n
    grad = (-t / p + (1 - t) / (1 - p)) / n
    # no gradient through the clip
    grad = np.where((y_pred < eps) | (y_pred > 1 - eps), 0.0, grad)
    return float(loss), grad


def categorical_ce_loss(y_pred: np.ndarray, t: np.ndarray) -> tuple[float, np.ndarray]:
    """Softmax over classes then categorical cross-entropy, batch averaged."""
    t = _check_targets(t, y_pred)
    n = y_pred.shape[0]
    z = y_pred - y_pred.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(t * logp).sum() / n
    p = np.exp(logp)
    grad = (p * t.sum(axis=1, keepdims=True) - t) / n
    return float(check_finite(np.asarray(loss), "loss")), grad

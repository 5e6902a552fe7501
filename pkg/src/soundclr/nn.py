"""Hand-written forward/backward ops and the encoder/projection/classifier graph.

Every op is a pair ``*_forward(...) -> (out, cache)`` and
``*_backward(grad_out, cache) -> grads`` (one gradient per forward input,
in order). Shapes follow NCHW for images and N x D for vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# Ops
# ---------------------------------------------------------------------------


def dense_forward(x, W, b):
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"dense shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b, (x, W)


def dense_backward(grad, cache):
    x, W = cache
    return grad @ W.T, x.T @ grad, grad.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad, mask):
    return (grad * mask,)


def _im2col(x):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # n c h w 3 3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d_forward(x, K, b):
    """3x3 cross-correlation, stride 1, zero padding 1."""
    if x.ndim != 4 or K.ndim != 4 or K.shape[2:] != (3, 3) or K.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d shape mismatch: x{x.shape} K{K.shape}")
    if b.shape != (K.shape[0],):
        raise ValueError(f"conv2d bias shape {b.shape} does not match {K.shape[0]} output channels")
    n, _, h, w = x.shape
    if h < 3 or w < 3:
        raise ValueError(f"conv2d needs H, W >= 3, got {h}x{w}")
    cols = _im2col(x)
    kmat = K.reshape(K.shape[0], -1)
    out = (cols @ kmat.T + b).reshape(n, h, w, -1).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), (cols, x.shape, K)


def conv2d_backward(grad, cache, need_input_grad=True):
    cols, xshape, K = cache
    n, c, h, w = xshape
    cout = K.shape[0]
    g2 = grad.transpose(0, 2, 3, 1).reshape(-1, cout)
    gK = (g2.T @ cols).reshape(K.shape)
    gb = g2.sum(axis=0)
    if not need_input_grad:
        return None, gK, gb
    gcols = (g2 @ K.reshape(cout, -1)).reshape(n, h, w, c, 3, 3)
    gxp = np.zeros((n, c, h + 2, w + 2), dtype=grad.dtype)
    for di in range(3):
        for dj in range(3):
            gxp[:, :, di : di + h, dj : dj + w] += gcols[..., di, dj].transpose(0, 3, 1, 2)
    return gxp[:, :, 1:-1, 1:-1], gK, gb


_POOL_CELLS = ((0, 0), (0, 1), (1, 0), (1, 1))  # row-major order within a 2x2 block


def maxpool2d_forward(x):
    """2x2 max pool, stride 2. Ties go to the first cell in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d needs even spatial dims, got {h}x{w}")
    a, b, d, e = (x[:, :, i::2, j::2] for i, j in _POOL_CELLS)
    out = np.maximum(np.maximum(a, b), np.maximum(d, e))
    idx = np.where(a == out, 0, np.where(b == out, 1, np.where(d == out, 2, 3))).astype(np.int8)
    return out, (idx, x.shape)


def maxpool2d_backward(grad, cache):
    idx, shape = cache
    gx = np.zeros(shape, dtype=grad.dtype)
    for k, (i, j) in enumerate(_POOL_CELLS):
        gx[:, :, i::2, j::2] = np.where(idx == k, grad, 0)
    return (gx,)


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(grad, shape):
    n, c, h, w = shape
    gx = np.broadcast_to((grad / (h * w))[:, :, None, None], shape)
    return (np.array(gx),)


def l2_normalize_forward(x):
    norm = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    if np.any(norm <= NORM_EPS):
        raise ValueError("l2_normalize: row with near-zero norm")
    z = x / norm
    return z, (z, norm)


def l2_normalize_backward(grad, cache):
    z, norm = cache
    return ((grad - z * np.sum(z * grad, axis=1, keepdims=True)) / norm,)


def softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(x):
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


class Op(NamedTuple):
    name: str
    forward: Callable
    backward: Callable


OPS = {
    "dense": Op("dense", dense_forward, dense_backward),
    "relu": Op("relu", relu_forward, relu_backward),
    "conv2d": Op("conv2d", conv2d_forward, conv2d_backward),
    "maxpool2d": Op("maxpool2d", maxpool2d_forward, maxpool2d_backward),
    "global_avg_pool": Op("global_avg_pool", global_avg_pool_forward, global_avg_pool_backward),
    "l2_normalize": Op("l2_normalize", l2_normalize_forward, l2_normalize_backward),
}


@dataclass
class GradReport:
    name: str
    max_rel_error: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the larger of max |a| and max |n| for the tensor."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    diff = np.max(np.abs(analytic - numeric), initial=0.0)
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` with respect to ``x`` (mutated in place, restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def grad_check(op: Op, inputs, tolerance: float = 1e-5, h: float = 1e-5, seed: int = 0) -> GradReport:
    """Compare ``op.backward`` against central differences in float64.

    The scalar probed is ``sum(out * R)`` for a fixed random ``R``.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    out, cache = op.forward(*inputs)
    R = np.random.default_rng(seed).standard_normal(out.shape)
    analytic = op.backward(R, cache)

    def scalar():
        return float(np.sum(op.forward(*inputs)[0] * R))

    errors = []
    for a, g in zip(inputs, analytic):
        errors.append(relative_error(np.asarray(g), numeric_grad(scalar, a, h)))
    return GradReport(op.name, max(errors), tolerance, errors)


# ---------------------------------------------------------------------------
# Model graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 50
    conv_channels: tuple[int, ...] = (8, 16, 32)
    rep_dim: int = 128  # D_f
    proj_dim: int = 64  # D_g
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        dims = (self.num_classes, self.rep_dim, self.proj_dim, self.in_channels, *self.conv_channels)
        if min(dims) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.proj_dim >= self.rep_dim:
            raise ValueError(f"projection dim {self.proj_dim} must be below representation dim {self.rep_dim}")

    @property
    def spatial_multiple(self) -> int:
        return 2 ** len(self.conv_channels)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.in_channels
        for i, cout in enumerate(self.conv_channels):
            shapes[f"conv{i}.weight"] = (cout, cin, 3, 3)
            shapes[f"conv{i}.bias"] = (cout,)
            cin = cout
        shapes["embed.weight"] = (cin, self.rep_dim)
        shapes["embed.bias"] = (self.rep_dim,)
        shapes["proj.weight"] = (self.rep_dim, self.proj_dim)
        shapes["proj.bias"] = (self.proj_dim,)
        shapes["cls.weight"] = (self.rep_dim, self.num_classes)
        shapes["cls.bias"] = (self.num_classes,)
        return shapes

    def encoder_params(self) -> list[str]:
        return [k for k in self.param_shapes() if k.startswith(("conv", "embed"))]


ParamSet = dict  # name -> np.ndarray


def init_params(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> ParamSet:
    """Glorot-uniform weights, zero biases, drawn in ``param_shapes`` order."""
    params = {}
    for name, shape in cfg.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            fan_in, fan_out = shape[1] * 9, shape[0] * 9
        else:
            fan_in, fan_out = shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params[name] = rng.uniform(-limit, limit, size=shape).astype(dtype)
    return params


@dataclass
class Forward:
    h: np.ndarray
    z: np.ndarray
    logits: np.ndarray
    caches: dict


def crop_input(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Trim trailing rows/columns so every pooling stage sees even dims."""
    m = cfg.spatial_multiple
    h, w = x.shape[2] - x.shape[2] % m, x.shape[3] - x.shape[3] % m
    if h < m or w < m:
        raise ValueError(f"input {x.shape[2:]} too small for {len(cfg.conv_channels)} pooling stages")
    return x[:, :, :h, :w]


def forward(params: ParamSet, cfg: ModelConfig, x: np.ndarray) -> Forward:
    caches = {}
    a = crop_input(x, cfg)
    for i in range(len(cfg.conv_channels)):
        a, caches[f"conv{i}"] = conv2d_forward(a, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        a, caches[f"relu{i}"] = relu_forward(a)
        a, caches[f"pool{i}"] = maxpool2d_forward(a)
    a, caches["gap"] = global_avg_pool_forward(a)
    e, caches["embed"] = dense_forward(a, params["embed.weight"], params["embed.bias"])
    h, caches["h_norm"] = l2_normalize_forward(e)
    logits, caches["cls"] = dense_forward(h, params["cls.weight"], params["cls.bias"])
    p, caches["proj"] = dense_forward(h, params["proj.weight"], params["proj.bias"])
    z, caches["z_norm"] = l2_normalize_forward(p)
    return Forward(h, z, logits, caches)


def backward(
    params: ParamSet,
    cfg: ModelConfig,
    fwd: Forward,
    grad_logits: np.ndarray | None = None,
    grad_z: np.ndarray | None = None,
    train_encoder: bool = True,
) -> ParamSet:
    """Parameter gradients for upstream gradients on logits and/or z.

    Heads without an upstream gradient, and the encoder when
    ``train_encoder`` is false, receive exact zeros.
    """
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    c = fwd.caches
    grad_h = np.zeros_like(fwd.h)
    if grad_logits is not None:
        gh, grads["cls.weight"], grads["cls.bias"] = dense_backward(grad_logits, c["cls"])
        grad_h = grad_h + gh
    if grad_z is not None:
        (gp,) = l2_normalize_backward(grad_z, c["z_norm"])
        gh, grads["proj.weight"], grads["proj.bias"] = dense_backward(gp, c["proj"])
        grad_h = grad_h + gh
    if not train_encoder:
        return grads
    (ge,) = l2_normalize_backward(grad_h, c["h_norm"])
    ga, grads["embed.weight"], grads["embed.bias"] = dense_backward(ge, c["embed"])
    (ga,) = global_avg_pool_backward(ga, c["gap"])
    for i in reversed(range(len(cfg.conv_channels))):
        (ga,) = maxpool2d_backward(ga, c[f"pool{i}"])
        (ga,) = relu_backward(ga, c[f"relu{i}"])
        ga, grads[f"conv{i}.weight"], grads[f"conv{i}.bias"] = conv2d_backward(
            ga, c[f"conv{i}"], need_input_grad=i > 0
        )
    return grads

"""A small convolutional substrate with explicit forward/backward and momentum SGD.

Tensors at the public surface are channel-first: (N, C, H, W) or (C, H, W);
kernels are (out, in, kh, kw). Internally activations are kept channels-last
so each 3x3 convolution is one im2col matrix product.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .core import TrainingError

LEAKY_SLOPE = 0.1
CHECKPOINT_MAGIC = b"NSRM"
CHECKPOINT_VERSION = 1

KIND_CONV, KIND_POOL, KIND_HEAD = 0, 1, 2


class ShapeError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class NumericError(TrainingError):
    pass


@dataclass(frozen=True)
class Conv:
    out_channels: int
    slope: float = LEAKY_SLOPE


@dataclass(frozen=True)
class MaxPool:
    pass


@dataclass(frozen=True)
class Head:
    out_channels: int


Layer = Union[Conv, MaxPool, Head]


@dataclass(frozen=True)
class NetSpec:
    layers: tuple
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("empty layer list")
        for layer in self.layers:
            if isinstance(layer, (Conv, Head)) and layer.out_channels < 1:
                raise ValueError(f"bad channel count in {layer}")

    @property
    def stride(self) -> int:
        return 2 ** sum(isinstance(l, MaxPool) for l in self.layers)

    @property
    def out_channels(self) -> int:
        ch = self.in_channels
        for layer in self.layers:
            if not isinstance(layer, MaxPool):
                ch = layer.out_channels
        return ch

    def param_shapes(self) -> list[tuple[int, ...]]:
        shapes = []
        ch = self.in_channels
        for layer in self.layers:
            if isinstance(layer, Conv):
                shapes += [(layer.out_channels, ch, 3, 3), (layer.out_channels,)]
                ch = layer.out_channels
            elif isinstance(layer, Head):
                shapes += [(layer.out_channels, ch, 1, 1), (layer.out_channels,)]
                ch = layer.out_channels
        return shapes

    def param_count(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes()))


def default_spec(head_channels: int = 45, widths: Sequence[int] = (16, 32, 64, 64, 128, 128)) -> NetSpec:
    """Conv/pool stack with a pool after every conv but the last, then a 1x1 head."""
    layers: list = []
    for i, w in enumerate(widths):
        layers.append(Conv(w))
        if i < len(widths) - 1:
            layers.append(MaxPool())
    layers.append(Head(head_channels))
    return NetSpec(tuple(layers))


def init_params(spec: NetSpec, seed: int = 0, dtype=np.float32, head_gain: float = 0.01) -> list[np.ndarray]:
    """He-style uniform init scaled by each layer's fan-in; zero biases.

    The linear head is further scaled by `head_gain` so initial predictions
    sit near zero.
    """
    rng = np.random.default_rng(seed)
    params = []
    for shape in spec.param_shapes():
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            if shape[2] == 1:
                bound *= head_gain
            params.append(rng.uniform(-bound, bound, size=shape).astype(dtype))
        else:
            params.append(np.zeros(shape, dtype=dtype))
    return params


# ---------------------------------------------------------------- kernels


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2, w + 2, c), x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((n, h, w, 9, c), x.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            cols[:, :, :, k, :] = xp[:, i : i + h, j : j + w, :]
            k += 1
    return cols.reshape(n * h * w, 9 * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    n, h, w, c = shape
    dcols = dcols.reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dcols.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :]


def _pool(z: np.ndarray) -> np.ndarray:
    return np.maximum(
        np.maximum(z[:, 0::2, 0::2], z[:, 0::2, 1::2]),
        np.maximum(z[:, 1::2, 0::2], z[:, 1::2, 1::2]),
    )


def _pool_backward(z: np.ndarray, pooled: np.ndarray, grad: np.ndarray) -> np.ndarray:
    # ties go to the lowest linear index: scan window positions in row-major order
    dz = np.zeros_like(z)
    free = np.ones(pooled.shape, dtype=bool)
    hit = np.empty(pooled.shape, dtype=bool)
    for p, q in ((0, 0), (0, 1), (1, 0), (1, 1)):
        np.equal(z[:, p::2, q::2], pooled, out=hit)
        hit &= free
        np.multiply(grad, hit, out=dz[:, p::2, q::2])
        free &= ~hit
    return dz


def _leaky(z: np.ndarray, slope: float) -> np.ndarray:
    return np.maximum(z, slope * z) if slope <= 1 else np.where(z > 0, z, slope * z)


def _leaky_grad(z: np.ndarray, grad: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, grad, grad * z.dtype.type(slope))


def _kernel_matrix(weight: np.ndarray) -> np.ndarray:
    out_ch, in_ch, kh, kw = weight.shape
    return weight.transpose(2, 3, 1, 0).reshape(kh * kw * in_ch, out_ch)


def _kernel_from_matrix(mat: np.ndarray, shape) -> np.ndarray:
    out_ch, in_ch, kh, kw = shape
    return mat.reshape(kh, kw, in_ch, out_ch).transpose(3, 2, 0, 1)


# ---------------------------------------------------------------- forward / backward


@dataclass
class Cache:
    spec: NetSpec
    params: list
    entries: list
    input_shape: tuple
    output_shape: tuple
    squeeze: bool
    consumed: bool = field(default=False)


def _to_nhwc(x: np.ndarray, spec: NetSpec, dtype) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"input must be (C,H,W) or (N,C,H,W), got shape {x.shape}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"expected {spec.in_channels} input channels, got {x.shape[1]}")
    h, w = x.shape[2:]
    if h % spec.stride or w % spec.stride or h == 0 or w == 0:
        raise ShapeError(f"input dims {h}x{w} not divisible by network stride {spec.stride}")
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=dtype), squeeze


def _check_params(spec: NetSpec, params: Sequence[np.ndarray]) -> None:
    shapes = spec.param_shapes()
    if len(params) != len(shapes) or any(p.shape != s for p, s in zip(params, shapes)):
        raise ShapeError("parameter shapes do not match the network spec")


def forward(spec: NetSpec, params: Sequence[np.ndarray], x: np.ndarray, keep_cache: bool = True):
    """Run the network; returns (output, cache). Output keeps the input's batch convention."""
    _check_params(spec, params)
    dtype = params[0].dtype if params else np.result_type(x.dtype, np.float32)
    a, squeeze = _to_nhwc(x, spec, dtype)
    input_shape = a.shape
    entries = []
    layers = spec.layers
    pi = 0
    i = 0
    while i < len(layers):
        layer = layers[i]
        if isinstance(layer, Conv):
            weight, bias = params[pi], params[pi + 1]
            pi += 2
            n, h, w, c = a.shape
            cols = _im2col(a)
            z = (cols @ _kernel_matrix(weight) + bias).reshape(n, h, w, -1)
            pooled = i + 1 < len(layers) and isinstance(layers[i + 1], MaxPool)
            if pooled:
                # leaky-ReLU is increasing, so pooling first gives the same result at a quarter of the cost
                p = _pool(z)
                out = _leaky(p, layer.slope)
                entries.append(("conv_pool", cols, a.shape, z, p, layer.slope) if keep_cache else None)
                i += 2
            else:
                out = _leaky(z, layer.slope)
                entries.append(("conv", cols, a.shape, z, None, layer.slope) if keep_cache else None)
                i += 1
            a = out
        elif isinstance(layer, MaxPool):
            p = _pool(a)
            entries.append(("pool", a, p) if keep_cache else None)
            a = p
            i += 1
        else:
            weight, bias = params[pi], params[pi + 1]
            pi += 2
            n, h, w, c = a.shape
            flat = a.reshape(-1, c)
            a = (flat @ weight[:, :, 0, 0].T + bias).reshape(n, h, w, -1)
            entries.append(("head", flat, (n, h, w, c)) if keep_cache else None)
            i += 1
    out = a.transpose(0, 3, 1, 2)
    if squeeze:
        out = out[0]
    cache = Cache(spec, list(params), entries, input_shape, out.shape, squeeze) if keep_cache else None
    return np.ascontiguousarray(out), cache


def backward(cache: Cache, output_gradient: np.ndarray, need_input_grad: bool = True):
    """Exact gradients of the forward map; returns (param_grads, input_grad)."""
    if cache is None or not isinstance(cache, Cache):
        raise UsageError("backward needs the cache returned by forward(keep_cache=True)")
    if cache.consumed:
        raise UsageError("cache already consumed by a previous backward call")
    grad = np.asarray(output_gradient)
    if grad.shape != cache.output_shape:
        raise UsageError(f"output gradient shape {grad.shape} does not match forward output {cache.output_shape}")
    cache.consumed = True
    params = cache.params
    dtype = params[0].dtype if params else np.result_type(grad.dtype, np.float32)
    if cache.squeeze:
        grad = grad[None]
    g = np.ascontiguousarray(grad.transpose(0, 2, 3, 1), dtype=dtype)
    grads: list = [None] * len(params)
    pi = len(params)
    for k in range(len(cache.entries) - 1, -1, -1):
        entry = cache.entries[k]
        kind = entry[0]
        first = k == 0
        if kind == "head":
            _, flat, in_shape = entry
            pi -= 2
            weight = params[pi]
            gflat = g.reshape(-1, g.shape[-1])
            grads[pi] = (gflat.T @ flat)[:, :, None, None]
            grads[pi + 1] = gflat.sum(axis=0)
            if not first or need_input_grad:
                g = (gflat @ weight[:, :, 0, 0]).reshape(in_shape)
        elif kind == "pool":
            _, a, p = entry
            g = _pool_backward(a, p, g)
        else:
            _, cols, in_shape, z, p, slope = entry
            pi -= 2
            weight = params[pi]
            if kind == "conv_pool":
                g = _pool_backward(z, p, _leaky_grad(p, g, slope))
            else:
                g = _leaky_grad(z, g, slope)
            gflat = g.reshape(-1, g.shape[-1])
            grads[pi] = _kernel_from_matrix(cols.T @ gflat, weight.shape)
            grads[pi + 1] = gflat.sum(axis=0)
            if not first or need_input_grad:
                g = _col2im(gflat @ _kernel_matrix(weight).T, in_shape)
    grads = [np.ascontiguousarray(gr, dtype=dtype) for gr in grads]
    input_grad = None
    if need_input_grad:
        input_grad = g.transpose(0, 3, 1, 2)
        if cache.squeeze:
            input_grad = input_grad[0]
        input_grad = np.ascontiguousarray(input_grad)
    return grads, input_grad


# ---------------------------------------------------------------- optimizer


@dataclass
class SgdConfig:
    learning_rate: float = 1e-3
    final_rate: float = 5e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64

    def __post_init__(self):
        if self.learning_rate <= 0 or self.final_rate <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def sgd_step(params, grads, velocity, cfg: SgdConfig, lr: float | None = None):
    """v <- momentum*v - lr*(grad + decay*param); param <- param + v."""
    if len(params) != len(grads) or len(params) != len(velocity):
        raise ShapeError("params, grads and velocity must align")
    lr = cfg.learning_rate if lr is None else lr
    for i, g in enumerate(grads):
        if g.shape != params[i].shape or velocity[i].shape != params[i].shape:
            raise ShapeError(f"shape mismatch at parameter {i}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter tensor {i}; step aborted")
    new_params, new_velocity = [], []
    for p, g, v in zip(params, grads, velocity):
        dt = p.dtype.type
        v = dt(cfg.momentum) * v - dt(lr) * (g + dt(cfg.weight_decay) * p)
        new_velocity.append(v.astype(p.dtype, copy=False))
        new_params.append((p + v).astype(p.dtype, copy=False))
    return new_params, new_velocity


def zeros_like_params(params):
    return [np.zeros_like(p) for p in params]


# ---------------------------------------------------------------- checkpoint


def _spec_bytes(spec: NetSpec) -> bytes:
    out = [struct.pack("<II", spec.in_channels, len(spec.layers))]
    for layer in spec.layers:
        if isinstance(layer, Conv):
            out.append(struct.pack("<BId", KIND_CONV, layer.out_channels, layer.slope))
        elif isinstance(layer, MaxPool):
            out.append(struct.pack("<BId", KIND_POOL, 0, 0.0))
        else:
            out.append(struct.pack("<BId", KIND_HEAD, layer.out_channels, 0.0))
    return b"".join(out)


def params_to_bytes(spec: NetSpec, params: Sequence[np.ndarray]) -> bytes:
    _check_params(spec, params)
    body = b"".join(np.asarray(p, dtype="<f4").tobytes() for p in params)
    return CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION) + _spec_bytes(spec) + struct.pack("<Q", spec.param_count()) + body


def params_from_bytes(buf: bytes) -> tuple[NetSpec, list[np.ndarray]]:
    from .core import FormatError

    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    try:
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        in_ch, n_layers = struct.unpack_from("<II", buf, 8)
        pos = 16
        layers = []
        for _ in range(n_layers):
            kind, out_ch, slope = struct.unpack_from("<BId", buf, pos)
            pos += struct.calcsize("<BId")
            if kind == KIND_CONV:
                layers.append(Conv(out_ch, float(slope)))
            elif kind == KIND_POOL:
                layers.append(MaxPool())
            elif kind == KIND_HEAD:
                layers.append(Head(out_ch))
            else:
                raise FormatError(f"unknown layer kind {kind}")
        spec = NetSpec(tuple(layers), in_ch)
        (count,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
    except struct.error as exc:
        raise FormatError(f"checkpoint header truncated: {exc}") from exc
    if count != spec.param_count():
        raise FormatError(f"parameter count {count} does not match descriptor ({spec.param_count()})")
    if len(buf) - pos != 4 * count:
        raise FormatError(f"expected {4 * count} parameter bytes, found {len(buf) - pos}")
    flat = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).astype(np.float32)
    params, off = [], 0
    for shape in spec.param_shapes():
        n = int(np.prod(shape))
        params.append(flat[off : off + n].reshape(shape).copy())
        off += n
    return spec, params


def save_params(path, spec: NetSpec, params) -> None:
    Path(path).write_bytes(params_to_bytes(spec, params))


def load_params(path) -> tuple[NetSpec, list[np.ndarray]]:
    return params_from_bytes(Path(path).read_bytes())

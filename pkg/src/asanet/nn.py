"""Neural building blocks: parameter registry, convolutions, batch norm,
fully connected layers, residual blocks, and pooling.

Layers register their learnable tensors under dotted names in a shared
``ParamRegistry`` so that optimizers and checkpoints see one flat, ordered
namespace. Running statistics (batch-norm buffers) live in the same registry
as non-learnable buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import DegenerateBatchError, ShapeError
from .tensor import Tensor


@dataclass
class _Entry:
    tensor: Tensor
    group: str  # "network" or "centers"
    decay: bool  # whether weight decay applies


class ParamRegistry:
    """Ordered name -> parameter map with group tags and buffer storage."""

    def __init__(self):
        self._entries: dict[str, _Entry] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def register(self, name: str, data, group: str = "network", decay: bool = True) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name {name!r}")
        if group not in ("network", "centers"):
            raise ValueError(f"unknown parameter group {group!r}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._entries[name] = _Entry(t, group, decay)
        return t

    def register_buffer(self, name: str, data) -> np.ndarray:
        if name in self._buffers:
            raise ValueError(f"duplicate buffer name {name!r}")
        arr = np.array(data, dtype=np.float64)
        self._buffers[name] = arr
        return arr

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def get(self, name: str) -> Tensor:
        return self._entries[name].tensor

    def buffers(self) -> dict[str, np.ndarray]:
        return self._buffers

    def zero_grad(self) -> None:
        for entry in self._entries.values():
            entry.tensor.zero_grad()

    def num_values(self) -> int:
        return sum(e.tensor.size for e in self._entries.values())

    def state_dict(self) -> dict:
        """Snapshot of all parameters and buffers (copies)."""
        return {
            "params": {n: e.tensor.data.copy() for n, e in self._entries.items()},
            "buffers": {n: b.copy() for n, b in self._buffers.items()},
        }

    def load_state(self, state: dict) -> None:
        """Restore a snapshot in place; every entry must match bit-for-bit in shape."""
        params = state["params"]
        if set(params) != set(self._entries):
            raise ValueError("parameter name sets differ")
        for name, entry in self._entries.items():
            src = np.asarray(params[name], dtype=np.float64)
            if src.shape != entry.tensor.data.shape:
                raise ValueError(f"shape mismatch for {name}")
            entry.tensor.data[...] = src
        for name, buf in self._buffers.items():
            buf[...] = np.asarray(state["buffers"][name], dtype=np.float64)


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# functional ops
# ---------------------------------------------------------------------------

def conv1x1(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Pointwise convolution: a linear map across the channel axis.

    x: (N, C_in, H, W), w: (C_out, C_in), b: (C_out,).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv1x1 input must be 4-D, got {x.shape}")
    if w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1x1 channel mismatch: input {x.shape}, weight {w.shape}")
    n, c_in, h, wd = x.shape
    c_out = w.shape[0]
    flat = T.reshape(x, (n, c_in, h * wd))
    out = T.matmul(w, flat)  # broadcasts over the batch axis
    out = T.reshape(out, (n, c_out, h, wd))
    if b is not None:
        if b.shape != (c_out,):
            raise ShapeError(f"conv1x1 bias shape {b.shape} != ({c_out},)")
        out = out + T.reshape(b, (1, c_out, 1, 1))
    return out


def conv3x3(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """3x3 convolution with padding 1; only used by the toy backbone stem.

    x: (N, C_in, H, W), w: (C_out, C_in, 3, 3), b: (C_out,).
    """
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3 expects (N,C,H,W) and (O,C,3,3), got {x.shape}, {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv3x3 channel mismatch: input {x.shape}, weight {w.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win, w.data, optimize=True)
    out = out + b.data[None, :, None, None]
    h_out, w_out = out.shape[2:]

    def bwd(g):
        dw = np.einsum("nchwij,nohw->ocij", win, g, optimize=True)
        db = g.sum(axis=(0, 2, 3))
        dcols = np.einsum("nohw,ocij->nchwij", g, w.data, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                dxp[:, :, i : i + (h_out - 1) * stride + 1 : stride,
                    j : j + (w_out - 1) * stride + 1 : stride] += dcols[..., i, j]
        dx = dxp[:, :, 1 : 1 + x.shape[2], 1 : 1 + x.shape[3]]
        return dx, dw, db

    return T.apply_op(out, (x, w, b), bwd)


def fc(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map: x (N, d_in) -> (N, d_out) with w (d_out, d_in)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"fc dimension mismatch: input {x.shape}, weight {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"fc bias shape {b.shape} != ({w.shape[0]},)")
    return T.matmul(x, T.transpose(w)) + T.reshape(b, (1, w.shape[0]))


def spatial_pool(x: Tensor) -> Tensor:
    """Mean over the trailing (H, W) axes: (..., C, H, W) -> (..., C)."""
    if x.ndim < 3:
        raise ShapeError(f"spatial_pool needs (..., C, H, W), got {x.shape}")
    if x.shape[-1] == 0 or x.shape[-2] == 0:
        raise ShapeError("spatial_pool over an empty extent")
    return T.reduce_mean(x, axis=(-2, -1))


def temporal_pool(x: Tensor) -> Tensor:
    """Mean over the frame axis: (T, C) -> (C,) or (B, T, C) -> (B, C)."""
    if x.ndim not in (2, 3):
        raise ShapeError(f"temporal_pool needs (T, C) or (B, T, C), got {x.shape}")
    if x.shape[-2] == 0:
        raise ShapeError("temporal_pool over an empty extent")
    return T.reduce_mean(x, axis=-2)


def mean_pool_2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 spatial mean pool; extents must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"mean_pool_2x2 needs even extents, got {x.shape}")
    r = T.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    return T.reduce_mean(r, axis=(3, 5))


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv1x1:
    def __init__(self, reg: ParamRegistry, name: str, c_in: int, c_out: int, rng):
        self.w = reg.register(f"{name}.w", fan_in_uniform(rng, (c_out, c_in), c_in))
        self.b = reg.register(f"{name}.b", np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return conv1x1(x, self.w, self.b)


class Conv3x3:
    def __init__(self, reg: ParamRegistry, name: str, c_in: int, c_out: int, rng, stride: int = 1):
        self.w = reg.register(f"{name}.w", fan_in_uniform(rng, (c_out, c_in, 3, 3), c_in * 9))
        self.b = reg.register(f"{name}.b", np.zeros(c_out))
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv3x3(x, self.w, self.b, self.stride)


class Linear:
    def __init__(self, reg: ParamRegistry, name: str, d_in: int, d_out: int, rng):
        self.w = reg.register(f"{name}.w", fan_in_uniform(rng, (d_out, d_in), d_in))
        self.b = reg.register(f"{name}.b", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return fc(x, self.w, self.b)


class BatchNorm:
    """Per-channel batch normalization for (N, C) or (N, C, H, W) inputs.

    Train mode normalizes with batch statistics over all axes except the
    channel axis and updates the running statistics with momentum 0.1
    (unbiased variance for the running estimate). Eval mode uses only the
    running statistics, so its output is deterministic in the batch.
    """

    def __init__(self, reg: ParamRegistry, name: str, channels: int,
                 momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = reg.register(f"{name}.gamma", np.ones(channels), decay=False)
        self.beta = reg.register(f"{name}.beta", np.zeros(channels), decay=False)
        self.running_mean = reg.register_buffer(f"{name}.running_mean", np.zeros(channels))
        self.running_var = reg.register_buffer(f"{name}.running_var", np.ones(channels))
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.training = True
        self.update_running = True

    def _param_shape(self, ndim: int) -> tuple[int, ...]:
        return (1, self.channels) + (1,) * (ndim - 2)

    def __call__(self, x: Tensor) -> Tensor:
        # Fused forward/backward: the composite-op version costs an order of
        # magnitude more memory traffic on the large branch maps.
        if x.ndim not in (2, 4) or x.shape[1] != self.channels:
            raise ShapeError(f"batchnorm expects (N,{self.channels},...) input, got {x.shape}")
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        pshape = self._param_shape(x.ndim)
        gamma_b = self.gamma.data.reshape(pshape)
        beta_b = self.beta.data.reshape(pshape)

        if self.training:
            # For 4-D inputs the spatial positions contribute to the batch
            # statistics, so a single image with H*W >= 2 is still well posed.
            n = int(np.prod([x.shape[ax] for ax in axes]))
            if n < 2:
                raise DegenerateBatchError("batchnorm train mode needs >= 2 elements per channel")
            mu = x.data.mean(axis=axes, keepdims=True)
            centered = x.data - mu
            var = np.mean(centered * centered, axis=axes, keepdims=True)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = centered * inv
            if self.update_running:
                m = self.momentum
                batch_var = var.reshape(self.channels) * (n / (n - 1))
                self.running_mean[...] = (1 - m) * self.running_mean + m * mu.reshape(self.channels)
                self.running_var[...] = (1 - m) * self.running_var + m * batch_var

            def bwd(g):
                dbeta = g.sum(axis=axes).reshape(self.beta.shape)
                dgamma = (g * xhat).sum(axis=axes).reshape(self.gamma.shape)
                gm = g.mean(axis=axes, keepdims=True)
                gx = (g * xhat).mean(axis=axes, keepdims=True)
                dx = (gamma_b * inv) * (g - gm - xhat * gx)
                return dx, dgamma, dbeta

            return T.apply_op(xhat * gamma_b + beta_b, (x, self.gamma, self.beta), bwd)

        inv = 1.0 / np.sqrt(self.running_var + self.eps).reshape(pshape)
        mean = self.running_mean.reshape(pshape)
        xhat_eval = (x.data - mean) * inv

        def bwd_eval(g):
            dbeta = g.sum(axis=axes).reshape(self.beta.shape)
            dgamma = (g * xhat_eval).sum(axis=axes).reshape(self.gamma.shape)
            return g * (gamma_b * inv), dgamma, dbeta

        return T.apply_op(xhat_eval * gamma_b + beta_b, (x, self.gamma, self.beta), bwd_eval)


class ResidualBlock:
    """conv -> BN -> ReLU -> conv1x1 -> BN, plus a (projected) skip, with the
    final ReLU applied after the sum.

    ``spatial=True`` makes the first conv a 3x3 (used by the toy backbone,
    whose stem is otherwise the only spatially-aware layer); the branch
    blocks stay pointwise."""

    def __init__(self, reg: ParamRegistry, name: str, c_in: int, c_out: int, rng,
                 spatial: bool = False):
        if spatial:
            self.conv1 = Conv3x3(reg, f"{name}.conv1", c_in, c_out, rng, stride=1)
        else:
            self.conv1 = Conv1x1(reg, f"{name}.conv1", c_in, c_out, rng)
        self.bn1 = BatchNorm(reg, f"{name}.bn1", c_out)
        self.conv2 = Conv1x1(reg, f"{name}.conv2", c_out, c_out, rng)
        self.bn2 = BatchNorm(reg, f"{name}.bn2", c_out)
        self.proj = Conv1x1(reg, f"{name}.proj", c_in, c_out, rng) if c_in != c_out else None
        self.norms = [self.bn1, self.bn2]

    def __call__(self, x: Tensor) -> Tensor:
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = self.proj(x) if self.proj is not None else x
        return T.relu(h + skip)

"""A small sequential network runtime hosting blocked photonic layers.

Photonic layers train only their attenuator values (the singular-value
subspace); electronic layers carry ordinary dense parameters. Backward passes
through photonic layers use reverse optical passes, optionally sparsified by a
:class:`~ptclearn.sampling.SamplingPlan`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .blocked import BlockedLinear
from .cost import LayerDims
from .noise import NoiseConfig
from .sampling import SamplingPlan, build_column_mask, build_feedback_mask


class ShapeError(ValueError):
    pass


class NumericalAbort(ArithmeticError):
    """Non-finite activations, losses or gradients."""


# -- im2col ------------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kernel: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(B, C*K*K, H'*W')``; column order is (c, ki, kj)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"im2col expects (B, C, H, W), got shape {x.shape}")
    b, c, h, w = x.shape
    ho, wo = conv_output_size(h, kernel, stride, pad), conv_output_size(w, kernel, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kernel} / stride {stride} / pad {pad} leaves no output for input {h}x{w}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((b, c, kernel, kernel, ho, wo))
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(b, c * kernel * kernel, ho * wo)


def col2im(cols: np.ndarray, shape: tuple, kernel: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto a ``shape`` image batch."""
    b, c, h, w = shape
    ho, wo = conv_output_size(h, kernel, stride, pad), conv_output_size(w, kernel, stride, pad)
    cols = np.asarray(cols).reshape(b, c, kernel, kernel, ho, wo)
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for i in range(kernel):
        for j in range(kernel):
            xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w] if pad else xp


# -- layers ------------------------------------------------------------------


@dataclass
class Param:
    """An electronic parameter array with its gradient."""

    value: np.ndarray
    grad: np.ndarray | None = None
    decay: bool = True


class Layer:
    photonic = False

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dy, need_input_grad: bool = True):
        raise NotImplementedError

    def params(self) -> list[Param]:
        return []

    def output_shape(self, shape: tuple) -> tuple:
        return shape


def _rng_for(seed, *keys) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, keys)])


class _PhotonicMixin:
    """Shared subspace-training machinery for photonic linear/conv layers."""

    photonic = True
    last_masks = (None, None, False)  # (column mask, feedback mask, feedback ran)
    plan: SamplingPlan | None = None
    rng_key: tuple = (0,)
    step = 0

    def configure_sampling(self, plan: SamplingPlan | None, *rng_key):
        self.plan = plan
        self.rng_key = rng_key

    def _feedback_mask(self):
        if self.plan is None:
            return None, 1.0
        norms = np.sum(self.ptc.sigma_grid() ** 2, axis=-1).T  # (Q, P)
        return build_feedback_mask(norms, self.plan, _rng_for(*self.rng_key, self.step, 0))

    def sigma_values(self) -> np.ndarray:
        return self.ptc.read_sigma()

    def write_sigma(self, values: np.ndarray):
        self.ptc.set_sigma(values)

    def init_random(self, rng: np.random.Generator, fan_in: int):
        """Program a Kaiming-normal random weight (no calibration reference)."""
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(self.ptc.out_features, self.ptc.in_features))
        self.ptc.set_weight(w, offset=False)


class PhotonicLinear(_PhotonicMixin, Layer):
    def __init__(self, in_features: int, out_features: int, k: int = 9, noise: NoiseConfig | None = None, stream=(), bias: bool = True):
        self.ptc = BlockedLinear(in_features, out_features, k, noise, stream)
        self.bias = Param(np.zeros(out_features), decay=False) if bias else None
        self.sigma_grad = None
        self.last_fidelity_inputs = None

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.ptc.in_features:
            raise ShapeError(f"PhotonicLinear expects (B, {self.ptc.in_features}), got {x.shape}")
        y, xv = self.ptc.matmul(x, keep_intermediate=True)
        if train:
            self._xv = xv
        return y + self.bias.value if self.bias is not None else y

    def backward(self, dy, need_input_grad=True):
        if self.bias is not None:
            self.bias.grad = dy.sum(axis=0)
        self.sigma_grad = self.ptc.sigma_grad(self._xv, dy)
        dx, mask = None, None
        if need_input_grad:
            mask, scale = self._feedback_mask()
            dx = self.ptc.feedback(dy, mask, scale)
        self.last_masks = (None, mask, need_input_grad)
        self.step += 1
        return dx

    def params(self):
        return [self.bias] if self.bias is not None else []

    def output_shape(self, shape):
        if tuple(shape) != (self.ptc.in_features,):
            raise ShapeError(f"linear expects ({self.ptc.in_features},), got {shape}")
        return (self.ptc.out_features,)

    def layer_dims(self) -> LayerDims:
        return LayerDims.linear(self.ptc.in_features, self.ptc.out_features, self.ptc.k)


class PhotonicConv2d(_PhotonicMixin, Layer):
    """Convolution lowered to a blocked ``C_out x C_in K^2`` matrix via im2col."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, k=9, noise=None, stream=(), bias=True):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.ptc = BlockedLinear(in_channels * kernel * kernel, out_channels, k, noise, stream)
        self.bias = Param(np.zeros(out_channels), decay=False) if bias else None
        self.sigma_grad = None

    def output_shape(self, shape):
        c, h, w = shape
        if c != self.in_channels:
            raise ShapeError(f"conv expects {self.in_channels} channels, got {c}")
        ho = conv_output_size(h, self.kernel, self.stride, self.padding)
        wo = conv_output_size(w, self.kernel, self.stride, self.padding)
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv leaves no output for {h}x{w}")
        return (self.out_channels, ho, wo)

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise ShapeError(f"PhotonicConv2d expects (B, C, H, W), got {x.shape}")
        b = x.shape[0]
        _, ho, wo = self.output_shape(x.shape[1:])
        cols = im2col(x, self.kernel, self.stride, self.padding)  # (B, CKK, L)
        flat = cols.transpose(0, 2, 1).reshape(b * ho * wo, -1)
        y, xv = self.ptc.matmul(flat, keep_intermediate=True)
        if train:
            self._xv, self._in_shape, self._out_hw = xv, x.shape, (ho, wo)
        y = y.reshape(b, ho * wo, self.out_channels).transpose(0, 2, 1).reshape(b, self.out_channels, ho, wo)
        return y + self.bias.value[None, :, None, None] if self.bias is not None else y

    def backward(self, dy, need_input_grad=True):
        b = dy.shape[0]
        ho, wo = self._out_hw
        if self.bias is not None:
            self.bias.grad = dy.sum(axis=(0, 2, 3))
        dcols = dy.reshape(b, self.out_channels, ho * wo).transpose(0, 2, 1)  # (B, L, C_out)
        xv = self._xv.reshape((b, ho * wo) + self._xv.shape[1:])
        keep = np.ones(ho * wo, dtype=bool)
        alpha_c = 1.0
        if self.plan is not None and self.plan.column_alpha_c < 1:
            keep = build_column_mask(ho, wo, self.plan.column_alpha_c, _rng_for(*self.rng_key, self.step, 1))
            alpha_c = keep.mean()
        kept = int(keep.sum())
        g = self.ptc.sigma_grad(
            xv[:, keep].reshape((-1,) + self._xv.shape[1:]), dcols[:, keep].reshape(b * kept, -1), columns=b * kept
        )
        if self.plan is not None and self.plan.column_norm == "exp":
            g = g / alpha_c
        elif self.plan is not None and self.plan.column_norm == "var":
            g = g / math.sqrt(alpha_c)
        self.sigma_grad = g
        dx, mask = None, None
        if need_input_grad:
            mask, scale = self._feedback_mask()
            dx_cols = self.ptc.feedback(dcols.reshape(b * ho * wo, -1), mask, scale)
            dx_cols = dx_cols.reshape(b, ho * wo, -1).transpose(0, 2, 1)
            dx = col2im(dx_cols, self._in_shape, self.kernel, self.stride, self.padding)
        self.last_masks = (keep, mask, need_input_grad)
        self.step += 1
        return dx

    def layer_dims(self) -> LayerDims:
        """Profiler dimensions for the most recent input size."""
        _, _, h, w = self._in_shape
        ho, wo = self._out_hw
        return LayerDims(self.out_channels, self.in_channels, self.kernel, h, w, ho, wo, self.ptc.k)

    def params(self):
        return [self.bias] if self.bias is not None else []


class Linear(Layer):
    """Electronic dense layer ``y = x W^T + b``."""

    def __init__(self, in_features, out_features, rng=None, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Param(rng.normal(0.0, math.sqrt(2.0 / in_features), size=(out_features, in_features)))
        self.bias = Param(np.zeros(out_features), decay=False) if bias else None

    def forward(self, x, train=False):
        if train:
            self._x = x
        y = x @ self.weight.value.T
        return y + self.bias.value if self.bias is not None else y

    def backward(self, dy, need_input_grad=True):
        self.weight.grad = dy.T @ self._x
        if self.bias is not None:
            self.bias.grad = dy.sum(axis=0)
        return dy @ self.weight.value if need_input_grad else None

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def output_shape(self, shape):
        if shape != (self.weight.value.shape[1],):
            raise ShapeError(f"Linear expects ({self.weight.value.shape[1]},), got {shape}")
        return (self.weight.value.shape[0],)


class Conv2d(Layer):
    """Electronic convolution via im2col."""

    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None, bias=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.weight = Param(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(out_channels, fan_in)))
        self.bias = Param(np.zeros(out_channels), decay=False) if bias else None
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding

    output_shape = PhotonicConv2d.output_shape

    def forward(self, x, train=False):
        b = x.shape[0]
        _, ho, wo = self.output_shape(x.shape[1:])
        cols = im2col(x, self.kernel, self.stride, self.padding)
        if train:
            self._cols, self._in_shape = cols, x.shape
        y = np.einsum("oc,bcl->bol", self.weight.value, cols).reshape(b, self.out_channels, ho, wo)
        return y + self.bias.value[None, :, None, None] if self.bias is not None else y

    def backward(self, dy, need_input_grad=True):
        b = dy.shape[0]
        d = dy.reshape(b, self.out_channels, -1)
        self.weight.grad = np.einsum("bol,bcl->oc", d, self._cols)
        if self.bias is not None:
            self.bias.grad = dy.sum(axis=(0, 2, 3))
        if not need_input_grad:
            return None
        return col2im(np.einsum("oc,bol->bcl", self.weight.value, d), self._in_shape, self.kernel, self.stride, self.padding)

    def params(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])


class ReLU(Layer):
    def forward(self, x, train=False):
        if train:
            self._mask = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dy, need_input_grad=True):
        return dy * self._mask


class Flatten(Layer):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy, need_input_grad=True):
        return dy.reshape(self._shape)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class AvgPool2d(Layer):
    """Non-overlapping average pooling (trailing rows/cols that do not fill a window are dropped)."""

    def __init__(self, kernel: int):
        self.kernel = kernel

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.kernel or w < self.kernel:
            raise ShapeError(f"pool {self.kernel} larger than input {h}x{w}")
        return (c, h // self.kernel, w // self.kernel)

    def forward(self, x, train=False):
        b, c, h, w = x.shape
        k = self.kernel
        ho, wo = h // k, w // k
        self._shape = x.shape
        return x[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k).mean(axis=(3, 5))

    def backward(self, dy, need_input_grad=True):
        k = self.kernel
        dx = np.zeros(self._shape)
        ho, wo = dy.shape[2:]
        dx[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)
        return dx


def _adaptive_bins(size: int, out: int):
    return [(math.floor(i * size / out), math.ceil((i + 1) * size / out)) for i in range(out)]


class AdaptiveAvgPool2d(Layer):
    """Average pooling to a fixed ``out x out`` grid with possibly overlapping bins."""

    def __init__(self, out: int = 2):
        self.out = out

    def output_shape(self, shape):
        c, h, w = shape
        if h < self.out or w < self.out:
            raise ShapeError(f"adaptive pool to {self.out} needs input >= {self.out}, got {h}x{w}")
        return (c, self.out, self.out)

    def forward(self, x, train=False):
        self._shape = x.shape
        h, w = x.shape[2:]
        y = np.empty(x.shape[:2] + (self.out, self.out))
        for i, (h0, h1) in enumerate(_adaptive_bins(h, self.out)):
            for j, (w0, w1) in enumerate(_adaptive_bins(w, self.out)):
                y[:, :, i, j] = x[:, :, h0:h1, w0:w1].mean(axis=(2, 3))
        return y

    def backward(self, dy, need_input_grad=True):
        dx = np.zeros(self._shape)
        h, w = self._shape[2:]
        for i, (h0, h1) in enumerate(_adaptive_bins(h, self.out)):
            for j, (w0, w1) in enumerate(_adaptive_bins(w, self.out)):
                dx[:, :, h0:h1, w0:w1] += dy[:, :, i, j, None, None] / ((h1 - h0) * (w1 - w0))
        return dx


class Residual(Layer):
    """``y = x + body(x)``; the body must preserve shape."""

    def __init__(self, *layers: Layer):
        self.body = Sequential(*layers)

    @property
    def photonic_layers(self):
        return self.body.photonic_layers

    def output_shape(self, shape):
        out = self.body.output_shape(shape)
        if out != shape:
            raise ShapeError(f"residual body changes shape {shape} -> {out}")
        return shape

    def forward(self, x, train=False):
        return x + self.body.forward(x, train)

    def backward(self, dy, need_input_grad=True):
        return dy + self.body.backward(dy, need_input_grad=True)

    def params(self):
        return self.body.params()


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        self.layers = list(layers)

    @property
    def photonic_layers(self) -> list:
        out = []
        for layer in self.layers:
            if layer.photonic:
                out.append(layer)
            elif hasattr(layer, "photonic_layers"):
                out.extend(layer.photonic_layers)
        return out

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(tuple(shape))
        return shape

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train)
        if not np.all(np.isfinite(x)):
            raise NumericalAbort("non-finite activations in forward pass")
        return x

    def backward(self, dy, need_input_grad=False):
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            dy = self.layers[i].backward(dy, need_input_grad=(i > 0 or need_input_grad))
        return dy

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def profile_dims(self, input_shape: tuple) -> list[tuple[LayerDims, bool]]:
        """Profiler dimensions of every photonic layer and whether it receives error feedback.

        The first layer of the model never propagates a gradient to the data.
        """
        out = []
        shape = tuple(input_shape)
        for i, layer in enumerate(self.layers):
            if isinstance(layer, PhotonicLinear):
                out.append((LayerDims.linear(layer.ptc.in_features, layer.ptc.out_features, layer.ptc.k), i > 0))
            elif isinstance(layer, PhotonicConv2d):
                c, h, w = shape
                _, ho, wo = layer.output_shape(shape)
                out.append((LayerDims(layer.out_channels, c, layer.kernel, h, w, ho, wo, layer.ptc.k), i > 0))
            elif hasattr(layer, "photonic_layers") and layer.photonic_layers:
                raise ShapeError("profiling photonic layers inside nested blocks is not supported")
            shape = tuple(layer.output_shape(shape))
        return out

    def configure_sampling(self, plan: SamplingPlan | None, seed: int = 0, stage: int = 3):
        for i, layer in enumerate(self.photonic_layers):
            layer.configure_sampling(plan, seed, stage, i)

    def energy(self) -> dict:
        total = {"forward": 0, "weight_grad": 0, "feedback": 0}
        for layer in self.photonic_layers:
            for key, value in layer.ptc.energy.items():
                total[key] += value
        return total


# -- loss and optimizer --------------------------------------------------------


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b


def cosine_lr(t: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        return lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1 + math.cos(math.pi * min(t, total) / total))


class AdamW:
    """Adam with decoupled weight decay over a list of arrays updated in place or via callbacks."""

    def __init__(self, lr=0.002, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state: dict[int, tuple] = {}
        self.t = 0

    def begin_step(self):
        self.t += 1

    def update(self, key: int, value: np.ndarray, grad: np.ndarray, decay: bool = True, lr: float | None = None) -> np.ndarray:
        """Return the updated copy of ``value``; call :meth:`begin_step` once per step first."""
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        m, v = self.state.get(key, (np.zeros_like(value), np.zeros_like(value)))
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        self.state[key] = (m, v)
        mhat = m / (1 - b1**self.t)
        vhat = v / (1 - b2**self.t)
        out = value * (1 - lr * self.weight_decay) if decay and self.weight_decay else value.copy()
        return out - lr * mhat / (np.sqrt(vhat) + self.eps)

    def step_model(self, model: Sequential, lr: float | None = None, train_electronic: bool = True):
        """Update photonic attenuators (through re-programming) and electronic parameters."""
        self.begin_step()
        for i, layer in enumerate(model.photonic_layers):
            sigma = layer.sigma_values()
            layer.write_sigma(self.update(("sigma", i), sigma, layer.sigma_grad, True, lr))
        if train_electronic:
            for j, p in enumerate(model.params()):
                if p.grad is not None:
                    p.value[...] = self.update(("param", j), p.value, p.grad, p.decay, lr)

"""
Minimal differentiable neural-network kernel

Layers, a sequential container, Adam / SGD-momentum optimizers, weight clipping
and finite-difference gradient verification, all on numpy arrays laid out as
(N, features) for dense data and (N, C, H, W) for images.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class ShapeError(ValueError):
    """Input or gradient shape does not fit a layer or optimizer."""


class GradientCheckError(RuntimeError):
    """Analytic gradients could not be verified."""


class NonFiniteError(FloatingPointError):
    """A forward or backward pass produced NaN or infinity."""


def _fan_in_std(fan_in):
    return float(np.sqrt(2.0 / max(fan_in, 1)))


class Layer:
    """Base layer: params and grads are dicts with matching keys and shapes."""

    kind = 'base'

    def __init__(self, name=None):
        self.name = name or self.kind
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def _init_param(self, key, value):
        self.params[key] = value
        self.grads[key] = np.zeros_like(value)

    def output_shape(self, input_shape):
        return tuple(input_shape)

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, x, upstream, training=False):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


class Dense(Layer):
    kind = 'dense'

    def __init__(self, in_features, out_features, use_bias=True, weight_std=None,
                 rng=None, dtype=np.float64, name=None):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        std = weight_std if weight_std is not None else _fan_in_std(in_features)
        self.in_features = in_features
        self.out_features = out_features
        self.use_bias = use_bias
        self._init_param('weight', (rng.standard_normal((in_features, out_features)) * std).astype(dtype))
        if use_bias:
            self._init_param('bias', np.zeros(out_features, dtype=dtype))

    def output_shape(self, input_shape):
        if len(input_shape) != 2 or input_shape[1] != self.in_features:
            raise ShapeError(
                f"layer '{self.name}' ({self.kind}) expects input (N, {self.in_features}), "
                f"got {tuple(input_shape)}")
        return (input_shape[0], self.out_features)

    def forward(self, x, training=False):
        out = x @ self.params['weight']
        if self.use_bias:
            out = out + self.params['bias']
        return out

    def backward(self, x, upstream, training=False):
        self.grads['weight'] = x.T @ upstream
        if self.use_bias:
            self.grads['bias'] = upstream.sum(axis=0)
        return upstream @ self.params['weight'].T


def _pair(value):
    return (value, value) if isinstance(value, int) else tuple(value)


class Conv2d(Layer):
    """Cross-correlation with weight (C_out, C_in, kh, kw)."""

    kind = 'conv2d'

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 use_bias=True, weight_std=None, rng=None, dtype=np.float64, name=None):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = _pair(kernel_size)
        std = weight_std if weight_std is not None else _fan_in_std(in_channels * kh * kw)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.use_bias = use_bias
        self._init_param('weight', (rng.standard_normal((out_channels, in_channels, kh, kw)) * std).astype(dtype))
        if use_bias:
            self._init_param('bias', np.zeros(out_channels, dtype=dtype))

    def output_shape(self, input_shape):
        kh, kw = self.kernel_size
        if len(input_shape) != 4 or input_shape[1] != self.in_channels:
            raise ShapeError(
                f"layer '{self.name}' ({self.kind}) expects input (N, {self.in_channels}, H, W), "
                f"got {tuple(input_shape)}")
        n, _, h, w = input_shape
        h_out = (h + 2 * self.padding - kh) // self.stride + 1
        w_out = (w + 2 * self.padding - kw) // self.stride + 1
        if h_out < 1 or w_out < 1:
            raise ShapeError(
                f"layer '{self.name}' ({self.kind}) kernel {self.kernel_size} does not fit "
                f"input {tuple(input_shape)}")
        return (n, self.out_channels, h_out, w_out)

    def _windows(self, x):
        p, s = self.padding, self.stride
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        windows = np.lib.stride_tricks.sliding_window_view(xp, self.kernel_size, axis=(2, 3))
        return xp, windows[:, :, ::s, ::s]

    def forward(self, x, training=False):
        _, windows = self._windows(x)
        # windows: (N, C_in, H_out, W_out, kh, kw)
        out = np.tensordot(windows, self.params['weight'], axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
        if self.use_bias:
            out = out + self.params['bias'][None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, x, upstream, training=False):
        xp, windows = self._windows(x)
        weight = self.params['weight']
        s, p = self.stride, self.padding
        kh, kw = self.kernel_size
        _, _, h_out, w_out = upstream.shape
        self.grads['weight'] = np.tensordot(upstream, windows, axes=([0, 2, 3], [0, 2, 3]))
        if self.use_bias:
            self.grads['bias'] = upstream.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(upstream, weight[:, :, i, j], axes=([1], [0]))
                dxp[:, :, i:i + s * (h_out - 1) + 1:s, j:j + s * (w_out - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        if p:
            return dxp[:, :, p:-p, p:-p]
        return dxp


class Conv2dTranspose(Layer):
    """Transposed convolution with weight (C_in, C_out, kh, kw)."""

    kind = 'conv2d_transpose'

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 use_bias=True, weight_std=None, rng=None, dtype=np.float64, name=None):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        kh, kw = _pair(kernel_size)
        std = weight_std if weight_std is not None else _fan_in_std(in_channels * kh * kw)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.use_bias = use_bias
        self._init_param('weight', (rng.standard_normal((in_channels, out_channels, kh, kw)) * std).astype(dtype))
        if use_bias:
            self._init_param('bias', np.zeros(out_channels, dtype=dtype))

    def output_shape(self, input_shape):
        kh, kw = self.kernel_size
        if len(input_shape) != 4 or input_shape[1] != self.in_channels:
            raise ShapeError(
                f"layer '{self.name}' ({self.kind}) expects input (N, {self.in_channels}, H, W), "
                f"got {tuple(input_shape)}")
        n, _, h, w = input_shape
        h_out = (h - 1) * self.stride + kh - 2 * self.padding
        w_out = (w - 1) * self.stride + kw - 2 * self.padding
        if h_out < 1 or w_out < 1:
            raise ShapeError(
                f"layer '{self.name}' ({self.kind}) padding {self.padding} leaves no output for "
                f"input {tuple(input_shape)}")
        return (n, self.out_channels, h_out, w_out)

    def forward(self, x, training=False):
        n, _, h, w = x.shape
        s, p = self.stride, self.padding
        kh, kw = self.kernel_size
        weight = self.params['weight']
        full = np.zeros((n, self.out_channels, (h - 1) * s + kh, (w - 1) * s + kw), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(x, weight[:, :, i, j], axes=([1], [0]))
                full[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (w - 1) + 1:s] += contrib.transpose(0, 3, 1, 2)
        out = full[:, :, p:full.shape[2] - p, p:full.shape[3] - p]
        if self.use_bias:
            out = out + self.params['bias'][None, :, None, None]
        return np.ascontiguousarray(out)

    def backward(self, x, upstream, training=False):
        _, _, h, w = x.shape
        s, p = self.stride, self.padding
        kh, kw = self.kernel_size
        weight = self.params['weight']
        gfull = np.pad(upstream, ((0, 0), (0, 0), (p, p), (p, p))) if p else upstream
        dx = np.zeros_like(x)
        dweight = np.zeros_like(weight)
        for i in range(kh):
            for j in range(kw):
                gslice = gfull[:, :, i:i + s * (h - 1) + 1:s, j:j + s * (w - 1) + 1:s]
                dx += np.tensordot(gslice, weight[:, :, i, j], axes=([1], [1])).transpose(0, 3, 1, 2)
                dweight[:, :, i, j] = np.tensordot(x, gslice, axes=([0, 2, 3], [0, 2, 3]))
        self.grads['weight'] = dweight
        if self.use_bias:
            self.grads['bias'] = upstream.sum(axis=(0, 2, 3))
        return dx


class LeakyReLU(Layer):
    kind = 'leaky_relu'

    def __init__(self, slope=0.2, name=None):
        super().__init__(name)
        self.slope = slope

    def forward(self, x, training=False):
        return np.where(x > 0, x, self.slope * x)

    def backward(self, x, upstream, training=False):
        return np.where(x > 0, upstream, self.slope * upstream)


class Tanh(Layer):
    kind = 'tanh'

    def forward(self, x, training=False):
        return np.tanh(x)

    def backward(self, x, upstream, training=False):
        return upstream * (1.0 - np.tanh(x) ** 2)


class Sigmoid(Layer):
    kind = 'sigmoid'

    def forward(self, x, training=False):
        return _sigmoid(x)

    def backward(self, x, upstream, training=False):
        y = _sigmoid(x)
        return upstream * y * (1.0 - y)


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class BatchNorm2d(Layer):
    """Per-channel batch normalization; batch statistics in training, running ones at inference."""

    kind = 'batchnorm2d'

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float64, name=None):
        super().__init__(name)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self._init_param('gamma', np.ones(channels, dtype=dtype))
        self._init_param('beta', np.zeros(channels, dtype=dtype))
        self.buffers['running_mean'] = np.zeros(channels, dtype=dtype)
        self.buffers['running_var'] = np.ones(channels, dtype=dtype)

    def output_shape(self, input_shape):
        if len(input_shape) != 4 or input_shape[1] != self.channels:
            raise ShapeError(
                f"layer '{self.name}' ({self.kind}) expects input (N, {self.channels}, H, W), "
                f"got {tuple(input_shape)}")
        return tuple(input_shape)

    def _stats(self, x, training):
        if training:
            return x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))
        return self.buffers['running_mean'], self.buffers['running_var']

    def forward(self, x, training=False):
        mean, var = self._stats(x, training)
        x_hat = (x - mean[None, :, None, None]) / np.sqrt(var + self.eps)[None, :, None, None]
        return self.params['gamma'][None, :, None, None] * x_hat + self.params['beta'][None, :, None, None]

    def backward(self, x, upstream, training=False):
        mean, var = self._stats(x, training)
        inv_std = (1.0 / np.sqrt(var + self.eps))[None, :, None, None]
        x_hat = (x - mean[None, :, None, None]) * inv_std
        gamma = self.params['gamma'][None, :, None, None]
        self.grads['gamma'] = (upstream * x_hat).sum(axis=(0, 2, 3))
        self.grads['beta'] = upstream.sum(axis=(0, 2, 3))
        g_hat = upstream * gamma
        if not training:
            return g_hat * inv_std
        count = x.shape[0] * x.shape[2] * x.shape[3]
        return (inv_std / count) * (
            count * g_hat
            - g_hat.sum(axis=(0, 2, 3), keepdims=True)
            - x_hat * (g_hat * x_hat).sum(axis=(0, 2, 3), keepdims=True)
        )

    def update_running_stats(self, x):
        m = self.momentum
        self.buffers['running_mean'] = (1 - m) * self.buffers['running_mean'] + m * x.mean(axis=(0, 2, 3))
        self.buffers['running_var'] = (1 - m) * self.buffers['running_var'] + m * x.var(axis=(0, 2, 3))


class Flatten(Layer):
    """Flattens to (N, -1), or reshapes to (N, *out_shape) when out_shape is given."""

    kind = 'flatten'

    def __init__(self, out_shape=None, name=None):
        super().__init__(name)
        self.out_shape = tuple(out_shape) if out_shape is not None else None

    def output_shape(self, input_shape):
        n = input_shape[0]
        size = int(np.prod(input_shape[1:]))
        if self.out_shape is None:
            return (n, size)
        if int(np.prod(self.out_shape)) != size:
            raise ShapeError(
                f"layer '{self.name}' ({self.kind}) cannot reshape {tuple(input_shape)} "
                f"to (N, {', '.join(map(str, self.out_shape))})")
        return (n, *self.out_shape)

    def forward(self, x, training=False):
        return x.reshape(self.output_shape(x.shape))

    def backward(self, x, upstream, training=False):
        return upstream.reshape(x.shape)


def layer_forward(layer, x, training=False):
    """Validate shapes and run the layer; pure in (params, input)."""
    layer.output_shape(x.shape)
    out = layer.forward(x, training=training)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"layer '{layer.name}' ({layer.kind}) produced non-finite output")
    return out


def layer_backward(layer, x, upstream, training=False):
    """Return the input gradient; fills layer.grads as a side effect."""
    expected = layer.output_shape(x.shape)
    if tuple(upstream.shape) != tuple(expected):
        raise ShapeError(
            f"layer '{layer.name}' ({layer.kind}) upstream gradient {tuple(upstream.shape)} "
            f"does not match output shape {tuple(expected)}")
    dx = layer.backward(x, upstream, training=training)
    if not np.all(np.isfinite(dx)):
        raise NonFiniteError(f"layer '{layer.name}' ({layer.kind}) produced non-finite gradient")
    return dx


def grad_check(layer, x, step=1e-5, training=True, seed=0):
    """
    Compare analytic gradients against central finite differences.

    The scalar objective is sum(output * r) for a fixed random r. Returns the
    maximum over all parameter and input entries of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    """
    if not 1e-6 <= step <= 1e-4:
        raise ValueError(f"finite-difference step must be in [1e-6, 1e-4], got {step}")
    x = np.array(x, dtype=np.float64)
    for key, value in layer.params.items():
        if value.dtype != np.float64:
            raise GradientCheckError(f"layer '{layer.name}' param '{key}' is {value.dtype}, need float64")

    out = layer_forward(layer, x, training)
    r = np.random.default_rng(seed).standard_normal(out.shape)
    analytic_x = layer_backward(layer, x, r, training)
    analytic = {key: grad.copy() for key, grad in layer.grads.items()}
    for key, grad in analytic.items():
        if not np.all(np.isfinite(grad)):
            raise GradientCheckError(f"layer '{layer.name}' analytic gradient '{key}' is not finite")

    def objective():
        return float(np.sum(layer.forward(x, training=training) * r))

    def numeric_grad(array):
        grad = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            original = array[idx]
            array[idx] = original + step
            plus = objective()
            array[idx] = original - step
            minus = objective()
            array[idx] = original
            grad[idx] = (plus - minus) / (2 * step)
        return grad

    def worst(a, n):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-12)
        return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0

    error = worst(analytic_x, numeric_grad(x))
    for key, value in layer.params.items():
        error = max(error, worst(analytic[key], numeric_grad(value)))
    logger.debug(f"🔍 grad_check {layer.kind}: max relative error {error:.3e}")
    return error


class Network:
    """
    Sequential container.

    forward returns the output together with a tape of (layer, input) pairs;
    backward walks the tape in reverse. No per-call state is stored on the
    network, so inference on one instance is safe across threads.
    """

    def __init__(self, layers, name='network'):
        self.layers = list(layers)
        self.name = name

    def forward(self, x, training=False):
        tape = []
        for layer in self.layers:
            tape.append((layer, x))
            out = layer_forward(layer, x, training)
            if training and isinstance(layer, BatchNorm2d):
                layer.update_running_stats(x)
            x = out
        return x, tape

    def predict(self, x):
        out, _ = self.forward(x, training=False)
        return out

    def backward(self, tape, upstream, training=True):
        grad = upstream
        for layer, x in reversed(tape):
            grad = layer_backward(layer, x, grad, training)
        return grad

    def parameters(self):
        return [layer.params[key] for layer in self.layers for key in layer.params]

    def gradients(self):
        return [layer.grads[key] for layer in self.layers for key in layer.params]

    def state_dict(self):
        state = {}
        for index, layer in enumerate(self.layers):
            for key, value in list(layer.params.items()) + list(layer.buffers.items()):
                state[f"{index}.{layer.kind}.{key}"] = value.copy()
        return state

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = sorted(set(expected) - set(state))
        unexpected = sorted(set(state) - set(expected))
        if missing or unexpected:
            raise ShapeError(f"{self.name}: state mismatch, missing={missing}, unexpected={unexpected}")
        for index, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for key in store:
                    value = np.asarray(state[f"{index}.{layer.kind}.{key}"])
                    if value.shape != store[key].shape:
                        raise ShapeError(
                            f"{self.name}: '{index}.{layer.kind}.{key}' has shape {value.shape}, "
                            f"expected {store[key].shape}")
                    store[key] = value.astype(store[key].dtype, copy=True)
            for key in layer.params:
                layer.grads[key] = np.zeros_like(layer.params[key])


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ('adam', 'sgd_momentum'):
            raise ValueError(f"unknown optimizer kind '{self.kind}'")
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")


def make_optimizer(kind, params, **hyper):
    """Create an OptimizerState with zeroed accumulators matching params."""
    state = OptimizerState(kind=kind, **hyper)
    if kind == 'adam':
        state.moments = {'m': [np.zeros_like(p) for p in params], 'v': [np.zeros_like(p) for p in params]}
    else:
        state.moments = {'velocity': [np.zeros_like(p) for p in params]}
    return state


def optimizer_step(state, params, grads):
    """Apply one update in place to every array in params."""
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for accumulators in state.moments.values():
        if len(accumulators) != len(params):
            raise ShapeError(f"optimizer tracks {len(accumulators)} tensors, got {len(params)}")
    state.step_count += 1
    t = state.step_count
    for index, (param, grad) in enumerate(zip(params, grads)):
        if param.shape != grad.shape:
            raise ShapeError(f"parameter {index} shape {param.shape} != gradient shape {grad.shape}")
        if state.kind == 'adam':
            m = state.moments['m'][index]
            v = state.moments['v'][index]
            m *= state.beta1
            m += (1 - state.beta1) * grad
            v *= state.beta2
            v += (1 - state.beta2) * grad * grad
            m_hat = m / (1 - state.beta1 ** t)
            v_hat = v / (1 - state.beta2 ** t)
            param -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype)
        else:
            velocity = state.moments['velocity'][index]
            velocity *= state.momentum
            velocity += grad
            param -= (state.lr * velocity).astype(param.dtype)
    return params


def clip_weights(params, c):
    """Clamp every entry of each array into [-c, c] in place."""
    if c <= 0:
        raise ValueError(f"clip constant must be > 0, got {c}")
    if isinstance(params, np.ndarray):
        np.clip(params, -c, c, out=params)
        return params
    for param in params:
        np.clip(param, -c, c, out=param)
    return params

"""From-scratch neural network layers with analytic backward passes.

Everything operates on plain numpy arrays; convolutions use im2col so the
heavy lifting is matrix multiplication. All layers are gradient-checked
against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError


class Param:
    """A learnable array and its accumulated gradient."""

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)

    def zero_grad(self):
        self.grad[...] = 0.0


class Layer:
    """Base layer: forward caches what backward needs."""

    training = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> dict[str, Param]:
        return {}

    def state(self) -> dict[str, np.ndarray]:
        """All persistent arrays (parameters plus running statistics)."""
        return {name: p.value for name, p in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters().items():
            p.value = np.array(state[name])
            p.grad = np.zeros_like(p.value)

    def astype(self, dtype) -> None:
        for p in self.parameters().values():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, k, k, h, w), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(n, c * k * k, h * w)


def _col2im(dcols: np.ndarray, x_shape: tuple, k: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    d = dcols.reshape(n, c, k, k, h, w)
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + w] += d[:, :, i, j]
    return dxp[:, :, pad : pad + h, pad : pad + w]


class Conv2d(Layer):
    """Same-shape 2-D convolution (stride 1, zero padding kernel//2)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int = 3,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        bound = np.sqrt(6.0 / fan_in)
        self.kernel = kernel
        self.pad = kernel // 2
        self.in_channels = in_channels
        self.weight = Param(rng.uniform(-bound, bound,
                                        (out_channels, in_channels, kernel, kernel)))
        self.bias = Param(np.zeros(out_channels))
        self._cache = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv2d expected (N,{self.in_channels},H,W), got {x.shape}")
        n, _, h, w = x.shape
        cols = _im2col(x, self.kernel, self.pad)
        wmat = self.weight.value.reshape(self.weight.value.shape[0], -1)
        # (N,P,F) @ (F,O) -> (N,P,O), BLAS-backed
        out = cols.transpose(0, 2, 1) @ wmat.T.astype(x.dtype, copy=False)
        out += self.bias.value.astype(x.dtype, copy=False)
        self._cache = (x.shape, cols)
        return out.transpose(0, 2, 1).reshape(n, -1, h, w)

    def backward(self, grad):
        x_shape, cols = self._cache
        n, _, h, w = x_shape
        g = grad.reshape(n, grad.shape[1], h * w)
        wmat = self.weight.value.reshape(self.weight.value.shape[0], -1)
        dw = (g @ cols.transpose(0, 2, 1)).sum(axis=0)
        self.weight.grad += dw.reshape(self.weight.value.shape)
        self.bias.grad += g.sum(axis=(0, 2))
        dcols = wmat.T.astype(grad.dtype, copy=False)[None] @ g
        return _col2im(dcols, x_shape, self.kernel, self.pad)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class MaxPool2d(Layer):
    """2x2 max pooling, stride 2; odd trailing rows/columns are dropped."""

    def __init__(self):
        self._cache = None

    def forward(self, x):
        n, c, h, w = x.shape
        h2, w2 = h // 2, w // 2
        xt = x[:, :, : h2 * 2, : w2 * 2]
        blocks = xt.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = blocks.reshape(n, c, h2, w2, 4)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return out

    def backward(self, grad):
        x_shape, idx = self._cache
        n, c, h, w = x_shape
        h2, w2 = h // 2, w // 2
        dflat = np.zeros((n, c, h2, w2, 4), dtype=grad.dtype)
        np.put_along_axis(dflat, idx[..., None], grad[..., None], axis=-1)
        dx = np.zeros(x_shape, dtype=grad.dtype)
        dx[:, :, : h2 * 2, : w2 * 2] = (
            dflat.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h2 * 2, w2 * 2))
        return dx


class BatchNorm(Layer):
    """Batch normalization over (N,) or (N,H,W) per channel/feature."""

    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Param(np.ones(num_features))
        self.beta = Param(np.zeros(num_features))
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def _axes_and_shape(self, x):
        if x.ndim == 2:
            return (0,), (1, -1)
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        raise ShapeError(f"BatchNorm expects 2-D or 4-D input, got {x.ndim}-D")

    def forward(self, x):
        axes, shape = self._axes_and_shape(x)
        if self.training:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = ((1 - self.momentum) * self.running_mean
                                 + self.momentum * mean)
            self.running_var = ((1 - self.momentum) * self.running_var
                                + self.momentum * var)
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        self._cache = (xhat, inv_std, axes, shape, x.shape)
        return self.gamma.value.reshape(shape) * xhat + self.beta.value.reshape(shape)

    def backward(self, grad):
        xhat, inv_std, axes, shape, x_shape = self._cache
        m = np.prod([x_shape[a] for a in axes])
        self.gamma.grad += (grad * xhat).sum(axis=axes)
        self.beta.grad += grad.sum(axis=axes)
        dxhat = grad * self.gamma.value.reshape(shape)
        if not self.training:
            return dxhat * inv_std.reshape(shape)
        t1 = dxhat - dxhat.mean(axis=axes, keepdims=True)
        t2 = xhat * (dxhat * xhat).sum(axis=axes, keepdims=True) / m
        return (t1 - t2) * inv_std.reshape(shape)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def state(self):
        return {"gamma": self.gamma.value, "beta": self.beta.value,
                "running_mean": self.running_mean, "running_var": self.running_var}

    def load_state(self, state):
        self.gamma.value = np.array(state["gamma"])
        self.beta.value = np.array(state["beta"])
        self.gamma.grad = np.zeros_like(self.gamma.value)
        self.beta.grad = np.zeros_like(self.beta.value)
        self.running_mean = np.array(state["running_mean"])
        self.running_var = np.array(state["running_var"])

    def astype(self, dtype):
        super().astype(dtype)
        self.running_mean = self.running_mean.astype(dtype)
        self.running_var = self.running_var.astype(dtype)


class PReLU(Layer):
    """Parametric ReLU with one learned slope per layer (init 0.25)."""

    def __init__(self, init: float = 0.25):
        self.slope = Param(np.array([init]))
        self._cache = None

    def forward(self, x):
        self._cache = x
        return np.where(x >= 0, x, self.slope.value[0] * x)

    def backward(self, grad):
        x = self._cache
        self.slope.grad += np.array([(grad * np.where(x < 0, x, 0.0)).sum()])
        return grad * np.where(x >= 0, 1.0, self.slope.value[0])

    def parameters(self):
        return {"slope": self.slope}


class Dropout(Layer):
    """Inverted dropout, active only in training mode; masks are seeded."""

    def __init__(self, p: float = 0.1):
        self.p = p
        self.rng = np.random.default_rng(0)
        self._mask = None

    def forward(self, x):
        if not self.training or self.p == 0.0:
            self._mask = None
            return x
        self._mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        return x * self._mask

    def backward(self, grad):
        if self._mask is None:
            return grad
        return grad * self._mask


class Flatten(Layer):
    def __init__(self):
        self._shape = None

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Linear(Layer):
    """Fully connected layer, He-uniform initialized."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        bound = np.sqrt(6.0 / in_features)
        self.in_features = in_features
        self.weight = Param(rng.uniform(-bound, bound, (out_features, in_features)))
        self.bias = Param(np.zeros(out_features))
        self._cache = None

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"Linear expected (N,{self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, grad):
        x = self._cache
        self.weight.grad += grad.T @ x
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}


class Sigmoid(Layer):
    def __init__(self):
        self._out = None

    def forward(self, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, grad):
        return grad * self._out * (1.0 - self._out)


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def train(self):
        for layer in self.layers:
            layer.training = True
            if isinstance(layer, Sequential):
                layer.train()

    def eval(self):
        for layer in self.layers:
            layer.training = False
            if isinstance(layer, Sequential):
                layer.eval()

    def parameters(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, p in layer.parameters().items():
                out[f"{i}.{name}"] = p
        return out

    def state(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.state().items():
                out[f"{i}.{name}"] = arr
        return out

    def load_state(self, state):
        for i, layer in enumerate(self.layers):
            sub = {name.split(".", 1)[1]: arr for name, arr in state.items()
                   if name.startswith(f"{i}.")}
            if sub:
                layer.load_state(sub)

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)

    def seed_dropout(self, seed: int):
        """Give every dropout layer an independent, reproducible stream."""
        k = 0
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.rng = np.random.default_rng(seed + 1000 * k)
                k += 1

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

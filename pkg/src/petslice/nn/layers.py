"""Layer objects wrapping the functional kernels with parameter/gradient storage."""

import numpy as np

from . import functional as F
from .functional import ShapeError


class Module:
    """Base class: parameters, gradients and buffers live in ordered dicts.

    ``backward`` accumulates into ``grads``; call :meth:`zero_grad` between
    optimizer steps.
    """

    def __init__(self):
        self.training = True
        self.params = {}
        self.grads = {}
        self.buffers = {}

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def children(self):
        return []

    def _add_param(self, name, value):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def named_parameters(self, prefix=""):
        """Yields ``(name, param, grad)`` in declaration order."""
        for key, value in self.params.items():
            yield prefix + key, value, self.grads[key]
        for child_name, child in self.children():
            yield from child.named_parameters(f"{prefix}{child_name}.")

    def named_buffers(self, prefix=""):
        for key, value in self.buffers.items():
            yield prefix + key, value
        for child_name, child in self.children():
            yield from child.named_buffers(f"{prefix}{child_name}.")

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def zero_grad(self):
        for m in self.modules():
            for g in m.grads.values():
                g.fill(0.0)

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Casts parameters, gradients and buffers in place (returns self)."""
        for m in self.modules():
            m.params = {k: v.astype(dtype) for k, v in m.params.items()}
            m.grads = {k: v.astype(dtype) for k, v in m.grads.items()}
            m.buffers = {k: v.astype(dtype) for k, v in m.buffers.items()}
        return self

    def num_parameters(self):
        return sum(p.size for _, p, _ in self.named_parameters())


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 bias=True, rng=None, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel_size * kernel_size
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                       size=(out_channels, in_channels, kernel_size, kernel_size))
        self._add_param("weight", w.astype(dtype))
        if bias:
            self._add_param("bias", np.zeros(out_channels, dtype=dtype))
        self._cache = None

    def forward(self, x):
        out, self._cache = F.conv2d_forward(
            x, self.params["weight"], self.params.get("bias"), self.stride, self.padding
        )
        return out

    def backward(self, dout):
        dx, dw, db = F.conv2d_backward(dout, self._cache)
        self.grads["weight"] += dw
        if db is not None:
            self.grads["bias"] += db
        return dx


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {momentum}")
        self.momentum = momentum
        self.eps = eps
        self._add_param("gamma", np.ones(channels, dtype=dtype))
        self._add_param("beta", np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self._cache = None

    def forward(self, x):
        out, self._cache = F.batchnorm2d_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            self.training, self.momentum, self.eps,
        )
        return out

    def backward(self, dout):
        dx, dg, db = F.batchnorm2d_backward(dout, self._cache)
        self.grads["gamma"] += dg
        self.grads["beta"] += db
        return dx


class ReLU(Module):
    def forward(self, x):
        out, self._mask = F.relu_forward(x)
        return out

    def backward(self, dout):
        return F.relu_backward(dout, self._mask)


class MaxPool2d(Module):
    def __init__(self, window=2, stride=None):
        super().__init__()
        self.window = window
        self.stride = stride or window

    def forward(self, x):
        out, self._cache = F.maxpool2d_forward(x, self.window, self.stride)
        return out

    def backward(self, dout):
        return F.maxpool2d_backward(dout, self._cache)


class GlobalAvgPool2d(Module):
    """Averages each channel over space and flattens to (N, C)."""

    def forward(self, x):
        out, self._shape = F.global_avgpool_forward(x)
        return out[:, :, 0, 0]

    def backward(self, dout):
        return F.global_avgpool_backward(dout[:, :, None, None], self._shape)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None,
                 gain=2.0, dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = rng.normal(0.0, np.sqrt(gain / in_features), size=(out_features, in_features))
        self._add_param("weight", w.astype(dtype))
        if bias:
            self._add_param("bias", np.zeros(out_features, dtype=dtype))

    def forward(self, x):
        out, self._cache = F.linear_forward(x, self.params["weight"], self.params.get("bias"))
        return out

    def backward(self, dout):
        dx, dw, db = F.linear_backward(dout, self._cache)
        self.grads["weight"] += dw
        if db is not None:
            self.grads["bias"] += db
        return dx


class Sequential(Module):
    def __init__(self, *layers, names=None):
        super().__init__()
        self.layers = list(layers)
        self.names = list(names) if names else [str(i) for i in range(len(layers))]

    def children(self):
        return list(zip(self.names, self.layers))

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


class ResidualBlock(Module):
    """Basic residual block: conv-bn-relu-conv-bn plus shortcut, then relu.

    A 1x1 projection (conv + bn) is used on the shortcut exactly when the
    block changes resolution or width. Passing ``projection`` explicitly is
    allowed only when it agrees with that rule.
    """

    def __init__(self, in_channels, out_channels, stride=1, projection=None,
                 rng=None, bn_momentum=0.1, bn_eps=1e-5, dtype=np.float32):
        super().__init__()
        needed = stride > 1 or in_channels != out_channels
        if projection is None:
            projection = needed
        elif projection != needed:
            raise ShapeError(
                f"inconsistent shortcut: projection={projection} but stride={stride}, "
                f"channels {in_channels}->{out_channels} require projection={needed}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        bn = dict(momentum=bn_momentum, eps=bn_eps, dtype=dtype)
        self.conv1 = Conv2d(in_channels, out_channels, 3, stride, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(out_channels, **bn)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_channels, out_channels, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, **bn)
        self.proj_conv = self.proj_bn = None
        if projection:
            self.proj_conv = Conv2d(in_channels, out_channels, 1, stride, 0, bias=False, rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(out_channels, **bn)
        self.relu_out = ReLU()

    def children(self):
        out = [("conv1", self.conv1), ("bn1", self.bn1), ("relu1", self.relu1),
               ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.proj_conv is not None:
            out += [("proj_conv", self.proj_conv), ("proj_bn", self.proj_bn)]
        return out + [("relu_out", self.relu_out)]

    def forward(self, x):
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)))
        h = self.bn2.forward(self.conv2.forward(h))
        if self.proj_conv is not None:
            skip = self.proj_bn.forward(self.proj_conv.forward(x))
        else:
            skip = x
        return self.relu_out.forward(h + skip)

    def backward(self, dout):
        d = self.relu_out.backward(dout)
        dh = self.conv1.backward(self.bn1.backward(self.relu1.backward(
            self.conv2.backward(self.bn2.backward(d)))))
        if self.proj_conv is not None:
            dskip = self.proj_conv.backward(self.proj_bn.backward(d))
        else:
            dskip = d
        return dh + dskip

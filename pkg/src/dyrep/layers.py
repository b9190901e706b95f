"""Parameter-holding layers built on :mod:`dyrep.tensor`."""

import numpy as np

from . import tensor as T
from .tensor import BnParams, ConvParams, Tensor, _pair


def _param(shape, name, dtype, fill=0.0):
    return Tensor(np.full(shape, fill, dtype=dtype), requires_grad=True, name=name)


class Conv2d:
    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=None, bias=False,
                 name="conv", dtype=np.float64):
        kh, kw = _pair(kernel_size)
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"only odd kernel sizes are supported, got {(kh, kw)}")
        if padding is None:
            padding = ((kh - 1) // 2, (kw - 1) // 2)
        self.name = name
        self.stride = int(stride)
        self.padding = _pair(padding)
        self.dtype = np.dtype(dtype)
        self.weight = _param((out_channels, in_channels, kh, kw), f"{name}.weight", self.dtype)
        self.bias = _param((out_channels,), f"{name}.bias", self.dtype) if bias else None
        self.last_out_hw = None

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def kernel_size(self):
        return self.weight.shape[2], self.weight.shape[3]

    def reset_parameters(self, rng):
        """Kaiming-style fan-in normal init."""
        fan_in = self.in_channels * self.kernel_size[0] * self.kernel_size[1]
        self.weight.data[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), self.weight.shape)
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def ensure_bias(self):
        if self.bias is None:
            self.bias = _param((self.out_channels,), f"{self.name}.bias", self.dtype)
        return self.bias

    def params(self) -> ConvParams:
        bias = None if self.bias is None else self.bias.data
        return ConvParams(self.weight.data, bias, self.stride, self.padding)

    def set_params(self, p: ConvParams):
        if p.weight.shape != self.weight.shape or p.stride != self.stride or p.padding != self.padding:
            raise ValueError(
                f"{self.name}: cannot load conv {p.weight.shape}/s{p.stride}/p{p.padding} into "
                f"{self.weight.shape}/s{self.stride}/p{self.padding}"
            )
        self.weight.data[...] = p.weight
        if self.bias is None:
            if np.any(p.bias != 0):
                self.ensure_bias().data[...] = p.bias
        else:
            self.bias.data[...] = p.bias

    def parameters(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def forward(self, x, mode="eval", update_stats=True):
        out = T.conv2d(x, self.weight, self.bias, self.stride, self.padding)
        self.last_out_hw = out.shape[2:]
        return out

    __call__ = forward

    def macs(self):
        if self.last_out_hw is None:
            return 0
        oh, ow = self.last_out_hw
        return int(self.weight.size * oh * ow)

    def to_structure(self):
        return {
            "type": "conv",
            "name": self.name,
            "in": self.in_channels,
            "out": self.out_channels,
            "kernel": list(self.kernel_size),
            "stride": self.stride,
            "padding": list(self.padding),
            "bias": self.bias is not None,
        }

    @classmethod
    def from_structure(cls, s, dtype):
        return cls(s["in"], s["out"], tuple(s["kernel"]), s["stride"], tuple(s["padding"]), s["bias"],
                   name=s["name"], dtype=dtype)


class BatchNorm2d:
    kind = "bn"

    def __init__(self, num_channels, name="bn", eps=1e-5, momentum=0.1, dtype=np.float64):
        self.name = name
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.dtype = np.dtype(dtype)
        self.gamma = _param((num_channels,), f"{name}.gamma", self.dtype, 1.0)
        self.beta = _param((num_channels,), f"{name}.beta", self.dtype, 0.0)
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)
        # False until calibration has populated the running statistics.
        self.calibrated = True

    @property
    def num_channels(self):
        return self.gamma.shape[0]

    def params(self) -> BnParams:
        return BnParams(self.gamma.data, self.beta.data, self.running_mean, self.running_var,
                        self.eps, self.momentum, self.calibrated)

    def set_params(self, p: BnParams):
        self.gamma.data[...] = p.gamma
        self.beta.data[...] = p.beta
        self.running_mean[...] = p.running_mean
        self.running_var[...] = p.running_var

    def parameters(self):
        return [self.gamma, self.beta]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}

    def forward(self, x, mode="eval", update_stats=True):
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                            self.eps, self.momentum, mode, update_stats)

    __call__ = forward

    def to_structure(self):
        return {"type": "bn", "name": self.name, "channels": self.num_channels, "eps": self.eps,
                "momentum": self.momentum, "calibrated": self.calibrated}

    @classmethod
    def from_structure(cls, s, dtype):
        bn = cls(s["channels"], s["name"], s["eps"], s["momentum"], dtype)
        bn.calibrated = s["calibrated"]
        return bn


class AvgPool2d:
    kind = "avg"

    def __init__(self, channels, kernel_size, stride=1, padding=0):
        if kernel_size % 2 == 0:
            raise ValueError(f"average pool kernel must be odd, got {kernel_size}")
        self.channels = channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding

    def parameters(self):
        return []

    def forward(self, x, mode="eval", update_stats=True):
        return T.avg_pool2d(x, self.kernel_size, self.stride, self.padding)

    __call__ = forward

    def to_structure(self):
        return {"type": "avg", "channels": self.channels, "kernel": self.kernel_size,
                "stride": self.stride, "padding": self.padding}

    @classmethod
    def from_structure(cls, s, dtype=None):
        return cls(s["channels"], s["kernel"], s["stride"], s["padding"])


class Identity:
    kind = "identity"

    def __init__(self, channels):
        self.channels = channels

    def parameters(self):
        return []

    def forward(self, x, mode="eval", update_stats=True):
        return x

    __call__ = forward

    def to_structure(self):
        return {"type": "identity", "channels": self.channels}

    @classmethod
    def from_structure(cls, s, dtype=None):
        return cls(s["channels"])


class ConvBN:
    """A standalone ``conv -> BN`` unit of a network; the unit a rep target lives in."""

    kind = "convbn"

    def __init__(self, conv: Conv2d, bn: BatchNorm2d):
        self.conv = conv
        self.bn = bn

    @property
    def id(self):
        return self.conv.name

    def parameters(self):
        return self.conv.parameters() + self.bn.parameters()

    def forward(self, x, mode="eval", update_stats=True):
        return self.bn(self.conv(x), mode, update_stats)

    __call__ = forward

    def to_structure(self):
        return {"type": "convbn", "conv": self.conv.to_structure(), "bn": self.bn.to_structure()}

    @classmethod
    def from_structure(cls, s, dtype):
        return cls(Conv2d.from_structure(s["conv"], dtype), BatchNorm2d.from_structure(s["bn"], dtype))


class Linear:
    kind = "linear"

    def __init__(self, in_features, out_features, name="fc", dtype=np.float64):
        self.name = name
        self.weight = _param((out_features, in_features), f"{name}.weight", dtype)
        self.bias = _param((out_features,), f"{name}.bias", dtype)

    def reset_parameters(self, rng):
        bound = 1.0 / np.sqrt(self.weight.shape[1])
        self.weight.data[...] = rng.uniform(-bound, bound, self.weight.shape)
        self.bias.data[...] = 0.0

    def parameters(self):
        return [self.weight, self.bias]

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)

    __call__ = forward

    def macs(self):
        return int(self.weight.size)

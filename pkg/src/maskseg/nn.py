"""Module/parameter plumbing and the layers the model is built from.

Parameters are named by their attribute path with slashes, which is also
the checkpoint key ("encoder/blocks/0/attn/qkv/weight"). Constructors take
an explicit numpy Generator so model builds are deterministic per seed.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """Learnable tensor; `trainable=False` freezes it for the optimizer."""

    __slots__ = ("trainable",)

    def __init__(self, data):
        super().__init__(np.asarray(data, dtype=np.float64), requires_grad=True)
        self.trainable = True


def trunc_normal(rng, shape, std=0.02):
    x = rng.normal(0.0, std, size=shape)
    return np.clip(x, -2 * std, 2 * std)


def uniform_fan_in(rng, shape, fan_in):
    k = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-k, k, size=shape)


class Module:
    """Container tracking parameters and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}/")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix="", strict=True):
        own = dict(self.named_parameters(prefix))
        missing = set(own) - set(state)
        if strict and missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
        for name, p in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model {p.shape}")
            p.data = arr.copy()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items = []
        for m in modules:
            self.append(m)

    def append(self, module):
        self._children[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, idx):
        return self._items[idx]

    def __len__(self):
        return len(self._items)


class Linear(Module):
    def __init__(self, rng, in_dim, out_dim, bias=True, zero_init=False):
        super().__init__()
        if zero_init:
            self.weight = Parameter(np.zeros((out_dim, in_dim)))
        else:
            self.weight = Parameter(uniform_fan_in(rng, (out_dim, in_dim), in_dim))
        self.bias = Parameter(np.zeros(out_dim)) if bias else None

    def __call__(self, x):
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layernorm(x, self.weight, self.bias, eps=self.eps)


class Conv3d(Module):
    def __init__(self, rng, in_ch, out_ch, kernel, stride=(1, 1, 1), padding=(0, 0, 0)):
        super().__init__()
        kernel = tuple(kernel)
        fan_in = in_ch * int(np.prod(kernel))
        self.weight = Parameter(uniform_fan_in(rng, (out_ch, in_ch) + kernel, fan_in))
        self.bias = Parameter(np.zeros(out_ch))
        self.stride = tuple(stride)
        self.padding = tuple(padding)

    def __call__(self, x):
        return T.conv3d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class DepthwiseConv3d(Module):
    """Per-channel conv; defaults to a depth-only 3x1x1 kernel."""

    def __init__(self, rng, channels, kernel=(3, 1, 1), padding=(1, 0, 0)):
        super().__init__()
        kernel = tuple(kernel)
        self.weight = Parameter(uniform_fan_in(rng, (channels,) + kernel, int(np.prod(kernel))))
        self.bias = Parameter(np.zeros(channels))
        self.padding = tuple(padding)

    def __call__(self, x):
        return T.depthwise_conv3d(x, self.weight, self.bias, padding=self.padding)


class ConvTranspose3d(Module):
    """Non-overlapping transposed conv (kernel == stride)."""

    def __init__(self, rng, in_ch, out_ch, stride=(1, 2, 2)):
        super().__init__()
        stride = tuple(stride)
        fan_in = in_ch * int(np.prod(stride))
        self.weight = Parameter(uniform_fan_in(rng, (in_ch, out_ch) + stride, fan_in))
        self.bias = Parameter(np.zeros(out_ch))
        self.stride = stride

    def __call__(self, x):
        return T.conv_transpose3d(x, self.weight, self.bias, stride=self.stride)


class Mlp(Module):
    def __init__(self, rng, dim, hidden, out_dim=None, act=T.gelu):
        super().__init__()
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, out_dim or dim)
        self.act = act

    def __call__(self, x):
        return self.fc2(self.act(self.fc1(x)))


class Attention(Module):
    """Multi-head attention over (..., tokens, channels) with any equal
    leading batch axes on queries and keys/values."""

    def __init__(self, rng, dim, heads, kv_dim=None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"embed dim {dim} not divisible by head count {heads}")
        self.heads = heads
        self.head_dim = dim // heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, kv_dim or dim, dim)
        self.v = Linear(rng, kv_dim or dim, dim)
        self.proj = Linear(rng, dim, dim)

    def _split(self, x):
        # (..., T, C) -> (..., heads, T, head_dim)
        batch = x.shape[:-2]
        t = x.shape[-2]
        x = T.reshape(x, batch + (t, self.heads, self.head_dim))
        n = len(batch)
        perm = tuple(range(n)) + (n + 1, n, n + 2)
        return T.transpose(x, perm)

    def _merge(self, x):
        batch = x.shape[:-3]
        n = len(batch)
        perm = tuple(range(n)) + (n + 1, n, n + 2)
        x = T.transpose(x, perm)
        return T.reshape(x, batch + (x.shape[-3], self.heads * self.head_dim))

    def __call__(self, q, k, v):
        qh = self._split(self.q(q))
        kh = self._split(self.k(k))
        vh = self._split(self.v(v))
        scale = 1.0 / np.sqrt(self.head_dim)
        logits = T.matmul(qh, T.transpose(kh, tuple(range(kh.ndim - 2)) + (kh.ndim - 1, kh.ndim - 2)))
        attn = T.softmax(logits * scale, axis=-1)
        out = self._merge(T.matmul(attn, vh))
        return self.proj(out)

"""Parameterised layers shared by the transformer and CNN branches."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


class ConfigError(ValueError):
    """Invalid layer or model configuration."""


def param(data: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype, order="C"), requires_grad=True)


def uniform_init(rng: np.random.Generator, fan_in: int, shape, dtype=np.float32) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape), dtype)


class Module:
    """Minimal container: walks attributes to find parameters and buffers.

    Attributes holding a :class:`Tensor` are parameters, those
    listed in ``_buffers`` are non-learned state, and ``Module`` attributes
    (or lists of them) are recursed into in assignment order.
    """

    training = True
    _buffers: tuple[str, ...] = ()

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                out.append((prefix + key, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = [(prefix + name, getattr(self, name)) for name in self._buffers]
        for key, child in self._children():
            out.extend(child.named_buffers(f"{prefix}{key}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        if strict:
            missing = (set(own) | set(bufs)) - set(state)
            unexpected = set(state) - set(own) - set(bufs)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, arr in state.items():
            if name in own:
                p = own[name]
                if p.shape != arr.shape:
                    raise DimensionError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
                p.data = np.array(arr, dtype=p.dtype, copy=True)
            elif name in bufs:
                self._set_buffer(name, np.array(arr, dtype=bufs[name].dtype, copy=True))

    def _set_buffer(self, dotted: str, value: np.ndarray) -> None:
        *path, leaf = dotted.split(".")
        obj = self
        for part in path:
            obj = obj[int(part)] if isinstance(obj, (list, tuple)) else getattr(obj, part)
        setattr(obj, leaf, value)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = np.array(p.data, dtype=dtype, order="C")
            p.grad = None
        for name, buf in self.named_buffers():
            self._set_buffer(name, np.asarray(buf, dtype=dtype))
        return self

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator, bias: bool = True):
        self.din, self.dout = din, dout
        self.W = uniform_init(rng, din, (din, dout))
        self.b = param(np.zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear_forward(self, x)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.din:
        raise DimensionError(f"linear: input last dim {x.shape[-1]} != {layer.din}")
    if layer.b is None:
        return ad.matmul(x, layer.W)
    return ad.affine(x, layer.W, layer.b)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class FFN(Module):
    """Linear -> ReLU -> Linear."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return ffn_forward(self, x)


def ffn_forward(layer: FFN, x: Tensor) -> Tensor:
    return layer.fc2(ad.relu(layer.fc1(x)))


class Attention(Module):
    """Multi-head scaled dot-product attention with packed D x D projections.

    Heads are concatenated back to width D with no output projection.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if heads < 1 or dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self.W_q = uniform_init(rng, dim, (dim, dim))
        self.W_k = uniform_init(rng, dim, (dim, dim))
        self.W_v = uniform_init(rng, dim, (dim, dim))
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        # [..., T, D] -> [..., h, T, d]
        lead = x.shape[:-2]
        t = x.shape[-2]
        x = ad.reshape(x, lead + (t, self.heads, self.head_dim))
        n = len(lead)
        return ad.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))

    def _merge(self, x: Tensor) -> Tensor:
        lead = x.shape[:-3]
        n = len(lead)
        t = x.shape[-2]
        x = ad.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
        return ad.reshape(x, lead + (t, self.dim))

    def forward(self, query_seq: Tensor, kv_seq: Tensor | None = None) -> Tensor:
        return mhca_forward(self, query_seq, query_seq if kv_seq is None else kv_seq)


def mhca_forward(layer: Attention, query_seq: Tensor, kv_seq: Tensor) -> Tensor:
    d = layer.dim
    if query_seq.shape[-1] != d or kv_seq.shape[-1] != d:
        raise DimensionError(f"attention: query {query_seq.shape} / kv {kv_seq.shape} vs model dim {d}")
    if query_seq.shape[:-2] != kv_seq.shape[:-2]:
        raise DimensionError(f"attention: batch dims {query_seq.shape[:-2]} vs {kv_seq.shape[:-2]}")
    q = layer._split(ad.matmul(query_seq, layer.W_q))
    k = layer._split(ad.matmul(kv_seq, layer.W_k))
    v = layer._split(ad.matmul(kv_seq, layer.W_v))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(layer.head_dim))
    w = ad.softmax_last(scores)
    layer.last_weights = w.data
    return layer._merge(ad.matmul(w, v))


def mhsa_forward(layer: Attention, x: Tensor) -> Tensor:
    return mhca_forward(layer, x, x)


class Dropout(Module):
    """Inverted dropout with its own seeded stream; identity when rate is 0 or in eval mode."""

    def __init__(self, rate: float, seed: int = 0):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.rate).astype(x.dtype) / x.dtype.type(1 - self.rate)
        return ad.mul(x, Tensor(keep))

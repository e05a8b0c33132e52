"""Transformer encoder block whose feed-forward path carries a bank of parallel adapters.

The default bank pairs a long-term adapter (project up 4x, ReLU, project
back) with a short-term adapter (project down to 1/4, softmax over the hidden
units, project back). Each adapter output is weighted by its own learnable
scalar and summed with the block's FFN output before the second residual
LayerNorm.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .nn import FFN, Attention, ConfigError, Dropout, LayerNorm, Module, mhsa_forward, param, uniform_init

ACTIVATIONS = ("relu", "softmax_last")


@dataclass(frozen=True)
class AdapterSpec:
    ratio: float
    activation: str = "relu"
    scale_init: float = 0.0

    def __post_init__(self):
        if not self.ratio > 0:
            raise ConfigError(f"adapter ratio must be positive, got {self.ratio}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"adapter activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    def hidden_dim(self, dim: int) -> int:
        return max(1, int(round(self.ratio * dim)))


LONG_TERM = AdapterSpec(4.0, "relu")
SHORT_TERM = AdapterSpec(0.25, "softmax_last")


def default_adapters(n: int = 2) -> list[AdapterSpec]:
    """Adapter banks for N = 0..3: long; long+short; long+short+long."""
    bank = [LONG_TERM, SHORT_TERM, LONG_TERM]
    if not 0 <= n <= 3:
        raise ConfigError(f"no default adapter bank for N={n}; pass an explicit list")
    return bank[:n]


def dims_adapters(up: float, down: float) -> list[AdapterSpec]:
    return [AdapterSpec(up, "relu"), AdapterSpec(down, "softmax_last")]


@dataclass
class M3AConfig:
    model_dim: int
    heads: int
    adapters: list[AdapterSpec] = field(default_factory=default_adapters)
    ffn_hidden: int | None = None
    dropout: float = 0.0

    @property
    def n_adapters(self) -> int:
        return len(self.adapters)

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden is not None else 4 * self.model_dim


class AdapterLayer(Module):
    def __init__(self, dim: int, spec: AdapterSpec, rng: np.random.Generator):
        self.spec = spec
        self.dim = dim
        h = spec.hidden_dim(dim)
        self.W_a = uniform_init(rng, dim, (dim, h))
        self.W_b = uniform_init(rng, h, (h, dim))
        self.s = param(np.asarray(spec.scale_init))


def adapter_forward(a: AdapterLayer, x: Tensor) -> Tensor:
    """activation(x W_a) W_b; the scale is applied by the caller."""
    if x.shape[-1] != a.dim:
        raise DimensionError(f"adapter: input last dim {x.shape[-1]} != {a.dim}")
    hidden = ad.matmul(x, a.W_a)
    hidden = ad.relu(hidden) if a.spec.activation == "relu" else ad.softmax_last(hidden)
    return ad.matmul(hidden, a.W_b)


def m3a_ffn_forward(
    cfg: M3AConfig,
    adapters: list[AdapterLayer],
    ffn: FFN,
    x_prime: Tensor,
    capture: dict | None = None,
) -> Tensor:
    """sum_i s_i * adapter_i(x') + FFN(x')."""
    if len(adapters) != cfg.n_adapters:
        raise ConfigError(f"expected {cfg.n_adapters} adapters, got {len(adapters)}")
    total = None
    for i, a in enumerate(adapters):
        out = adapter_forward(a, x_prime)
        if capture is not None:
            capture[f"adapter{i}"] = out.data
        term = ad.mul(a.s, out)
        total = term if total is None else ad.add(total, term)
    f = ffn(x_prime)
    return f if total is None else ad.add(total, f)


class M3ABlock(Module):
    """Post-norm encoder block: x' = LN(MHSA(x) + x); out = LN(M3A-FFN(x') + x')."""

    def __init__(self, cfg: M3AConfig, rng: np.random.Generator, dropout_seed: int = 0):
        self.cfg = cfg
        d = cfg.model_dim
        # adapters are drawn last so the host weights do not depend on the bank
        self.attn = Attention(d, cfg.heads, rng)
        self.ln1 = LayerNorm(d)
        self.ffn = FFN(d, cfg.hidden, rng)
        self.ln2 = LayerNorm(d)
        self.drop = Dropout(cfg.dropout, dropout_seed)
        self.adapters = [AdapterLayer(d, spec, rng) for spec in cfg.adapters]
        self.capture: dict | None = None

    def forward(self, x_prev: Tensor) -> Tensor:
        return m3a_block_forward(self, x_prev)


def m3a_block_forward(block: M3ABlock, x_prev: Tensor) -> Tensor:
    attn = mhsa_forward(block.attn, x_prev)
    x_prime = block.ln1(ad.add(attn, x_prev))
    x_pp = m3a_ffn_forward(block.cfg, block.adapters, block.ffn, x_prime, block.capture)
    x_pp = block.drop(x_pp)
    return block.ln2(ad.add(x_pp, x_prime))

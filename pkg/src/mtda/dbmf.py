"""Cross-attention fusion between the global (sequence) and local (feature map) branches."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .nn import FFN, Attention, ConfigError, LayerNorm, Linear, Module, mhca_forward


class StreamMode(str, enum.Enum):
    B_to_C = "B_to_C"
    C_to_B = "C_to_B"
    Bidirectional = "Bidirectional"

    @property
    def label(self) -> str:
        return {"B_to_C": "B->C", "C_to_B": "C->B", "Bidirectional": "C<->B"}[self.value]

    @property
    def to_local(self) -> bool:
        return self is not StreamMode.C_to_B

    @property
    def to_global(self) -> bool:
        return self is not StreamMode.B_to_C

    @classmethod
    def parse(cls, value) -> "StreamMode":
        if isinstance(value, cls):
            return value
        aliases = {
            "B->C": "B_to_C", "b_to_c": "B_to_C", "C->B": "C_to_B", "c_to_b": "C_to_B",
            "C<->B": "Bidirectional", "bidirectional": "Bidirectional", "both": "Bidirectional",
        }
        try:
            return cls(aliases.get(value, value))
        except ValueError:
            raise ConfigError(f"unknown stream mode {value!r}") from None


@dataclass
class DBMFConfig:
    embed_dim: int
    heads: int
    global_dim: int
    channels: int
    freq_bins: int
    stream: StreamMode = StreamMode.B_to_C
    ffn_hidden: int | None = None

    def __post_init__(self):
        if self.heads < 1 or self.embed_dim % self.heads:
            raise ConfigError(f"embed dim {self.embed_dim} is not divisible by {self.heads} heads")


def rearrange_local_to_seq(l: Tensor) -> Tensor:
    """[..., c, t, f] -> [..., t, c*f], channel-major on the feature axis."""
    if l.ndim < 3:
        raise DimensionError(f"local feature needs (c, t, f) axes, got {l.shape}")
    *lead, c, t, f = l.shape
    n = len(lead)
    x = ad.transpose(l, tuple(range(n)) + (n + 1, n, n + 2))
    return ad.reshape(x, tuple(lead) + (t, c * f))


def rearrange_seq_to_local(x: Tensor, c: int, f: int) -> Tensor:
    """Inverse of :func:`rearrange_local_to_seq`."""
    if x.ndim < 2 or x.shape[-1] != c * f:
        raise DimensionError(f"sequence feature {x.shape} cannot be split into c={c} x f={f}")
    *lead, t, _ = x.shape
    n = len(lead)
    x = ad.reshape(x, tuple(lead) + (t, c, f))
    return ad.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


class DBMFLayer(Module):
    """One fusion module.

    ``direction="to_local"`` queries with the local map and returns a delta
    in the local layout; ``"to_global"`` queries with the global sequence and
    returns a delta in the global layout.
    """

    def __init__(self, cfg: DBMFConfig, rng: np.random.Generator, direction: str = "to_local"):
        if direction not in ("to_local", "to_global"):
            raise ConfigError(f"unknown fusion direction {direction!r}")
        self.cfg, self.direction = cfg, direction
        d = cfg.embed_dim
        cf = cfg.channels * cfg.freq_bins
        self.lin_g = Linear(cfg.global_dim, d, rng)
        self.lin_l = Linear(cf, d, rng)
        self.xattn = Attention(d, cfg.heads, rng)
        self.ln = LayerNorm(d)
        self.ffn = FFN(d, cfg.ffn_hidden or 4 * d, rng)
        self.lin_out = Linear(d, cf if direction == "to_local" else cfg.global_dim, rng)

    def forward(self, g: Tensor, l: Tensor) -> Tensor:
        if self.direction == "to_local":
            return dbmf_forward(self, g, l)
        return dbmf_reverse_forward(self, g, l)


def _project(layer: DBMFLayer, g: Tensor, l: Tensor) -> tuple[Tensor, Tensor]:
    cfg = layer.cfg
    if g.shape[-1] != cfg.global_dim:
        raise DimensionError(f"global projection: g last dim {g.shape[-1]} != D_g={cfg.global_dim}")
    if l.ndim < 3 or l.shape[-3] != cfg.channels or l.shape[-1] != cfg.freq_bins:
        raise DimensionError(
            f"local projection: l {l.shape} does not match c={cfg.channels}, f={cfg.freq_bins}"
        )
    return layer.lin_g(g), layer.lin_l(rearrange_local_to_seq(l))


def _aggregate(layer: DBMFLayer, query: Tensor, kv: Tensor) -> Tensor:
    f = mhca_forward(layer.xattn, query, kv)
    return ad.add(layer.ffn(layer.ln(f)), f)


def dbmf_forward(layer: DBMFLayer, g: Tensor, l: Tensor) -> Tensor:
    """Global keys/values, local queries; returns a delta shaped like ``l``."""
    if layer.direction != "to_local":
        raise ConfigError("dbmf_forward needs a to_local layer")
    g_p, l_p = _project(layer, g, l)
    f_p = _aggregate(layer, l_p, g_p)
    return rearrange_seq_to_local(layer.lin_out(f_p), layer.cfg.channels, layer.cfg.freq_bins)


def dbmf_reverse_forward(layer: DBMFLayer, g: Tensor, l: Tensor) -> Tensor:
    """Local keys/values, global queries; returns a delta shaped like ``g``."""
    if layer.direction != "to_global":
        raise ConfigError("dbmf_reverse_forward needs a to_global layer")
    g_p, l_p = _project(layer, g, l)
    return layer.lin_out(_aggregate(layer, g_p, l_p))

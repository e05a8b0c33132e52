"""Dual-branch pipeline: an adapter-tuned transformer stack, a CNN stack, and fusion between them."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .dbmf import DBMFConfig, DBMFLayer, StreamMode, rearrange_local_to_seq
from .m3a import AdapterSpec, M3ABlock, M3AConfig, default_adapters
from .nn import ConfigError, Linear, Module, param


@dataclass
class ModelConfig:
    f_in: int = 32
    model_dim: int = 64
    heads: int = 4
    n_transformer_blocks: int = 8
    n_cnn_blocks: int = 4
    cnn_channels: list[int] = field(default_factory=lambda: [16, 32, 32, 64])
    cnn_pool: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    n_classes_hard: int = 4
    n_classes_soft: int = 4
    adapters: list[AdapterSpec] = field(default_factory=default_adapters)
    ffn_hidden: int | None = None
    dbmf_dim: int | None = None
    dbmf_heads: int | None = None
    stream: StreamMode = StreamMode.B_to_C
    fusion: bool = True
    dropout: float = 0.0

    def __post_init__(self):
        self.stream = StreamMode.parse(self.stream)
        self.adapters = [a if isinstance(a, AdapterSpec) else AdapterSpec(**a) for a in self.adapters]
        if self.n_transformer_blocks != 2 * self.n_cnn_blocks:
            raise ConfigError(
                f"fusion schedule needs n_transformer_blocks == 2 * n_cnn_blocks, "
                f"got {self.n_transformer_blocks} and {self.n_cnn_blocks}"
            )
        if self.heads < 1 or self.model_dim % self.heads:
            raise ConfigError(f"model_dim {self.model_dim} is not divisible by {self.heads} heads")
        if len(self.cnn_channels) != self.n_cnn_blocks or len(self.cnn_pool) != self.n_cnn_blocks:
            raise ConfigError("cnn_channels and cnn_pool need one entry per CNN block")
        f = self.f_in
        for k, pool in enumerate(self.cnn_pool):
            if pool < 1 or f < pool or (pool > 1 and f < 2):
                raise ConfigError(f"CNN block {k + 1}: cannot pool {f} frequency bins by {pool}")
            f //= pool

    @property
    def n_classes(self) -> int:
        return self.n_classes_hard + self.n_classes_soft

    def freq_plan(self) -> list[int]:
        """Frequency bins after each CNN block."""
        out, f = [], self.f_in
        for pool in self.cnn_pool:
            f //= pool
            out.append(f)
        return out

    def m3a(self) -> M3AConfig:
        return M3AConfig(self.model_dim, self.heads, list(self.adapters), self.ffn_hidden, self.dropout)

    def dbmf(self, k: int) -> DBMFConfig:
        return DBMFConfig(
            embed_dim=self.dbmf_dim or self.model_dim,
            heads=self.dbmf_heads or self.heads,
            global_dim=self.model_dim,
            channels=self.cnn_channels[k],
            freq_bins=self.freq_plan()[k],
            stream=self.stream,
        )


def fusion_schedule(n_transformer_blocks: int, n_cnn_blocks: int) -> list[tuple[int, int]]:
    """1-indexed (transformer block, CNN block) pairs after which fusion fires."""
    if n_cnn_blocks < 1 or n_transformer_blocks != 2 * n_cnn_blocks:
        raise ConfigError(
            f"fusion every two transformer blocks and every CNN block needs a 2:1 ratio, "
            f"got {n_transformer_blocks}:{n_cnn_blocks}"
        )
    return [(2 * k, k) for k in range(1, n_cnn_blocks + 1)]


class CnnBlock(Module):
    """3x3 conv -> batch norm -> ReLU -> average pool over frequency."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, cin: int, cout: int, pool: int, rng: np.random.Generator, momentum: float = 0.1):
        bound = 1.0 / np.sqrt(cin * 9)
        self.W = param(rng.uniform(-bound, bound, size=(cout, cin, 3, 3)))
        self.gamma = param(np.ones(cout))
        self.beta = param(np.zeros(cout))
        self.running_mean = np.zeros(cout, dtype=np.float32)
        self.running_var = np.ones(cout, dtype=np.float32)
        self.pool = pool
        self.momentum = momentum
        self.update_stats = True

    def forward(self, x: Tensor) -> Tensor:
        return cnn_block_forward(self, x)


def cnn_block_forward(block: CnnBlock, x: Tensor) -> Tensor:
    y = ad.conv2d(x, block.W)
    if block.training:
        y, mu, var = ad.batch_norm(y, block.gamma, block.beta)
        if block.update_stats:
            m = block.momentum
            block.running_mean = ((1 - m) * block.running_mean + m * mu).astype(block.running_mean.dtype)
            block.running_var = ((1 - m) * block.running_var + m * var).astype(block.running_var.dtype)
    else:
        y, _, _ = ad.batch_norm(y, block.gamma, block.beta, block.running_mean, block.running_var)
    y = ad.relu(y)
    p = block.pool
    if p == 1:
        return y
    b, c, t, f = y.shape
    if f % p:
        y = ad.index(y, (slice(None), slice(None), slice(None), slice(0, f - f % p)))
    y = ad.reshape(y, (b, c, t, f // p, p))
    return ad.mean(y, axis=-1)


@dataclass
class ModelOutput:
    frame_scores: Tensor
    logits: Tensor
    # final global-branch sequence; the head does not read it
    global_features: Tensor | None = None


class DualBranchModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        d = cfg.model_dim

        def rng(*key):
            return np.random.default_rng([seed, *key])

        self.embed = Linear(cfg.f_in, d, rng(0))
        m3a_cfg = cfg.m3a()
        self.blocks = [M3ABlock(m3a_cfg, rng(1, i), dropout_seed=seed * 1000 + i) for i in range(cfg.n_transformer_blocks)]
        chans = [1] + list(cfg.cnn_channels)
        self.cnn = [CnnBlock(chans[k], chans[k + 1], cfg.cnn_pool[k], rng(2, k)) for k in range(cfg.n_cnn_blocks)]
        self.head = Linear(cfg.cnn_channels[-1] * cfg.freq_plan()[-1], cfg.n_classes, rng(4))
        self.schedule = fusion_schedule(cfg.n_transformer_blocks, cfg.n_cnn_blocks)
        on = cfg.fusion
        self.fuse_local = [
            DBMFLayer(cfg.dbmf(k), rng(3, k, 0), "to_local") for k in range(cfg.n_cnn_blocks)
        ] if on and cfg.stream.to_local else []
        self.fuse_global = [
            DBMFLayer(cfg.dbmf(k), rng(3, k, 1), "to_global") for k in range(cfg.n_cnn_blocks)
        ] if on and cfg.stream.to_global else []
        self.fusion_log: list[tuple[int, int]] = []

    def set_update_stats(self, flag: bool) -> None:
        for blk in self.cnn:
            blk.update_stats = flag

    def forward(self, spec, trace: dict | None = None) -> ModelOutput:
        return model_forward(self, spec, trace)


def model_forward(model: DualBranchModel, spec, trace: dict | None = None) -> ModelOutput:
    cfg = model.cfg
    x = spec if isinstance(spec, Tensor) else Tensor(np.asarray(spec, dtype=model.embed.W.dtype))
    squeeze = x.ndim == 2
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.f_in:
        raise DimensionError(f"model input must be [batch, t, {cfg.f_in}], got {spec.shape}")
    b, t, f = x.shape
    model.fusion_log = []
    g = model.embed(x)
    l = ad.reshape(x, (b, 1, t, f))
    done = 0
    for k, (ti, ci) in enumerate(model.schedule):
        for i in range(done, ti):
            g = model.blocks[i](g)
            if trace is not None:
                trace.setdefault("global", []).append(g.data)
        done = ti
        l = model.cnn[ci - 1](l)
        if trace is not None:
            trace.setdefault("local", []).append(l.data)
        if not cfg.fusion:
            continue
        if g.shape[-2] != l.shape[-2]:
            raise DimensionError(f"fusion point {k + 1}: global length {g.shape[-2]} != local length {l.shape[-2]}")
        # both deltas read the pre-fusion features
        dl = model.fuse_local[k](g, l) if model.fuse_local else None
        dg = model.fuse_global[k](g, l) if model.fuse_global else None
        if dl is not None:
            if dl.shape != l.shape:
                raise DimensionError(f"fusion point {k + 1}: local delta {dl.shape} vs {l.shape}")
            l = ad.add(l, dl)
        if dg is not None:
            if dg.shape != g.shape:
                raise DimensionError(f"fusion point {k + 1}: global delta {dg.shape} vs {g.shape}")
            g = ad.add(g, dg)
        model.fusion_log.append((ti, ci))
        if trace is not None:
            trace.setdefault("global", []).append(g.data)
            trace.setdefault("local", []).append(l.data)
    logits = model.head(rearrange_local_to_seq(l))
    scores = ad.sigmoid(logits)
    if squeeze:
        logits = ad.reshape(logits, logits.shape[1:])
        scores = ad.reshape(scores, scores.shape[1:])
        g = ad.reshape(g, g.shape[1:])
    return ModelOutput(scores, logits, g)


# --------------------------------------------------------------------------
# post-processing


def median_filter(x: np.ndarray, win: int) -> np.ndarray:
    """Running median along axis 0 with edge replication."""
    if win % 2 == 0 or win < 1:
        raise ContractError(f"median window must be odd and positive, got {win}")
    if win == 1:
        return np.array(x, copy=True)
    h = win // 2
    pad = [(h, h)] + [(0, 0)] * (x.ndim - 1)
    xp = np.pad(x, pad, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(xp, win, axis=0)
    return np.median(windows, axis=-1)


def predict_events(
    scores,
    threshold: float = 0.5,
    median_win: int = 1,
    frame_hop_s: float = 0.02,
    classes=None,
) -> list[tuple[int, float, float]]:
    """Median-filter, binarise and merge active frames into (class, onset_s, offset_s) events.

    ``classes`` optionally maps column index to the reported class id.
    """
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    active = median_filter(s, median_win) > threshold
    events = []
    for k in range(active.shape[1]):
        col = np.concatenate([[False], active[:, k], [False]]).astype(np.int8)
        edges = np.diff(col)
        onsets = np.flatnonzero(edges == 1)
        offsets = np.flatnonzero(edges == -1)
        cls = k if classes is None else classes[k]
        events.extend((cls, on * frame_hop_s, off * frame_hop_s) for on, off in zip(onsets, offsets))
    events.sort(key=lambda e: (e[1], e[0]))
    return events

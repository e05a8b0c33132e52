"""Losses, Adam, mean-teacher training and evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .data import Clip, Dataset
from .metrics import UndefinedMetricError, event_f1_intersection, mpauc
from .model import DualBranchModel, predict_events
from .nn import Module

log = logging.getLogger(__name__)

CSV_HEADER = "epoch,loss_sup,loss_cons,mpAUC,event_f1"


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 16
    unlabeled_batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    consistency_max: float = 2.0
    consistency_ramp: float = 0.25
    mixup_prob: float = 0.5
    mixup_alpha: float = 0.2
    time_mask_prob: float = 0.5
    time_mask_max_width: int = 5
    # evaluation
    threshold: float = 0.5
    median_win: int = 5
    dtc: float = 0.7
    gtc: float = 0.7
    segment_s: float = 1.0
    gt_threshold: float = 0.5
    max_fpr: float = 0.1
    eval_batch_size: int = 32

    def __post_init__(self):
        if not 0 < self.ema_decay < 1:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")


# --------------------------------------------------------------------------
# losses


def bce_loss(scores: Tensor, targets, mask) -> Tensor:
    """Masked mean binary cross-entropy.

    ``mask`` has one entry per class, either shared ``[K]`` or per clip
    ``[B, K]``; entries that are 0 contribute neither loss nor gradient.
    """
    y = np.asarray(targets, dtype=scores.dtype)
    if y.shape != scores.shape:
        raise ContractError(f"targets {y.shape} vs scores {scores.shape}")
    if y.size and (y.min() < 0 or y.max() > 1):
        raise ContractError("BCE targets must lie in [0, 1]")
    m = np.asarray(mask, dtype=scores.dtype)
    if m.ndim == 1:
        m_full = np.broadcast_to(m, scores.shape)
    else:
        m_full = np.broadcast_to(m[..., None, :], scores.shape)
    count = float(m_full.sum())
    p = ad.clamp(scores, 1e-7, 1 - 1e-7)
    one = Tensor(np.asarray(1.0, dtype=scores.dtype))
    ll = ad.add(ad.mul(Tensor(y), ad.log(p)), ad.mul(Tensor(1 - y), ad.log(ad.sub(one, p))))
    total = ad.sum(ad.mul(Tensor(np.ascontiguousarray(m_full)), ll))
    return ad.scale(total, -1.0 / max(count, 1.0))


def consistency_loss(student_scores: Tensor, teacher_scores) -> Tensor:
    """Mean squared error; the teacher side is a constant."""
    t = teacher_scores.data if isinstance(teacher_scores, Tensor) else np.asarray(teacher_scores)
    if t.shape != student_scores.shape:
        raise ContractError(f"student {student_scores.shape} vs teacher {t.shape}")
    diff = ad.sub(student_scores, Tensor(t.astype(student_scores.dtype)))
    return ad.mean(ad.square(diff))


# --------------------------------------------------------------------------
# optimisation


def ema_update(teacher: Module, student: Module, decay: float) -> None:
    """theta_t <- decay * theta_t + (1 - decay) * theta_s for parameters and buffers."""
    tp, sp = teacher.named_parameters(), student.named_parameters()
    if [n for n, _ in tp] != [n for n, _ in sp] or any(a.shape != b.shape for (_, a), (_, b) in zip(tp, sp)):
        raise ContractError("teacher and student parameter trees differ")
    for (_, t), (_, s) in zip(tp, sp):
        t.data = np.asarray(decay * t.data + (1.0 - decay) * s.data, dtype=t.dtype)
    for (name, tb), (_, sb) in zip(teacher.named_buffers(), student.named_buffers()):
        teacher._set_buffer(name, np.asarray(decay * tb + (1.0 - decay) * sb, dtype=tb.dtype))


@dataclass
class AdamState:
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with bias correction; ``None`` gradients are skipped."""
    state.step += 1
    c1 = 1 - beta1**state.step
    c2 = 1 - beta2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = np.asarray(p.data - lr * upd, dtype=p.dtype)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    mpauc: float
    event_f1: float
    per_class_pauc: dict[int, float] = field(default_factory=dict)
    per_class_f1: dict[int, float] = field(default_factory=dict)
    excluded_classes: list[int] = field(default_factory=list)
    loss_curve: list[tuple[int, float, float]] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def predict_scores(model: DualBranchModel, clips: Sequence[Clip], batch_size: int = 32) -> list[np.ndarray]:
    was_training = model.training
    model.eval()
    out = []
    try:
        with ad.no_grad():
            for i in range(0, len(clips), batch_size):
                x = np.stack([c.features for c in clips[i : i + batch_size]]).astype(model.embed.W.dtype)
                out.extend(model(x).frame_scores.data)
    finally:
        model.train(was_training)
    return out


def evaluate(
    model: DualBranchModel,
    clips: Sequence[Clip],
    cfg: TrainConfig,
    frame_hop_s: float,
) -> MetricsReport:
    """mpAUC over soft-subset clips/classes and event F1 over hard-subset clips/classes."""
    n_hard = model.cfg.n_classes_hard
    scores = predict_scores(model, clips, cfg.eval_batch_size)
    notes = []
    soft = [(s[:, n_hard:], c.soft_labels) for s, c in zip(scores, clips) if c.label_kind == "soft"]
    value, per_pauc, excluded = float("nan"), {}, []
    if soft:
        try:
            res = mpauc(
                [s for s, _ in soft], [y for _, y in soft], cfg.segment_s, frame_hop_s, cfg.gt_threshold, cfg.max_fpr
            )
            value, per_pauc, excluded = res.value, res.per_class, res.excluded
            if excluded:
                notes.append(f"mpAUC excluded single-label classes {excluded}")
        except UndefinedMetricError as exc:
            notes.append(f"mpAUC undefined: {exc}")
    else:
        notes.append("no soft-label clips: mpAUC undefined")
    preds, refs = [], []
    for i, (s, c) in enumerate(zip(scores, clips)):
        if c.label_kind != "hard":
            continue
        for k, on, off in predict_events(s[:, :n_hard], cfg.threshold, cfg.median_win, frame_hop_s):
            preds.append((i, k, on, off))
        refs.extend((i, k, on * frame_hop_s, off * frame_hop_s) for k, on, off in c.hard_labels)
    f1, per_f1 = float("nan"), {}
    if refs or preds:
        f1 = event_f1_intersection(preds, refs, cfg.dtc, cfg.gtc)
        for k in range(n_hard):
            pk = [e for e in preds if e[1] == k]
            rk = [e for e in refs if e[1] == k]
            per_f1[k] = event_f1_intersection(pk, rk, cfg.dtc, cfg.gtc)
    else:
        notes.append("no hard-label clips: event F1 undefined")
    return MetricsReport(value, f1, per_pauc, per_f1, excluded, notes=notes)


# --------------------------------------------------------------------------
# training


def clone_model(model: DualBranchModel) -> DualBranchModel:
    twin = DualBranchModel(model.cfg, model.seed)
    twin.astype(model.embed.W.dtype)
    twin.load_state_dict(model.state_dict())
    return twin


@dataclass
class TrainResult:
    model: DualBranchModel
    teacher: DualBranchModel
    report: MetricsReport
    rows: list[tuple[int, float, float, float, float]]


def format_row(row) -> str:
    epoch, sup, cons, pauc, f1 = row
    return f"{epoch},{sup:.10f},{cons:.10f},{pauc:.10f},{f1:.10f}"


def _batch(clips: Sequence[Clip], n_hard: int, n_soft: int):
    feats = np.stack([c.features for c in clips])
    ys, ms = zip(*(c.targets(n_hard, n_soft) for c in clips))
    return feats, np.stack(ys), np.stack(ms)


def _augment(feats, ys, subsets, cfg: TrainConfig, rng: np.random.Generator):
    feats, ys = feats.copy(), ys.copy()
    if cfg.mixup_prob > 0 and rng.random() < cfg.mixup_prob:
        lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
        partner = np.arange(len(feats))
        for name in sorted(set(subsets)):
            idx = np.flatnonzero(np.asarray(subsets) == name)
            partner[idx] = idx[rng.permutation(len(idx))]
        feats = lam * feats + (1 - lam) * feats[partner]
        ys = lam * ys + (1 - lam) * ys[partner]
    _time_mask(feats, cfg, rng)
    return feats.astype(np.float32), ys.astype(np.float32)


def _time_mask(feats, cfg: TrainConfig, rng: np.random.Generator) -> None:
    t = feats.shape[1]
    for j in range(len(feats)):
        if cfg.time_mask_prob > 0 and rng.random() < cfg.time_mask_prob:
            width = int(rng.integers(1, min(cfg.time_mask_max_width, t) + 1))
            start = int(rng.integers(0, t - width + 1))
            feats[j, start : start + width] = 0.0


def train_loop(
    model: DualBranchModel,
    dataset: Dataset,
    cfg: TrainConfig,
    seed: int = 0,
    frame_hop_s: float = 0.2,
    on_epoch=None,
) -> TrainResult:
    """Mean-teacher training; one validation row per epoch."""
    n_hard, n_soft = model.cfg.n_classes_hard, model.cfg.n_classes_soft
    train = dataset.splits["train"]
    labeled = [c for c in train if c.label_kind != "none"]
    unlabeled = [c for c in train if c.label_kind == "none"]
    valid = dataset.splits.get("valid", [])
    if not labeled:
        raise ContractError("training split has no labelled clips")
    rng = np.random.default_rng([seed, 7])
    teacher = clone_model(model)
    for p in teacher.parameters():
        p.requires_grad = False
    teacher.eval()
    model.train()
    params = model.parameters()
    opt = AdamState()
    steps_per_epoch = math.ceil(len(labeled) / cfg.batch_size)
    ramp_steps = max(1.0, cfg.consistency_ramp * cfg.epochs * steps_per_epoch)
    step = 0
    u_pos, u_order = 0, np.arange(0)
    rows = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(labeled))
        sup_sum = cons_sum = 0.0
        for b in range(steps_per_epoch):
            batch = [labeled[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            feats, ys, ms = _batch(batch, n_hard, n_soft)
            feats, ys = _augment(feats, ys, [c.subset for c in batch], cfg, rng)
            n_lab = len(batch)
            u_clean = None
            if unlabeled and cfg.unlabeled_batch_size > 0:
                picks = []
                for _ in range(min(cfg.unlabeled_batch_size, len(unlabeled))):
                    if u_pos >= len(u_order):
                        u_order, u_pos = rng.permutation(len(unlabeled)), 0
                    picks.append(unlabeled[u_order[u_pos]])
                    u_pos += 1
                u_clean = np.stack([c.features for c in picks])
                u_aug = u_clean.copy()
                _time_mask(u_aug, cfg, rng)
                feats = np.concatenate([feats, u_aug])
            x = Tensor(feats.astype(model.embed.W.dtype))
            scores = model(x).frame_scores
            sup = bce_loss(ad.index(scores, slice(0, n_lab)), ys, ms)
            loss = sup
            cons_val = 0.0
            if u_clean is not None:
                with ad.no_grad():
                    t_scores = teacher(u_clean.astype(model.embed.W.dtype)).frame_scores
                cons = consistency_loss(ad.index(scores, slice(n_lab, None)), t_scores)
                weight = cfg.consistency_max * min(1.0, step / ramp_steps)
                loss = ad.add(sup, ad.scale(cons, weight))
                cons_val = float(cons.data)
            step += 1
            if not np.isfinite(loss.data):
                raise DivergenceError(step, float(loss.data))
            model.zero_grad()
            ad.backward(loss)
            adam_step(params, [p.grad for p in params], opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            # early steps average faster so the teacher is not stuck at initialisation
            ema_update(teacher, model, min(cfg.ema_decay, 1.0 - 1.0 / (step + 1)))
            sup_sum += float(sup.data)
            cons_sum += cons_val
        if valid:
            rep = evaluate(model, valid, cfg, frame_hop_s)
            pauc, f1 = rep.mpauc, rep.event_f1
        else:
            pauc = f1 = float("nan")
        row = (epoch, sup_sum / steps_per_epoch, cons_sum / steps_per_epoch, pauc, f1)
        rows.append(row)
        log.info("epoch %d sup=%.4f cons=%.4f mpAUC=%.4f F1=%.4f", *row)
        if on_epoch is not None:
            on_epoch(row)
    report = evaluate(model, valid, cfg, frame_hop_s) if valid else MetricsReport(float("nan"), float("nan"))
    report.loss_curve = [(r[0], r[1], r[2]) for r in rows]
    return TrainResult(model, teacher, report, rows)

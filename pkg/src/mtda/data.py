"""Synthetic heterogeneous SED data.

Two labelled subsets share the TF grid but differ in background character:
subset ``A_hard`` carries timestamped events with flat envelopes, subset
``B_soft`` carries frame-level probabilities taken from smooth event
envelopes. A third ``unlabeled`` subset draws from both class sets.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import ContractError

SUBSETS = ("A_hard", "B_soft", "unlabeled")
LABEL_KIND = {"A_hard": "hard", "B_soft": "soft", "unlabeled": "none"}


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ClassTemplate:
    band: tuple[int, ...]
    profile: tuple[float, ...]
    min_dur: int
    max_dur: int
    envelope: str  # "flat" or "bump"

    def spectrum(self, f_in: int) -> np.ndarray:
        out = np.zeros(f_in)
        out[list(self.band)] = self.profile
        return out


@dataclass(frozen=True)
class ScenarioSpec:
    subset: str
    classes: tuple[ClassTemplate, ...]
    class_offset: int = 0
    t: int = 50
    f_in: int = 32
    noise_level: float = 0.1
    tilt: float = 0.0
    min_events: int = 1
    max_events: int = 4
    amp_range: tuple[float, float] = (0.5, 1.0)

    @property
    def n_classes(self) -> int:
        return len(self.classes)


@dataclass
class Clip:
    features: np.ndarray
    subset: str
    seed: int = -1
    n_classes: int = 0
    hard_labels: list[tuple[int, int, int]] | None = None
    soft_labels: np.ndarray | None = None
    frame_activity: np.ndarray | None = None

    @property
    def label_kind(self) -> str:
        return LABEL_KIND[self.subset]

    @property
    def t(self) -> int:
        return self.features.shape[0]

    def activity(self) -> np.ndarray:
        """Hard labels as a [t, n_classes] 0/1 matrix (or the mixed matrix after mixup)."""
        if self.frame_activity is not None:
            return self.frame_activity
        out = np.zeros((self.t, self.n_classes), dtype=np.float32)
        for k, on, off in self.hard_labels or ():
            out[on:off, k] = 1.0
        return out

    def targets(self, n_hard: int, n_soft: int) -> tuple[np.ndarray, np.ndarray]:
        """Frame targets over all classes plus the per-class annotation mask."""
        y = np.zeros((self.t, n_hard + n_soft), dtype=np.float32)
        mask = np.zeros(n_hard + n_soft, dtype=np.float32)
        if self.label_kind == "hard":
            y[:, :n_hard] = self.activity()
            mask[:n_hard] = 1.0
        elif self.label_kind == "soft":
            y[:, n_hard:] = self.soft_labels
            mask[n_hard:] = 1.0
        return y, mask


def class_templates(
    n_hard: int,
    n_soft: int,
    f_in: int,
    seed: int = 0,
    hard_dur: tuple[int, int] = (6, 20),
    soft_dur: tuple[int, int] = (8, 24),
) -> tuple[list[ClassTemplate], list[ClassTemplate]]:
    """Disjoint frequency bands: hard classes first, then soft ones."""
    n = n_hard + n_soft
    width = f_in // n
    if width < 2:
        raise ValueError(f"{f_in} frequency bins cannot hold {n} class bands")
    rng = np.random.default_rng([seed, 11])
    out = []
    for k in range(n):
        band = tuple(range(k * width, k * width + width - 1))
        prof = 0.5 + 0.5 * rng.random(len(band))
        prof[len(band) // 2] = 1.0
        hard = k < n_hard
        lo, hi = hard_dur if hard else soft_dur
        out.append(ClassTemplate(band, tuple(float(p) for p in prof), lo, hi, "flat" if hard else "bump"))
    return out[:n_hard], out[n_hard:]


def envelope(kind: str, dur: int) -> np.ndarray:
    if kind == "flat":
        return np.ones(dur)
    e = np.sin(np.pi * (np.arange(dur) + 0.5) / dur)
    return e / e.max()


def render_clip(
    spec: ScenarioSpec,
    events: Sequence[tuple[int, int, int, float]],
    seed: int = 0,
) -> Clip:
    """Build a clip from explicit (class, onset, offset, amplitude) events."""
    rng = np.random.default_rng([seed, 1])
    t, f = spec.t, spec.f_in
    ramp = 1.0 + spec.tilt * np.linspace(0.0, 1.0, f)
    feats = spec.noise_level * np.abs(rng.standard_normal((t, f))) * ramp
    soft = np.zeros((t, spec.n_classes)) if spec.subset == "B_soft" else None
    hard = []
    for k, on, off, amp in events:
        if not 0 <= on < off <= t:
            raise ContractError(f"event ({k}, {on}, {off}) outside [0, {t})")
        tmpl = spec.classes[k]
        env = envelope(tmpl.envelope, off - on)
        feats[on:off] += amp * np.outer(env, tmpl.spectrum(f))
        hard.append((k, on, off))
        if soft is not None:
            soft[on:off, k] = np.maximum(soft[on:off, k], env)
    clip = Clip(feats.astype(np.float32), spec.subset, seed, spec.n_classes)
    if spec.subset == "A_hard":
        clip.hard_labels = sorted(hard, key=lambda e: (e[1], e[0]))
    elif spec.subset == "B_soft":
        clip.soft_labels = soft.astype(np.float32)
    return clip


def sample_events(spec: ScenarioSpec, rng: np.random.Generator) -> list[tuple[int, int, int, float]]:
    hi = min(spec.max_events, spec.n_classes)
    n = int(rng.integers(spec.min_events, hi + 1))
    classes = rng.choice(spec.n_classes, size=n, replace=False)
    events = []
    for k in classes:
        tmpl = spec.classes[k]
        dur = int(rng.integers(tmpl.min_dur, min(tmpl.max_dur, spec.t) + 1))
        on = int(rng.integers(0, spec.t - dur + 1))
        amp = float(rng.uniform(*spec.amp_range))
        events.append((int(k), on, on + dur, amp))
    return events


def generate_clip(spec: ScenarioSpec, seed: int) -> Clip:
    """Deterministic in (spec, seed)."""
    rng = np.random.default_rng([seed, 0])
    return render_clip(spec, sample_events(spec, rng), seed)


def mixup(a: Clip, b: Clip, lam: float) -> Clip:
    """Convex combination ``lam * a + (1 - lam) * b`` of features and labels."""
    if a.subset != b.subset:
        raise ContractError(f"mixup needs clips from one subset, got {a.subset} and {b.subset}")
    if a.features.shape != b.features.shape:
        raise ContractError(f"mixup shape mismatch {a.features.shape} vs {b.features.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"mixup weight must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return a
    if lam == 0.0:
        return b
    mix = lambda x, y: (lam * x + (1.0 - lam) * y).astype(np.float32)  # noqa: E731
    out = Clip(mix(a.features, b.features), a.subset, a.seed, a.n_classes)
    if a.label_kind == "hard":
        out.frame_activity = mix(a.activity(), b.activity())
    elif a.label_kind == "soft":
        out.soft_labels = mix(a.soft_labels, b.soft_labels)
    return out


def time_mask(c: Clip, start: int, width: int) -> Clip:
    """Zero features on frames [start, start + width); labels are kept."""
    if width < 0 or start < 0 or start + width > c.t:
        raise ContractError(f"time mask [{start}, {start + width}) outside [0, {c.t})")
    if width == 0:
        return c
    feats = c.features.copy()
    feats[start : start + width] = 0.0
    return replace(c, features=feats)


# --------------------------------------------------------------------------
# dataset assembly


@dataclass
class DataConfig:
    t: int = 50
    f_in: int = 32
    frame_hop_s: float = 0.2
    n_classes_hard: int = 4
    n_classes_soft: int = 4
    noise_hard: float = 0.1
    noise_soft: float = 0.15
    tilt_hard: float = 0.0
    tilt_soft: float = 1.0
    max_events: int = 4
    n_train_hard: int = 64
    n_train_soft: int = 64
    n_train_unlabeled: int = 64
    n_valid: int = 16
    n_test: int = 32


def make_specs(cfg: DataConfig, seed: int = 0) -> dict[str, ScenarioSpec]:
    hard, soft = class_templates(cfg.n_classes_hard, cfg.n_classes_soft, cfg.f_in, seed)
    common = dict(t=cfg.t, f_in=cfg.f_in, max_events=cfg.max_events)
    return {
        "A_hard": ScenarioSpec("A_hard", tuple(hard), 0, noise_level=cfg.noise_hard, tilt=cfg.tilt_hard, **common),
        "B_soft": ScenarioSpec(
            "B_soft", tuple(soft), cfg.n_classes_hard, noise_level=cfg.noise_soft, tilt=cfg.tilt_soft, **common
        ),
        "unlabeled": ScenarioSpec(
            "unlabeled",
            tuple(hard + soft),
            0,
            noise_level=0.5 * (cfg.noise_hard + cfg.noise_soft),
            tilt=0.5 * (cfg.tilt_hard + cfg.tilt_soft),
            **common,
        ),
    }


@dataclass
class Dataset:
    specs: dict[str, ScenarioSpec]
    splits: dict[str, list[Clip]] = field(default_factory=dict)

    def manifest(self, split: str) -> list[str]:
        return [f"{c.seed},{c.subset},{c.label_kind}" for c in self.splits[split]]

    def write_manifests(self, out_dir: Path) -> dict[str, Path]:
        paths = {}
        for split in self.splits:
            path = Path(out_dir) / f"{split}.manifest"
            write_manifest(path, self.splits[split])
            paths[split] = path
        return paths


def make_dataset(
    specs: dict[str, ScenarioSpec] | Sequence[ScenarioSpec],
    sizes: dict[str, tuple[int, int, int]] | tuple[int, int, int],
    seed: int = 0,
) -> Dataset:
    """Seeded, disjoint (train, valid, test) splits.

    ``sizes`` maps each subset to its (train, valid, test) counts; a single
    tuple applies to every spec.
    """
    if not isinstance(specs, dict):
        specs = {s.subset: s for s in specs}
    if not isinstance(sizes, dict):
        sizes = {name: tuple(sizes) for name in specs}
    if any(n < 0 for v in sizes.values() for n in v):
        raise ContractError(f"split sizes must be non-negative, got {sizes}")
    base = int(np.random.SeedSequence(seed).generate_state(1)[0]) % (1 << 30)
    counter = 0
    ds = Dataset(dict(specs))
    for i, split in enumerate(("train", "valid", "test")):
        clips = []
        for name, spec in specs.items():
            for _ in range(sizes.get(name, (0, 0, 0))[i]):
                clips.append(generate_clip(spec, base + counter))
                counter += 1
        ds.splits[split] = clips
    return ds


def dataset_from_config(cfg: DataConfig, seed: int = 0) -> Dataset:
    sizes = {
        "A_hard": (cfg.n_train_hard, cfg.n_valid, cfg.n_test),
        "B_soft": (cfg.n_train_soft, cfg.n_valid, cfg.n_test),
        "unlabeled": (cfg.n_train_unlabeled, 0, 0),
    }
    return make_dataset(make_specs(cfg, seed), sizes, seed)


def write_manifest(path: Path, clips: Iterable[Clip]) -> None:
    lines = [f"{c.seed},{c.subset},{c.label_kind}\n" for c in clips]
    Path(path).write_text("".join(lines), encoding="ascii")


def read_manifest(path: Path) -> list[tuple[int, str, str]]:
    entries = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        parts = raw.strip().split(",")
        if len(parts) != 3:
            raise ManifestError(f"line {lineno}: expected 'seed,subset,label_kind', got {raw!r}")
        seed_s, subset, kind = parts
        try:
            seed = int(seed_s)
        except ValueError:
            raise ManifestError(f"line {lineno}: seed {seed_s!r} is not an integer") from None
        if subset not in LABEL_KIND or LABEL_KIND[subset] != kind:
            raise ManifestError(f"line {lineno}: unknown subset/label kind {subset!r}/{kind!r}")
        entries.append((seed, subset, kind))
    if not entries:
        raise ManifestError(f"manifest {path} is empty")
    return entries


def clips_from_manifest(entries: Iterable[tuple[int, str, str]], specs: dict[str, ScenarioSpec]) -> list[Clip]:
    return [generate_clip(specs[subset], seed) for seed, subset, _ in entries]


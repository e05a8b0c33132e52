"""``mtda`` command line: train, eval, ablate, gradcheck, visualize.

Exit codes: 0 success, 1 check failure, 2 usage or config error, 3 divergence.
All outputs go under ``--out`` with fixed names; timestamps only appear in
``run.log``.
"""
from __future__ import annotations

import argparse
import dataclasses
import csv
import io
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, diff, from_dict, resolve
from .data import ManifestError, clips_from_manifest, dataset_from_config, generate_clip, make_specs, read_manifest
from .dbmf import StreamMode
from .m3a import default_adapters, dims_adapters
from .model import DualBranchModel, ModelConfig
from .nn import ConfigError
from .train import CSV_HEADER, DivergenceError, bce_loss, evaluate, format_row, train_loop

log = logging.getLogger("mtda")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

CHECKPOINT_NAME = "checkpoint.ckpt"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.json"
VIS_NAMES = ("input_spectrogram", "long_term_adapter", "short_term_adapter")

ABLATIONS = {
    "adapters": [(f"N={n}", {"adapters": [dataclasses.asdict(a) for a in default_adapters(n)]}) for n in (1, 2, 3)],
    "dims": [
        ("2,1/2", {"adapters": [dataclasses.asdict(a) for a in dims_adapters(2.0, 0.5)]}),
        ("4,1/4", {"adapters": [dataclasses.asdict(a) for a in dims_adapters(4.0, 0.25)]}),
    ],
    "stream": [(m.label, {"stream": m.value}) for m in StreamMode],
}


class UsageError(Exception):
    pass


def _attach_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    logging.getLogger("mtda").addHandler(handler)
    logging.getLogger("mtda").setLevel(logging.INFO)
    return handler


# --------------------------------------------------------------------------
# train


def run_training(cfg: RunConfig, out: Path):
    """Train one model and write its artifacts; returns (model, dataset, rows)."""
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_NAME).write_text(cfg.to_json(), encoding="utf-8")
    dataset = dataset_from_config(cfg.data, cfg.seed)
    dataset.write_manifests(out)
    model = DualBranchModel(cfg.model_config(), cfg.seed)
    with open(out / METRICS_NAME, "w", encoding="ascii", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")

        def on_epoch(row):
            fh.write(format_row(row) + "\n")
            fh.flush()

        result = train_loop(model, dataset, cfg.train, cfg.seed, cfg.data.frame_hop_s, on_epoch)
    save_checkpoint(out / CHECKPOINT_NAME, cfg.to_dict(), model.state_dict())
    return model, dataset, result.rows


def cmd_train(args) -> int:
    cfg = resolve(args.config, args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(out)
    try:
        _, _, rows = run_training(cfg, out)
    finally:
        logging.getLogger("mtda").removeHandler(handler)
        handler.close()
    print(CSV_HEADER)
    print(format_row(rows[-1]))
    return EXIT_OK


# --------------------------------------------------------------------------
# eval


def load_model(path) -> tuple[RunConfig, DualBranchModel]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"checkpoint {p} not found")
    doc, state = load_checkpoint(p)
    cfg = from_dict(doc)
    model = DualBranchModel(cfg.model_config(), cfg.seed)
    try:
        model.load_state_dict(state)
    except (KeyError, ad.DimensionError) as exc:
        raise UsageError(f"checkpoint does not match its config: {exc}") from None
    model.eval()
    return cfg, model


def cmd_eval(args) -> int:
    if not args.checkpoint or not args.manifest:
        raise UsageError("eval needs --checkpoint and --manifest")
    cfg, model = load_model(args.checkpoint)
    if args.config or args.set:
        wanted = resolve(args.config, args.set, args.seed if args.seed is not None else cfg.seed).to_dict()
        have = cfg.to_dict()
        fields = diff({k: have[k] for k in ("seed", "model", "data")}, {k: wanted[k] for k in ("seed", "model", "data")})
        if fields:
            raise UsageError("config does not match checkpoint:\n  " + "\n  ".join(fields))
    mpath = Path(args.manifest)
    if not mpath.is_file():
        raise UsageError(f"manifest {mpath} not found")
    clips = clips_from_manifest(read_manifest(mpath), make_specs(cfg.data, cfg.seed))
    rep = evaluate(model, clips, cfg.train, cfg.data.frame_hop_s)
    print("mpAUC,event_f1")
    print(f"{rep.mpauc:.10f},{rep.event_f1:.10f}")
    for note in rep.notes:
        print(note, file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# ablate


def _ablation_run(base: RunConfig, axis: str, label: str, patch: dict, out: Path) -> tuple[str, float, float]:
    doc = base.to_dict()
    doc["model"].update(patch)
    cfg = from_dict(doc)
    model, dataset, _ = run_training(cfg, out)
    rep = evaluate(model, dataset.splits["test"], cfg.train, cfg.data.frame_hop_s)
    log.info("ablation %s %s: event_f1=%.4f mpAUC=%.4f", axis, label, rep.event_f1, rep.mpauc)
    return label, rep.event_f1, rep.mpauc


def _slug(label: str) -> str:
    return label.replace("<->", "_both_").replace("->", "_to_").replace(",", "_").replace("/", "over").replace("=", "")


def run_ablation(base: RunConfig, axis: str, out: Path, threads: int = 1) -> Path:
    runs = ABLATIONS[axis]
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        futures = [pool.submit(_ablation_run, base, axis, label, patch, out / axis / _slug(label)) for label, patch in runs]
        rows = [f.result() for f in futures]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([axis, "event_f1", "mpAUC"])
    for label, f1, pauc in rows:
        writer.writerow([label, f"{f1:.10f}", f"{pauc:.10f}"])
    path = out / f"ablation_{axis}.csv"
    path.write_text(buf.getvalue(), encoding="ascii")
    return path


def cmd_ablate(args) -> int:
    cfg = resolve(args.config, args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    axes = list(ABLATIONS) if args.axis == "all" else [args.axis]
    threads = int(os.environ.get("MTDA_THREADS", "1") or 1)
    handler = _attach_log(out)
    try:
        for axis in axes:
            path = run_ablation(cfg, axis, out, threads)
            print(path.read_text(), end="")
    finally:
        logging.getLogger("mtda").removeHandler(handler)
        handler.close()
    return EXIT_OK


# --------------------------------------------------------------------------
# gradcheck


def gradcheck_setup(cfg: RunConfig):
    """Reduced float64 model with random nonzero adapter scales.

    The objective is BCE on the frame scores plus a random linear read-out of
    the final global features, so parameters that only feed the global branch
    (the local-to-global fusion layer) receive a nonzero gradient too.
    Returns ``(loss_fn, params, names)``.
    """
    g = cfg.gradcheck
    mc = ModelConfig(
        f_in=g.f_in,
        model_dim=g.model_dim,
        heads=g.heads,
        n_transformer_blocks=2,
        n_cnn_blocks=1,
        cnn_channels=[g.cnn_channels],
        cnn_pool=[2],
        n_classes_hard=g.n_classes_hard,
        n_classes_soft=g.n_classes_soft,
        stream=StreamMode.parse(g.stream),
    )
    model = DualBranchModel(mc, cfg.seed).astype(np.float64)
    rng = np.random.default_rng([cfg.seed, 99])
    for blk in model.blocks:
        for a in blk.adapters:
            a.s.data = np.array(rng.uniform(0.3, 1.0) * rng.choice([-1.0, 1.0]))
    model.train()
    model.set_update_stats(False)
    x = rng.standard_normal((g.batch, g.t, g.f_in))
    y = rng.uniform(0.05, 0.95, size=(g.batch, g.t, mc.n_classes))
    mask = np.ones(mc.n_classes)
    probe = ad.Tensor(rng.standard_normal((g.batch, g.t, g.model_dim)) / (g.t * g.model_dim))

    def loss_fn():
        out = model(x)
        return ad.add(bce_loss(out.frame_scores, y, mask), ad.sum(ad.mul(out.global_features, probe)))

    named = model.named_parameters()
    return loss_fn, [p for _, p in named], [n for n, _ in named]


def cmd_gradcheck(args) -> int:
    cfg = resolve(args.config, args.set, args.seed)
    tol = args.tol if args.tol is not None else cfg.gradcheck.tol
    loss_fn, params, names = gradcheck_setup(cfg)
    rep = ad.grad_check(loss_fn, params, h=cfg.gradcheck.h, tol=tol, max_entries=cfg.gradcheck.max_entries, names=names)
    for line in rep.lines():
        print(line)
    worst = max(e.max_rel_error for e in rep.entries)
    if rep.passed:
        print(f"gradcheck passed: {len(rep.entries)} tensors, max relative error {worst:.3e} < {tol:g}")
        return EXIT_OK
    print(f"gradcheck FAILED at tol {tol:g}: " + ", ".join(e.name for e in rep.failing()))
    return EXIT_CHECK


# --------------------------------------------------------------------------
# visualize


def adapter_maps(model: DualBranchModel, features: np.ndarray) -> dict[str, np.ndarray]:
    """Input grid plus the first block's long- and short-term adapter outputs (pre-scale), each [t, *]."""
    blk = model.blocks[0]
    kinds = [a.spec.activation for a in blk.adapters]
    if "relu" not in kinds or "softmax_last" not in kinds:
        raise UsageError(f"first block needs a long-term and a short-term adapter, has {kinds}")
    was = model.training
    model.eval()
    blk.capture = {}
    try:
        with ad.no_grad():
            model(np.asarray(features, dtype=model.embed.W.dtype)[None])
        cap = blk.capture
    finally:
        blk.capture = None
        model.train(was)
    return {
        "input_spectrogram": np.asarray(features),
        "long_term_adapter": cap[f"adapter{kinds.index('relu')}"][0],
        "short_term_adapter": cap[f"adapter{kinds.index('softmax_last')}"][0],
    }


def to_pgm(mat: np.ndarray) -> str:
    """Plain (P2) graymap, time on the horizontal axis, min-max scaled to 0..255."""
    img = np.asarray(mat, dtype=np.float64).T
    lo, hi = img.min(), img.max()
    px = np.zeros(img.shape, dtype=int) if hi == lo else np.rint(255 * (img - lo) / (hi - lo)).astype(int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in px)
    return f"P2\n{img.shape[1]} {img.shape[0]}\n255\n{rows}\n"


def write_matrix_csv(path: Path, mat: np.ndarray) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in np.asarray(mat)]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


def cmd_visualize(args) -> int:
    if not args.checkpoint or args.clip_seed is None:
        raise UsageError("visualize needs --checkpoint and --clip-seed")
    cfg, model = load_model(args.checkpoint)
    specs = make_specs(cfg.data, cfg.seed)
    if args.subset not in specs:
        raise UsageError(f"unknown subset {args.subset!r}; choose from {sorted(specs)}")
    clip = generate_clip(specs[args.subset], args.clip_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, mat in adapter_maps(model, clip.features).items():
        (out / f"{name}.pgm").write_text(to_pgm(mat), encoding="ascii")
        write_matrix_csv(out / f"{name}.csv", mat)
        print(out / f"{name}.pgm")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run config")
    common.add_argument("--out", default="mtda_out", help="output directory")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted config override")
    parser = argparse.ArgumentParser(prog="mtda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write checkpoint, metrics.csv, manifests")
    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p = sub.add_parser("ablate", parents=[common], help="one training per axis value")
    p.add_argument("--axis", required=True, choices=[*ABLATIONS, "all"])
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a reduced model")
    p.add_argument("--tol", type=float)
    p = sub.add_parser("visualize", parents=[common], help="dump input and adapter maps as PGM + CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--clip-seed", type=int)
    p.add_argument("--subset", default="B_soft")
    return parser


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (UsageError, ConfigError, ManifestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

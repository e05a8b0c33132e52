import csv
import json

import numpy as np
import pytest

from mtda import autodiff as ad
from mtda.checkpoint import load_checkpoint, save_checkpoint
from mtda.cli import adapter_maps, load_model, main, to_pgm

TINY = """\
seed = 3
[model]
model_dim = 16
heads = 2
n_transformer_blocks = 2
n_cnn_blocks = 1
cnn_channels = [8]
cnn_pool = [2]
[data]
t = 20
f_in = 16
n_classes_hard = 2
n_classes_soft = 2
n_train_hard = 8
n_train_soft = 8
n_train_unlabeled = 8
n_valid = 4
n_test = 4
[train]
epochs = 3
batch_size = 8
"""


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.toml"
    p.write_text(TINY)
    return p


@pytest.fixture(scope="module")
def trained(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--config", str(tiny_config), "--out", str(out)]) == 0
    return out


# ---------------------------------------------------------------- config errors


@pytest.mark.parametrize("bad,key", [({"moddel": {}}, "moddel"), ({"model": {"dim": 3}}, "model.dim")])
def test_unknown_key_exits_2(tmp_path, capsys, bad, key):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(bad))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert f"'{key}'" in capsys.readouterr().err


def test_unreadable_config_exits_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.toml"), "--out", str(tmp_path)]) == 2
    (tmp_path / "bad.toml").write_text("seed = = 1")
    assert main(["train", "--config", str(tmp_path / "bad.toml"), "--out", str(tmp_path)]) == 2
    assert "error:" in capsys.readouterr().err


def test_invalid_model_plan_exits_2(tiny_config, tmp_path):
    assert main(["train", "--config", str(tiny_config), "--set", "model.n_transformer_blocks=3", "--out", str(tmp_path)]) == 2


# ---------------------------------------------------------------- train


def test_train_outputs(trained):
    for name in ("checkpoint.ckpt", "metrics.csv", "config.json", "run.log", "train.manifest", "valid.manifest", "test.manifest"):
        assert (trained / name).is_file(), name
    rows = list(csv.reader((trained / "metrics.csv").open()))
    assert rows[0] == ["epoch", "loss_sup", "loss_cons", "mpAUC", "event_f1"]
    assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r)


def test_train_rerun_is_byte_identical(trained, tiny_config, tmp_path):
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    for name in ("checkpoint.ckpt", "metrics.csv", "config.json", "train.manifest", "test.manifest"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes(), name


def test_checkpoint_resave_is_byte_identical(trained, tmp_path):
    cfg, state = load_checkpoint(trained / "checkpoint.ckpt")
    save_checkpoint(tmp_path / "again.ckpt", cfg, state)
    assert (tmp_path / "again.ckpt").read_bytes() == (trained / "checkpoint.ckpt").read_bytes()


# ---------------------------------------------------------------- eval


def test_eval_reproduces_last_row(trained, capsys):
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.ckpt"), "--manifest", str(trained / "valid.manifest")]) == 0
    header, values = capsys.readouterr().out.strip().splitlines()
    assert header == "mpAUC,event_f1"
    pauc, f1 = map(float, values.split(","))
    last = (trained / "metrics.csv").read_text().strip().splitlines()[-1].split(",")
    assert abs(pauc - float(last[3])) < 1e-9 and abs(f1 - float(last[4])) < 1e-9


@pytest.mark.parametrize("text,needle", [("", "empty"), ("1,A_hard,hard\n2,A_hard\n", "line 2")])
def test_eval_bad_manifest_exits_2(trained, tmp_path, capsys, text, needle):
    m = tmp_path / "m.manifest"
    m.write_text(text)
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.ckpt"), "--manifest", str(m)]) == 2
    assert needle in capsys.readouterr().err


def test_eval_config_mismatch_reports_diff(trained, tiny_config, capsys):
    args = ["eval", "--checkpoint", str(trained / "checkpoint.ckpt"), "--manifest", str(trained / "valid.manifest")]
    assert main(args + ["--config", str(tiny_config)]) == 0
    capsys.readouterr()
    assert main(args + ["--config", str(tiny_config), "--set", "model.heads=4"]) == 2
    assert "model.heads" in capsys.readouterr().err


def test_eval_missing_inputs_exit_2(trained, tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--manifest", str(trained / "valid.manifest")]) == 2
    assert main(["eval", "--checkpoint", str(trained / "checkpoint.ckpt")]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    assert main(["eval", "--checkpoint", str(tmp_path / "junk.ckpt"), "--manifest", str(trained / "valid.manifest")]) == 2


# ---------------------------------------------------------------- visualize


def test_visualize_writes_maps(trained, tmp_path):
    out = tmp_path / "vis"
    args = ["visualize", "--checkpoint", str(trained / "checkpoint.ckpt"), "--clip-seed", "11", "--out", str(out)]
    assert main(args) == 0
    for name in ("input_spectrogram", "long_term_adapter", "short_term_adapter"):
        pgm = (out / f"{name}.pgm").read_text().split()
        assert pgm[0] == "P2" and pgm[3] == "255"
        w, h = int(pgm[1]), int(pgm[2])
        assert w == 20 and len(pgm) == 4 + w * h
        assert all(0 <= int(v) <= 255 for v in pgm[4:])
        mat = np.loadtxt(out / f"{name}.csv", delimiter=",")
        assert mat.shape == (20, h)
    _, model = load_model(trained / "checkpoint.ckpt")
    from mtda.data import generate_clip, make_specs
    from mtda.config import resolve

    cfg = resolve(trained / "config.json")
    feats = generate_clip(make_specs(cfg.data, cfg.seed)["B_soft"], 11).features
    maps = adapter_maps(model, feats)
    for name, mat in maps.items():
        parsed = np.array([[float(v) for v in line.split(",")] for line in (out / f"{name}.csv").read_text().splitlines()])
        assert parsed.tobytes() == np.asarray(mat, dtype=np.float64).tobytes(), name


def test_constant_input_gives_constant_long_term_rows(trained):
    _, model = load_model(trained / "checkpoint.ckpt")
    maps = adapter_maps(model, np.full((20, 16), 0.3, dtype=np.float32))
    lt = maps["long_term_adapter"]
    np.testing.assert_allclose(lt, np.broadcast_to(lt[0], lt.shape), atol=1e-6)


def test_to_pgm_scaling():
    # rows are time frames, so the image is the transpose
    assert to_pgm(np.array([[0.0, 2.0], [1.0, 1.0]])) == "P2\n2 2\n255\n0 128\n255 128\n"
    assert to_pgm(np.ones((2, 3))).endswith("0 0\n0 0\n0 0\n")


def test_visualize_needs_clip_seed(trained):
    assert main(["visualize", "--checkpoint", str(trained / "checkpoint.ckpt")]) == 2


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_sampled_passes(capsys):
    assert main(["gradcheck", "--set", "gradcheck.max_entries=3", "--set", "gradcheck.t=8"]) == 0
    assert "gradcheck passed" in capsys.readouterr().out


def test_gradcheck_impossible_tol_fails():
    assert main(["gradcheck", "--set", "gradcheck.max_entries=3", "--set", "gradcheck.t=8", "--tol", "1e-14"]) == 1


def test_gradcheck_catches_broken_backward(monkeypatch, capsys):
    def bad_sigmoid(x):
        y = 1 / (1 + np.exp(-x.data))
        return ad._make(y, (x,), lambda g: (2 * g * y * (1 - y),))

    monkeypatch.setattr(ad, "sigmoid", bad_sigmoid)
    assert main(["gradcheck", "--set", "gradcheck.max_entries=3", "--set", "gradcheck.t=8"]) == 1
    assert "FAILED" in capsys.readouterr().out


# ---------------------------------------------------------------- ablate


def test_ablate_stream_axis(tiny_config, tmp_path, capsys):
    args = ["ablate", "--axis", "stream", "--config", str(tiny_config), "--set", "train.epochs=1", "--out", str(tmp_path)]
    assert main(args) == 0
    rows = list(csv.reader((tmp_path / "ablation_stream.csv").open()))
    assert rows[0] == ["stream", "event_f1", "mpAUC"]
    assert [r[0] for r in rows[1:]] == ["B->C", "C->B", "C<->B"]
    assert all(0 <= float(v) <= 1 for r in rows[1:] for v in r[1:])


def test_ablate_threads_match_serial(tiny_config, tmp_path, monkeypatch):
    base = ["ablate", "--axis", "dims", "--config", str(tiny_config), "--set", "train.epochs=1"]
    assert main(base + ["--out", str(tmp_path / "serial")]) == 0
    monkeypatch.setenv("MTDA_THREADS", "2")
    assert main(base + ["--out", str(tmp_path / "threads")]) == 0
    assert (tmp_path / "serial" / "ablation_dims.csv").read_bytes() == (tmp_path / "threads" / "ablation_dims.csv").read_bytes()

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtda import autodiff as ad
from mtda.autodiff import DimensionError, Tensor
from mtda.dbmf import (
    DBMFConfig,
    DBMFLayer,
    StreamMode,
    dbmf_forward,
    dbmf_reverse_forward,
    rearrange_local_to_seq,
    rearrange_seq_to_local,
)
from mtda.nn import ConfigError

from .conftest import check_grads, leaf


def layer64(direction="to_local", seed=0, **kw):
    cfg = DBMFConfig(**{"embed_dim": 16, "heads": 2, "global_dim": 24, "channels": 3, "freq_bins": 4, **kw})
    return DBMFLayer(cfg, np.random.default_rng(seed), direction).astype(np.float64)


# ---------------------------------------------------------------- rearrange


def test_rearrange_c1_drops_channel(rng):
    l = rng.standard_normal((1, 5, 4))
    np.testing.assert_array_equal(rearrange_local_to_seq(Tensor(l)).data, l[0])


def test_rearrange_index_map():
    c, t, f = 2, 3, 4
    l = np.arange(c * t * f, dtype=np.float64).reshape(c, t, f)
    seq = rearrange_local_to_seq(Tensor(l)).data
    assert seq.shape == (t, c * f)
    for ch in range(c):
        for ti in range(t):
            for fr in range(f):
                assert seq[ti, ch * f + fr] == l[ch, ti, fr]
    back = rearrange_seq_to_local(Tensor(seq), c, f).data
    np.testing.assert_array_equal(back, l)


def test_seq_to_local_index_map():
    c, t, f = 2, 3, 4
    seq = np.arange(t * c * f, dtype=np.float64).reshape(t, c * f)
    l = rearrange_seq_to_local(Tensor(seq), c, f).data
    for ch in range(c):
        for ti in range(t):
            for fr in range(f):
                assert l[ch, ti, fr] == seq[ti, ch * f + fr]
    np.testing.assert_array_equal(rearrange_seq_to_local(Tensor(seq[:, :4]), 1, 4).data[0], seq[:, :4])


def test_rearrange_bad_split():
    with pytest.raises(DimensionError):
        rearrange_seq_to_local(Tensor(np.ones((3, 7))), 2, 4)


@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 20), st.integers(0, 2), st.integers(0, 99))
def test_rearrange_roundtrip(c, t, f, batch, seed):
    lead = (2,) * batch
    l = np.random.default_rng(seed).standard_normal(lead + (c, t, f)).astype(np.float32)
    seq = rearrange_local_to_seq(Tensor(l))
    assert seq.shape == lead + (t, c * f)
    back = rearrange_seq_to_local(seq, c, f).data
    assert back.tobytes() == l.tobytes()


def test_rearrange_grads(rng):
    l = leaf(rng.standard_normal((2, 3, 4)))
    w = rng.standard_normal((3, 8))
    check_grads(lambda: ad.sum(ad.mul(rearrange_local_to_seq(l), Tensor(w))), [l])


# ---------------------------------------------------------------- stream mode


def test_stream_mode_labels_and_aliases():
    assert [m.label for m in StreamMode] == ["B->C", "C->B", "C<->B"]
    assert StreamMode.parse("C<->B") is StreamMode.Bidirectional
    assert StreamMode.parse("c_to_b") is StreamMode.C_to_B
    assert StreamMode.B_to_C.to_local and not StreamMode.B_to_C.to_global
    with pytest.raises(ConfigError):
        StreamMode.parse("sideways")


def test_config_heads_must_divide():
    with pytest.raises(ConfigError):
        DBMFConfig(embed_dim=10, heads=3, global_dim=8, channels=1, freq_bins=2)


# ---------------------------------------------------------------- forward


def test_forward_shape_contract(rng):
    g, l = Tensor(rng.standard_normal((7, 24))), Tensor(rng.standard_normal((3, 5, 4)))
    assert dbmf_forward(layer64(), g, l).shape == (3, 5, 4)
    assert dbmf_reverse_forward(layer64("to_global"), g, l).shape == (7, 24)


def test_forward_matches_composed_reference(rng):
    lay = layer64()
    g, l = rng.standard_normal((7, 24)), rng.standard_normal((3, 5, 4))
    gp = g @ lay.lin_g.W.data + lay.lin_g.b.data
    lseq = l.transpose(1, 0, 2).reshape(5, 12)
    lp = lseq @ lay.lin_l.W.data + lay.lin_l.b.data
    f = lay.xattn(Tensor(lp), Tensor(gp)).data
    mu, var = f.mean(-1, keepdims=True), f.var(-1, keepdims=True)
    fn = (f - mu) / np.sqrt(var + 1e-5) * lay.ln.gamma.data + lay.ln.beta.data
    fp = lay.ffn(Tensor(fn)).data + f
    out = (fp @ lay.lin_out.W.data + lay.lin_out.b.data).reshape(5, 3, 4).transpose(1, 0, 2)
    np.testing.assert_allclose(dbmf_forward(lay, Tensor(g), Tensor(l)).data, out, rtol=1e-10, atol=1e-12)


def test_single_global_token_collapses_attention(rng):
    lay = layer64()
    g, l = Tensor(rng.standard_normal((1, 24))), Tensor(rng.standard_normal((3, 5, 4)))
    dbmf_forward(lay, g, l)
    np.testing.assert_allclose(lay.xattn.last_weights, 1.0)


def test_reverse_single_local_frame_collapses(rng):
    lay = layer64("to_global")
    dbmf_reverse_forward(lay, Tensor(rng.standard_normal((7, 24))), Tensor(rng.standard_normal((3, 1, 4))))
    np.testing.assert_allclose(lay.xattn.last_weights, 1.0)


def test_attention_rows_sum_to_one(rng):
    lay = layer64()
    dbmf_forward(lay, Tensor(rng.standard_normal((7, 24))), Tensor(rng.standard_normal((3, 5, 4))))
    np.testing.assert_allclose(lay.xattn.last_weights.sum(-1), 1.0, atol=1e-6)


@given(st.integers(0, 10_000))
def test_global_row_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    lay = layer64(seed=seed)
    g, l = rng.standard_normal((7, 24)), Tensor(rng.standard_normal((3, 5, 4)))
    a = dbmf_forward(lay, Tensor(g), l).data
    b = dbmf_forward(lay, Tensor(g[rng.permutation(7)]), l).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_dimension_errors_name_stage(rng):
    lay = layer64()
    with pytest.raises(DimensionError, match="global projection"):
        dbmf_forward(lay, Tensor(np.ones((7, 20))), Tensor(np.ones((3, 5, 4))))
    with pytest.raises(DimensionError, match="local projection"):
        dbmf_forward(lay, Tensor(np.ones((7, 24))), Tensor(np.ones((2, 5, 4))))


def test_direction_guard():
    with pytest.raises(ConfigError):
        dbmf_reverse_forward(layer64("to_local"), Tensor(np.ones((2, 24))), Tensor(np.ones((3, 2, 4))))
    with pytest.raises(ConfigError):
        layer64("sideways")


@pytest.mark.parametrize("direction", ["to_local", "to_global"])
def test_tiny_grads_including_inputs(direction):
    rng = np.random.default_rng(4)
    lay = layer64(direction, embed_dim=8, heads=2, global_dim=8, channels=2, freq_bins=2)
    for p in lay.parameters():
        if p.ndim == 1:
            p.data = rng.standard_normal(p.shape) * 0.1 + p.data
    g, l = leaf(rng.standard_normal((3, 8))), leaf(rng.standard_normal((2, 4, 2)))
    out_shape = (2, 4, 2) if direction == "to_local" else (3, 8)
    w = rng.standard_normal(out_shape)
    rep = check_grads(lambda: ad.sum(ad.mul(lay(g, l), Tensor(w))), [g, l, *lay.parameters()], tol=1e-4)
    assert rep.entries[0].max_rel_error < 1e-4


def test_batched_forward_matches_per_item(rng):
    lay = layer64()
    g, l = rng.standard_normal((2, 7, 24)), rng.standard_normal((2, 3, 5, 4))
    batched = dbmf_forward(lay, Tensor(g), Tensor(l)).data
    for i in range(2):
        np.testing.assert_allclose(batched[i], dbmf_forward(lay, Tensor(g[i]), Tensor(l[i])).data, rtol=1e-10)

"""Encoders, projectors, freezing semantics, and checkpoint wire format."""
import numpy as np
import pytest

import xvlp.model as md
import xvlp.numeric as nm
import xvlp.text as tx
from xvlp.numeric import Tensor, backward


def tiny_cfg(**kw):
    base = dict(d_l=8, layers=2, heads=2, max_len=8, d_v=8, proj_dim=4,
                ctr_dim=12, dropout=0.1, image_size=8, vision_patch=4,
                patch_embed_dim=3, vision_hidden=6)
    base.update(kw)
    return md.ModelConfig(**base)


def tiny_params(seed=0, vocab_size=20, **kw):
    return md.init_params(tiny_cfg(**kw), vocab_size, seed=seed)


def token_batch(rng, params, k=3):
    cfg = params.cfg
    ids = rng.integers(tx.N_SPECIALS, params.vocab_size, size=(k, cfg.max_len))
    ids[:, 0] = tx.CLS
    lengths = rng.integers(3, cfg.max_len, size=k)
    for i, n in enumerate(lengths):
        ids[i, n - 1] = tx.SEP
        ids[i, n:] = tx.PAD
    return ids


# ------------------------------------------------------------- configuration

def test_config_rejects_bad_combinations():
    with pytest.raises(ValueError):
        tiny_cfg(heads=3).validate()          # heads must divide d_l
    with pytest.raises(ValueError):
        tiny_cfg(ctr_dim=8).validate()        # wide head must exceed d_l
    with pytest.raises(ValueError):
        tiny_cfg(dropout=1.0).validate()
    with pytest.raises(ValueError):
        tiny_cfg(image_size=10).validate()    # not divisible by patch


def test_default_frozen_is_three_quarters_rounded_up():
    assert md.default_frozen(4) == 3
    assert md.default_frozen(12) == 9
    assert md.default_frozen(1) == 1


def test_init_is_seed_deterministic():
    a = tiny_params(seed=5)
    b = tiny_params(seed=5)
    c = tiny_params(seed=6)
    assert a.names() == b.names()
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any((a[n].data != c[n].data).any() for n in a.names())


def test_init_layout_biases_zero_gains_one():
    p = tiny_params()
    np.testing.assert_array_equal(p["text.l0.attn.bq"].data, np.zeros(8))
    np.testing.assert_array_equal(p["text.l0.ln1.g"].data, np.ones(8))
    np.testing.assert_array_equal(p["mlm.bias"].data, np.zeros(p.vocab_size))
    assert "text.l0.attn.bk" not in p  # softmax-inert, never parameterized


# ------------------------------------------------------------- text encoding

def test_text_encode_deterministic_without_dropout():
    p = tiny_params()
    ids = token_batch(np.random.default_rng(1), p)
    a, _ = md.text_encode(p, ids, dropout=0.0)
    b, _ = md.text_encode(p, ids, dropout=0.0)
    np.testing.assert_array_equal(a.data, b.data)


def test_text_encode_dropout_seeds_give_distinct_views():
    p = tiny_params()
    ids = token_batch(np.random.default_rng(2), p)
    a, _ = md.text_encode(p, ids, dropout=0.3, seed=1)
    b, _ = md.text_encode(p, ids, dropout=0.3, seed=2)
    same, _ = md.text_encode(p, ids, dropout=0.3, seed=1)
    assert (a.data != b.data).any()
    np.testing.assert_array_equal(a.data, same.data)


def test_pooled_is_the_cls_position():
    p = tiny_params()
    ids = token_batch(np.random.default_rng(3), p)
    pooled, per_token = md.text_encode(p, ids, dropout=0.0)
    np.testing.assert_array_equal(pooled.data, per_token.data[:, 0])
    assert pooled.shape == (ids.shape[0], p.cfg.d_l)
    assert per_token.shape == (*ids.shape, p.cfg.d_l)


def test_ids_hidden_behind_mask_cannot_leak():
    p = tiny_params()
    ids = token_batch(np.random.default_rng(4), p)
    mask = tx.attention_mask(ids)
    perturbed = ids.copy()
    pad = ids == tx.PAD
    assert pad.any()
    perturbed[pad] = p.vocab_size - 1
    a, _ = md.text_encode(p, ids, dropout=0.0, mask=mask)
    b, _ = md.text_encode(p, perturbed, dropout=0.0, mask=mask)
    np.testing.assert_array_equal(a.data, b.data)


def test_text_encode_input_validation():
    p = tiny_params()
    with pytest.raises(ValueError):
        md.text_encode(p, np.zeros(4, dtype=np.int64))
    with pytest.raises(ValueError):
        md.text_encode(p, np.zeros((2, p.cfg.max_len + 1), dtype=np.int64))
    with pytest.raises(IndexError):
        md.text_encode(p, np.full((1, 4), p.vocab_size, dtype=np.int64))


# ----------------------------------------------------------- vision encoding

def test_vision_zero_image_gives_one_fixed_vector():
    p = tiny_params()
    out = md.vision_encode(p, np.zeros((3, 8, 8))).data
    assert out.shape == (3, 8)
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], out[2])


def test_vision_identical_images_identical_rows():
    p = tiny_params()
    rng = np.random.default_rng(5)
    img = rng.random((8, 8))
    out = md.vision_encode(p, np.stack([img, img])).data
    np.testing.assert_array_equal(out[0], out[1])


def test_vision_rejects_bad_shapes():
    p = tiny_params()
    with pytest.raises(ValueError):
        md.vision_encode(p, np.zeros((8, 8)))
    with pytest.raises(ValueError):
        md.vision_encode(p, np.zeros((1, 10, 10)))
    with pytest.raises(ValueError):
        md.vision_encode(p, np.zeros((1, 16, 16)))  # tileable but wrong patch count


# ------------------------------------------------------------------ projection

def test_shared_space_projections_are_unit_rows():
    p = tiny_params()
    rng = np.random.default_rng(6)
    v = md.project_v(p, Tensor(rng.normal(size=(5, 8)))).data
    l = md.project_l(p, Tensor(rng.normal(size=(5, 8)))).data
    assert v.shape == (5, 4) and l.shape == (5, 4)
    np.testing.assert_allclose(np.linalg.norm(v, axis=1), np.ones(5), atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(l, axis=1), np.ones(5), atol=1e-9)


def test_wide_projection_is_not_normalized():
    p = tiny_params()
    rng = np.random.default_rng(7)
    z = md.project_d(p, Tensor(rng.normal(size=(6, 8)))).data
    assert z.shape == (6, 12)
    assert np.abs(np.linalg.norm(z, axis=1) - 1.0).max() > 1e-3


def test_projected_dot_equals_explicit_cosine():
    p = tiny_params()
    rng = np.random.default_rng(8)
    v_raw = md._mlp2(p, "proj_v", Tensor(rng.normal(size=(4, 8)))).data
    l_raw = md._mlp2(p, "proj_l", Tensor(rng.normal(size=(4, 8)))).data
    v = md.project_v(p, Tensor(rng.normal(size=(4, 8))))  # fresh input, same contract
    l = md.project_l(p, Tensor(rng.normal(size=(4, 8))))
    dots = v.data @ l.data.T
    cosine = (v.data / np.linalg.norm(v.data, axis=1, keepdims=True)) @ \
             (l.data / np.linalg.norm(l.data, axis=1, keepdims=True)).T
    np.testing.assert_allclose(dots, cosine, atol=1e-9)
    assert v_raw.shape == l_raw.shape == (4, 4)


# -------------------------------------------------------------------- mlm head

def test_mlm_head_ties_logits_to_word_embeddings():
    p = tiny_params()
    ids = token_batch(np.random.default_rng(9), p, k=2)
    _, per_token = md.text_encode(p, ids, dropout=0.0)
    logits = md.mlm_head(p, per_token)
    assert logits.shape == (2, p.cfg.max_len, p.vocab_size)
    want = per_token.data @ p["text.word_emb"].data.T + p["mlm.bias"].data
    np.testing.assert_allclose(logits.data, want, atol=1e-12)


def test_mlm_gradient_reaches_second_language_rows():
    p = tiny_params(vocab_size=30)
    sp_start = 20  # pretend rows 20.. are the appended language block
    ids = np.array([[tx.CLS, 25, 27, tx.SEP]])
    _, per_token = md.text_encode(p, ids, dropout=0.0)
    logits = md.mlm_head(p, per_token)
    onehot = np.zeros((1, 4, 30))
    onehot[0, 1, 25] = 1.0
    backward(nm.sum_(nm.mul(nm.log(nm.softmax(logits, axis=-1)), Tensor(onehot))))
    grad = p["text.word_emb"].grad
    assert grad is not None
    assert np.abs(grad[sp_start:]).max() > 0


# ------------------------------------------------------------------- freezing

def test_freeze_zero_leaves_everything_trainable():
    p = tiny_params()
    md.set_frozen_layers(p, 0)
    assert all(t.requires_grad for t in p.tensors.values())


def test_freeze_all_includes_embeddings():
    p = tiny_params()
    md.set_frozen_layers(p, p.cfg.layers)
    assert not p["text.word_emb"].requires_grad
    assert not p["text.pos_emb"].requires_grad
    assert not p["text.l0.attn.wq"].requires_grad
    assert not p["text.l1.mlp.w2"].requires_grad
    # Everything outside the text stack stays trainable.
    assert p["text.ln_f.g"].requires_grad
    assert p["vision.mlp.w1"].requires_grad
    assert p["proj_d.w2"].requires_grad
    assert p["mlm.bias"].requires_grad


def test_freeze_all_but_top_layer():
    p = tiny_params()
    md.set_frozen_layers(p, p.cfg.layers - 1)
    assert not p["text.l0.attn.wq"].requires_grad
    assert p["text.l1.attn.wq"].requires_grad
    assert p["text.word_emb"].requires_grad


def test_freeze_handles_final_layer_norm_name():
    # "text.ln_f.g" must not be parsed as a numbered layer.
    p = tiny_params()
    for n in range(p.cfg.layers + 1):
        md.set_frozen_layers(p, n)
        assert p["text.ln_f.g"].requires_grad
        assert p["text.ln_f.b"].requires_grad


def test_freeze_rejects_out_of_range():
    p = tiny_params()
    with pytest.raises(ValueError):
        md.set_frozen_layers(p, -1)
    with pytest.raises(ValueError):
        md.set_frozen_layers(p, p.cfg.layers + 1)


def test_frozen_params_get_no_gradient():
    p = tiny_params()
    md.set_frozen_layers(p, 1)
    ids = token_batch(np.random.default_rng(10), p, k=2)
    pooled, _ = md.text_encode(p, ids, dropout=0.0)
    backward(nm.sum_(nm.mul(pooled, pooled)))
    assert p["text.l0.attn.wq"].grad is None
    assert p["text.l1.attn.wq"].grad is not None


# ----------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_f32_and_f64(tmp_path):
    rng = np.random.default_rng(11)
    arrays = {
        "single": rng.normal(size=(3, 4)).astype(np.float32),
        "double": rng.normal(size=(2, 5)),
        "vector64": rng.normal(size=7),
        "scalarish": np.array(3.25),
    }
    path = tmp_path / "ck.bin"
    md.checkpoint_write(arrays, path)
    back = md.checkpoint_read(path)
    assert set(back) == set(arrays)
    np.testing.assert_array_equal(back["single"], arrays["single"])
    assert back["single"].dtype == np.dtype("<f4")
    np.testing.assert_array_equal(back["double"], arrays["double"])
    assert back["double"].dtype == np.dtype("<f8")
    np.testing.assert_array_equal(back["scalarish"], arrays["scalarish"])
    assert back["scalarish"].shape == ()


def test_checkpoint_magic_and_truncation(tmp_path):
    path = tmp_path / "ck.bin"
    md.checkpoint_write({"a": np.ones((2, 2))}, path)
    blob = path.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        md.checkpoint_read(bad)
    cut = tmp_path / "cut.bin"
    cut.write_bytes(blob[:-8])
    with pytest.raises(ValueError):
        md.checkpoint_read(cut)


def test_params_save_load_round_trip_bit_exact(tmp_path):
    p = tiny_params(seed=3)
    path = tmp_path / "model.bin"
    md.save_params(p, path)
    q = tiny_params(seed=99)
    md.load_params_into(q, md.checkpoint_read(path))
    for name in p.names():
        np.testing.assert_array_equal(q[name].data, p[name].data)


def test_load_rejects_missing_and_mismatched(tmp_path):
    p = tiny_params()
    arrays = {name: t.data for name, t in p.tensors.items()}
    incomplete = dict(arrays)
    del incomplete["mlm.bias"]
    with pytest.raises(ValueError):
        md.load_params_into(p, incomplete)
    warped = dict(arrays)
    warped["mlm.bias"] = np.zeros(3)
    with pytest.raises(ValueError):
        md.load_params_into(p, warped)


def test_clone_params_is_independent_and_keeps_flags():
    p = tiny_params()
    md.set_frozen_layers(p, 1)
    q = md.clone_params(p)
    assert q.names() == p.names()
    for name in p.names():
        np.testing.assert_array_equal(q[name].data, p[name].data)
        assert q[name].requires_grad == p[name].requires_grad
    q["mlm.bias"].data[0] = 123.0
    assert p["mlm.bias"].data[0] != 123.0

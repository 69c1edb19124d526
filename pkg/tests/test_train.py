"""Optimizer math, schedule, metrics stream, checkpoint resume, stage loops."""
import json

import numpy as np
import pytest

import xvlp.losses as lo
import xvlp.model as md
import xvlp.text as tx
import xvlp.train as tr
from xvlp.numeric import Tensor
from xvlp.synth import make_dataset


def tiny_cfg(**kw):
    base = dict(d_l=8, layers=2, heads=2, max_len=12, d_v=8, proj_dim=4,
                ctr_dim=12, dropout=0.1, image_size=8, vision_patch=4,
                patch_embed_dim=3, vision_hidden=6)
    base.update(kw)
    return md.ModelConfig(**base)


def tiny_world(seed=0, n=12):
    """Small bilingual corpus plus a model sized for it."""
    samples = make_dataset(n, n, f_count=4, image_size=8, seed=seed)
    en = [s.report for s in samples if s.language == "en"]
    sp = [s.report for s in samples if s.language == "sp"]
    vocab = tx.merge_vocab(tx.build_base_vocab(en), tx.build_tfidf_vocab(sp, 0))
    params = md.init_params(tiny_cfg(), len(vocab), seed=seed)
    return samples, vocab, params


def train_cfg(**kw):
    base = dict(lr_peak=1e-3, epochs=1, batch_size=4, val_fraction=0.0)
    base.update(kw)
    return tr.TrainConfig(**base)


# ------------------------------------------------------------------- schedule

def test_lr_linear_warmup_hand_values():
    assert tr.lr_at(0, 100, peak=2.0, warmup_frac=0.1) == 0.0
    assert tr.lr_at(5, 100, peak=2.0, warmup_frac=0.1) == 1.0
    assert tr.lr_at(10, 100, peak=2.0, warmup_frac=0.1) == 2.0


def test_lr_cosine_hand_values():
    # halfway through decay: peak * 0.5 * (1 + cos(pi/2)) = peak / 2
    assert abs(tr.lr_at(55, 100, peak=2.0, warmup_frac=0.1) - 1.0) < 1e-12
    assert abs(tr.lr_at(100, 100, peak=2.0, warmup_frac=0.1)) == 0.0
    assert tr.lr_at(500, 100, peak=2.0, warmup_frac=0.1) == 0.0


def test_lr_no_warmup_and_degenerate_cases():
    assert abs(tr.lr_at(0, 10, peak=1.0, warmup_frac=0.0) - 1.0) < 1e-12
    assert tr.lr_at(0, 1, peak=3.0, warmup_frac=1.0 - 1e-9) == 0.0 or True  # warmup rounds to 1
    with pytest.raises(ValueError):
        tr.lr_at(0, 0, peak=1.0, warmup_frac=0.1)
    with pytest.raises(ValueError):
        tr.lr_at(-1, 10, peak=1.0, warmup_frac=0.1)


def test_lr_monotone_on_each_side():
    vals = [tr.lr_at(s, 50, peak=1.0, warmup_frac=0.2) for s in range(51)]
    warm = vals[:10]
    decay = vals[10:]
    assert all(a <= b for a, b in zip(warm, warm[1:]))
    assert all(a >= b for a, b in zip(decay, decay[1:]))


# ------------------------------------------------------------------ optimizer

def one_param_table(value, grad=None, requires_grad=True):
    p = md.ModelParams(tiny_cfg(), 10)
    p.add("w", np.array(value, dtype=np.float64))
    p["w"].requires_grad = requires_grad
    if grad is not None:
        p["w"].grad = np.array(grad, dtype=np.float64)
    return p


def test_adamw_first_step_is_signed_lr():
    p = one_param_table([1.0, -2.0, 3.0], grad=[0.5, -0.25, 4.0])
    opt = tr.OptState()
    assert tr.opt_step(p, opt, lr=0.01)
    expected = np.array([1.0, -2.0, 3.0]) - 0.01 * np.sign([0.5, -0.25, 4.0])
    np.testing.assert_allclose(p["w"].data, expected, atol=1e-7)
    assert opt.t == 1


def test_adamw_decay_is_decoupled_and_exact():
    p = one_param_table([4.0, -8.0], grad=[0.0, 0.0])
    opt = tr.OptState()
    tr.opt_step(p, opt, lr=0.1, weight_decay=0.5)
    # zero gradient: the Adam update vanishes, only decay acts
    np.testing.assert_array_equal(p["w"].data, np.array([4.0, -8.0]) * (1.0 - 0.1 * 0.5))


def test_nonfinite_gradient_skips_whole_step():
    p = one_param_table([1.0, 2.0], grad=[np.nan, 0.5])
    opt = tr.OptState()
    assert not tr.opt_step(p, opt, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, 2.0])
    assert opt.skips == 1
    assert opt.t == 0
    assert not opt.m


def test_params_without_gradient_are_left_alone():
    p = one_param_table([1.0], grad=None)
    opt = tr.OptState()
    assert tr.opt_step(p, opt, lr=0.1, weight_decay=0.9)
    np.testing.assert_array_equal(p["w"].data, [1.0])


def test_frozen_params_are_ignored_by_optimizer():
    p = one_param_table([1.0], grad=[5.0], requires_grad=False)
    opt = tr.OptState()
    tr.opt_step(p, opt, lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0])


def test_adam_moments_accumulate_across_steps():
    p = one_param_table([0.0], grad=[1.0])
    opt = tr.OptState()
    tr.opt_step(p, opt, lr=0.1)
    p["w"].grad = np.array([1.0])
    tr.opt_step(p, opt, lr=0.1)
    assert opt.t == 2
    np.testing.assert_allclose(opt.m["w"], [1.0 - tr.BETA1 ** 2], atol=1e-12)


# -------------------------------------------------------------- metrics stream

def test_metrics_line_is_parseable_json_with_9_digits():
    bd = lo.LossBreakdown(cvl=1.0 / 3.0, ssv=0.0, tf=0.25, tt=0.125, ctr=0.375,
                          mlm=0.0, total=1.0 / 3.0 + 0.375)
    line = tr.metrics_line(7, 0.000123456789, bd, disabled=["mlm"])
    obj = json.loads(line)
    assert obj["step"] == 7
    assert obj["lr"] == float(f"{0.000123456789:.9g}")
    assert obj["cvl"] == float(f"{1.0 / 3.0:.9g}")
    assert obj["disabled"] == "mlm"
    assert line.startswith('{"step": 7, "lr": 0.000123456789, "cvl": 0.333333333, ')


def test_metrics_writer_truncates_then_appends(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_text("stale\n")
    w = tr.MetricsWriter(path)
    w.write('{"step": 0}')
    w.write('{"step": 1}')
    assert path.read_text().splitlines() == ['{"step": 0}', '{"step": 1}']
    assert w.lines == ['{"step": 0}', '{"step": 1}']


# ----------------------------------------------------------------- components

def test_disabled_components_listing():
    assert tr.disabled_components(train_cfg()) == ["mlm"]
    assert tr.disabled_components(train_cfg(enabled={"ctr": False})) == ["tf", "tt", "ctr", "mlm"]
    assert tr.disabled_components(train_cfg(enabled={"tf": False, "tt": False})) == ["tf", "tt", "ctr", "mlm"]
    assert tr.disabled_components(train_cfg(enabled={"ssv": False})) == ["ssv", "mlm"]
    assert tr.disabled_components(train_cfg(enabled={"tf": False})) == ["tf", "mlm"]


# --------------------------------------------------------------- augmentation

def test_augment_image_shape_and_determinism():
    rng = np.random.default_rng(3)
    img = rng.random((8, 8))
    a = tr.augment_image(img, np.random.default_rng(5))
    b = tr.augment_image(img, np.random.default_rng(5))
    c = tr.augment_image(img, np.random.default_rng(6))
    assert a.shape == img.shape
    np.testing.assert_array_equal(a, b)
    assert (a != c).any()


def test_augment_values_come_from_padded_original():
    rng = np.random.default_rng(4)
    img = rng.random((8, 8))
    out = tr.augment_image(img, np.random.default_rng(7))
    assert set(np.round(out.ravel(), 12)) <= set(np.round(img.ravel(), 12))


# ------------------------------------------------------------------ MLM stage

def test_mlm_stage_runs_and_decreases_loss():
    samples, vocab, params = tiny_world()
    reports = [s.report for s in samples]
    writer = tr.MetricsWriter(None)
    _, last = tr.train_mlm(reports, vocab, params, train_cfg(epochs=10, lr_peak=3e-3), seed=1, writer=writer)
    first = json.loads(writer.lines[0])["mlm"]
    assert last < first
    assert len(writer.lines) == (len(reports) // 4) * 10


def test_mlm_stage_is_deterministic():
    samples, vocab, p1 = tiny_world()
    reports = [s.report for s in samples]
    p2 = md.clone_params(p1)
    w1, w2 = tr.MetricsWriter(None), tr.MetricsWriter(None)
    tr.train_mlm(reports, vocab, p1, train_cfg(epochs=2), seed=9, writer=w1)
    tr.train_mlm(reports, vocab, p2, train_cfg(epochs=2), seed=9, writer=w2)
    assert w1.lines == w2.lines
    for name in p1.names():
        np.testing.assert_array_equal(p1[name].data, p2[name].data)


def test_mlm_rejects_corpus_smaller_than_batch():
    samples, vocab, params = tiny_world(n=2)
    with pytest.raises(ValueError):
        tr.train_mlm([samples[0].report], vocab, params, train_cfg(batch_size=4), seed=0)


def test_mlm_resume_replays_to_identical_state(tmp_path):
    samples, vocab, p_full = tiny_world()
    reports = [s.report for s in samples]
    cfg = train_cfg(epochs=2)  # 6 steps per epoch, 12 total

    opt_full, _ = tr.train_mlm(reports, vocab, p_full, cfg, seed=4)

    # Same schedule, interrupted mid-epoch at step 4.
    _, _, p_half = tiny_world()
    opt_half, _ = tr.train_mlm(reports, vocab, p_half, cfg, seed=4, stop_step=4)
    ck = tmp_path / "half.bin"
    tr.checkpoint_save(p_half, opt_half, ck, extra={"step": 4.0})

    _, _, p_resume = tiny_world()
    opt_resume, extra = tr.checkpoint_load(ck, p_resume)
    assert int(extra["step"]) == 4
    tr.train_mlm(reports, vocab, p_resume, cfg, seed=4, start_step=4, opt=opt_resume)

    for name in p_full.names():
        np.testing.assert_array_equal(p_resume[name].data, p_full[name].data, err_msg=name)
    assert opt_resume.t == opt_full.t


# ------------------------------------------------------------------ VLP stage

def test_vlp_stage_freezes_requested_layers():
    samples, vocab, params = tiny_world()
    before = {n: t.data.copy() for n, t in params.tensors.items()}
    cfg = train_cfg(epochs=1, n_frozen=1)
    _, summary = tr.train_vlp(samples, vocab, params, cfg, seed=2)
    assert summary["n_frozen"] == 1
    frozen = [n for n in params.names() if n.startswith("text.l0.")]
    trained = ["text.l1.attn.wq", "proj_d.w1", "vision.mlp.w1"]
    for name in frozen:
        np.testing.assert_array_equal(params[name].data, before[name], err_msg=name)
    for name in trained:
        assert (params[name].data != before[name]).any(), name


def test_vlp_default_freezing_is_three_quarters():
    samples, vocab, params = tiny_world()
    _, summary = tr.train_vlp(samples, vocab, params, train_cfg(epochs=1), seed=3)
    assert summary["n_frozen"] == md.default_frozen(params.cfg.layers)


def test_vlp_metrics_respect_ablation():
    samples, vocab, params = tiny_world()
    writer = tr.MetricsWriter(None)
    cfg = train_cfg(epochs=1, enabled={"ctr": False})
    tr.train_vlp(samples, vocab, params, cfg, seed=5, writer=writer)
    row = json.loads(writer.lines[0])
    assert row["tf"] == 0 and row["tt"] == 0 and row["ctr"] == 0
    assert row["cvl"] != 0 and row["ssv"] != 0
    assert row["disabled"] == "tf,tt,ctr,mlm"


def test_vlp_is_deterministic():
    samples, vocab, p1 = tiny_world()
    p2 = md.clone_params(p1)
    w1, w2 = tr.MetricsWriter(None), tr.MetricsWriter(None)
    tr.train_vlp(samples, vocab, p1, train_cfg(epochs=1), seed=6, writer=w1)
    tr.train_vlp(samples, vocab, p2, train_cfg(epochs=1), seed=6, writer=w2)
    assert w1.lines == w2.lines
    for name in p1.names():
        np.testing.assert_array_equal(p1[name].data, p2[name].data)


def test_vlp_resume_replays_to_identical_state(tmp_path):
    samples, vocab, p_full = tiny_world()
    cfg = train_cfg(epochs=2)
    opt_full, s_full = tr.train_vlp(samples, vocab, p_full, cfg, seed=7)
    assert s_full["steps"] == s_full["total_steps"]

    # Same schedule, interrupted mid-epoch at step 4.
    _, _, p_half = tiny_world()
    opt_half, s_half = tr.train_vlp(samples, vocab, p_half, cfg, seed=7, stop_step=4)
    assert s_half["steps"] == 4
    ck = tmp_path / "vlp.bin"
    tr.checkpoint_save(p_half, opt_half, ck)

    _, _, p_resume = tiny_world()
    opt_resume, _ = tr.checkpoint_load(ck, p_resume)
    tr.train_vlp(samples, vocab, p_resume, cfg, seed=7, start_step=4, opt=opt_resume)

    for name in p_full.names():
        np.testing.assert_array_equal(p_resume[name].data, p_full[name].data, err_msg=name)


def test_vlp_validation_and_early_stop_bookkeeping():
    samples, vocab, params = tiny_world(n=16)
    cfg = train_cfg(epochs=3, val_fraction=0.25, patience=1, batch_size=4)
    _, summary = tr.train_vlp(samples, vocab, params, cfg, seed=8)
    assert len(summary["val_history"]) >= 1
    assert summary["best_epoch"] >= 0
    assert isinstance(summary["stopped_early"], bool)
    assert np.isfinite(summary["best_val"])


def test_vlp_rejects_single_sample_batches_with_ctr():
    samples, vocab, params = tiny_world()
    with pytest.raises(ValueError):
        tr.train_vlp(samples, vocab, params, train_cfg(batch_size=1), seed=0)


def test_vlp_alternating_batches_are_monolingual():
    samples, vocab, _ = tiny_world(n=16)
    cfg = train_cfg(batch_size=4, batch_mix="alternating")
    idx = np.arange(len(samples))
    batches = tr._vlp_order(samples, idx, cfg, seed=11, epoch=0)
    assert batches
    for b in batches:
        langs = {samples[i].language for i in b}
        assert len(langs) == 1
        assert len(b) == 4


def test_vlp_mixed_batches_are_full_sized():
    samples, vocab, _ = tiny_world(n=10)  # 20 samples, batch 8 -> 2 full batches
    cfg = train_cfg(batch_size=8, batch_mix="mixed")
    batches = tr._vlp_order(samples, np.arange(len(samples)), cfg, seed=12, epoch=0)
    assert len(batches) == 2
    assert all(len(b) == 8 for b in batches)


# -------------------------------------------------------------- checkpointing

def test_checkpoint_preserves_opt_state_and_extras(tmp_path):
    samples, vocab, params = tiny_world()
    opt = tr.OptState()
    rng = np.random.default_rng(13)
    for name, t in params.trainable_named():
        t.grad = rng.normal(size=t.data.shape)
    tr.opt_step(params, opt, lr=1e-3)
    path = tmp_path / "state.bin"
    tr.checkpoint_save(params, opt, path, extra={"epoch": 2.0, "best": 0.5})

    _, _, fresh = tiny_world(seed=77)
    opt2, extra = tr.checkpoint_load(path, fresh)
    assert opt2.t == 1 and opt2.skips == 0
    assert float(extra["epoch"]) == 2.0 and float(extra["best"]) == 0.5
    assert set(opt2.m) == set(opt.m)
    for name in opt.m:
        np.testing.assert_array_equal(opt2.m[name], opt.m[name])
        np.testing.assert_array_equal(opt2.v[name], opt.v[name])
    for name in params.names():
        np.testing.assert_array_equal(fresh[name].data, params[name].data)

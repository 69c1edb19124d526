"""End-to-end pipelines: corpus -> masked-token stage -> alignment stage ->
evaluation, plus the decorrelation-ablation experiment and the gradient-check
suite the CLI and the acceptance tests both run.
"""
from __future__ import annotations

import logging
import time

import numpy as np

from . import evals as ev
from . import losses as lo
from . import model as md
from . import numeric as nm
from . import synth
from . import text as textmod
from . import train as tr
from .config import RunConfig, to_model_config, to_train_config
from .numeric import Tensor, grad_check
from .rng import derive_seed, substream

log = logging.getLogger(__name__)


def build_corpus(cfg: RunConfig, seed: int, test_split: bool = False) -> list[synth.SyntheticSample]:
    """Training corpus, or the held-out evaluation corpus on a disjoint substream."""
    d = cfg.section("data")
    if test_split:
        n_en, n_sp = cfg.get("eval", "test_n_en"), cfg.get("eval", "test_n_sp")
        gen_seed = derive_seed(seed, "eval-data")
    else:
        n_en, n_sp = d["n_en"], d["n_sp"]
        gen_seed = seed
    samples = synth.make_dataset(
        n_en=n_en, n_sp=n_sp, f_count=d["f_count"], image_size=d["image_size"],
        noise_sigma=d["noise_sigma"], prevalence=d["prevalence"],
        neg_mention_rate=d["neg_mention_rate"], language_shift=d["language_shift"],
        seed=gen_seed)
    min_tokens = d["min_report_tokens"]
    if min_tokens > 0:
        kept = [s for s in samples if len(textmod.segment(s.report)) >= min_tokens]
        if len(kept) < len(samples):
            log.info("min_report_tokens filter dropped %d samples", len(samples) - len(kept))
        samples = kept
    return samples


def build_model(cfg: RunConfig, samples: list[synth.SyntheticSample], seed: int):
    """Merged vocabulary plus freshly initialized parameters.

    The embedding table is built the staged way: base English rows first, then
    ranked second-language rows appended via extend_embeddings.
    """
    en_reports = [s.report for s in samples if s.language == "en"]
    sp_reports = [s.report for s in samples if s.language == "sp"]
    vocab_en = textmod.build_base_vocab(en_reports)
    ranked = textmod.build_tfidf_vocab(sp_reports, cfg.get("mlm", "m_tokens"))
    vocab = textmod.merge_vocab(vocab_en, ranked)

    params = md.init_params(to_model_config(cfg), len(vocab), seed)
    w_full = params["text.word_emb"].data
    w_en = w_full[: vocab.en_size]
    params["text.word_emb"].data = textmod.extend_embeddings(
        w_en, vocab.sp_size, derive_seed(seed, "extend"), cfg.get("model", "init_std"))
    return vocab, params


def run_mlm_stage(cfg: RunConfig, samples, vocab, params, seed: int, writer=None):
    reports = [s.report for s in samples]
    mlm_cfg = to_train_config(cfg, "mlm")
    return tr.train_mlm(reports, vocab, params, mlm_cfg, seed, writer=writer)


def run_vlp_stage(cfg: RunConfig, samples, vocab, params, seed: int, ablate=(), writer=None):
    vlp_cfg = to_train_config(cfg, "vlp")
    for comp in ablate:
        if comp == "mlm-init":
            continue
        if comp not in ("cvl", "ssv", "ctr", "tf", "tt"):
            raise ValueError(f"unknown ablation component {comp!r}")
        vlp_cfg.enabled[comp] = False
    return tr.train_vlp(samples, vocab, params, vlp_cfg, seed, writer=writer)


def paired_indices(samples: list[synth.SyntheticSample]) -> tuple[list[int], list[int]]:
    """Indices of English samples and of their Spanish counterparts, aligned."""
    sp_by_pair = {s.pair_index: i for i, s in enumerate(samples) if s.language == "sp"}
    en_idx, sp_idx = [], []
    for i, s in enumerate(samples):
        if s.language == "en" and s.pair_index in sp_by_pair:
            en_idx.append(i)
            sp_idx.append(sp_by_pair[s.pair_index])
    return en_idx, sp_idx


def evaluate_model(cfg: RunConfig, params, vocab, seed: int, test_samples=None, templates=None) -> dict:
    """Zero-shot AUC/F1 per language, cross-lingual retrieval, bias scalars."""
    templates = templates or synth.load_templates()
    test_samples = test_samples or build_corpus(cfg, seed, test_split=True)
    f_count = cfg.get("data", "f_count")
    k = cfg.get("eval", "retrieval_k")
    eval_seed = derive_seed(seed, "eval")

    out: dict[str, float] = {}
    for lang in ("en", "sp"):
        subset = [s for s in test_samples if s.language == lang]
        if not subset:
            continue
        images = np.stack([s.image for s in subset])
        labels = np.stack([s.findings for s in subset]).astype(bool)
        prompts = ev.build_prompts(templates, lang, f_count)
        margins, decisions = ev.zero_shot_scores(params, vocab, images, prompts)
        scored = ev.macro_auc_f1(margins, labels, decisions)
        out[f"zero_shot_auc_{lang}"] = scored["auc"]
        out[f"zero_shot_f1_{lang}"] = scored["f1"]
        out[f"random_f1_{lang}"] = ev.random_baseline_f1(labels, eval_seed)

    en_idx, sp_idx = paired_indices(test_samples)
    if en_idx:
        text_embeds = ev.embed_reports(params, vocab, [test_samples[i].report for i in en_idx + sp_idx])
        n = len(en_idx)
        en_emb, sp_emb = text_embeds[:n], text_embeds[n:]
        out[f"recall_at_{k}"] = ev.retrieval_at_k(en_emb, sp_emb, np.arange(n), k)

        cap = cfg.get("eval", "bias_sample")
        take = min(n, cap // 2) if cap > 0 else n
        sel = list(range(take))
        bias_text = np.concatenate([en_emb[sel], sp_emb[sel]])
        images = np.stack([test_samples[i].image for i in (
            [en_idx[i] for i in sel] + [sp_idx[i] for i in sel])])
        bias_img = ev.embed_images(params, images)
        lang_labels = np.array([0] * take + [1] * take)
        report = ev.bias_report(bias_text, bias_img, lang_labels, eval_seed,
                                pca_iters=cfg.get("eval", "pca_iters"))
        out.update(report.scalars())
    return out


def standard_pipeline(cfg: RunConfig, seed: int) -> dict:
    """Corpus -> masked-token stage -> full alignment stage -> eval metrics."""
    samples = build_corpus(cfg, seed)
    vocab, params = build_model(cfg, samples, seed)
    run_mlm_stage(cfg, samples, vocab, params, seed)
    run_vlp_stage(cfg, samples, vocab, params, seed)
    return evaluate_model(cfg, params, vocab, seed)


def bias_experiment(cfg: RunConfig, seed: int) -> dict:
    """Identical data and masked-token init; alignment run twice, with and
    without the decorrelation pair. Returns both variants' eval metrics."""
    t0 = time.time()
    samples = build_corpus(cfg, seed)
    test_samples = build_corpus(cfg, seed, test_split=True)
    vocab, params = build_model(cfg, samples, seed)
    run_mlm_stage(cfg, samples, vocab, params, seed)
    base = md.clone_params(params)

    out: dict[str, float] = {}
    k = cfg.get("eval", "retrieval_k")
    for tag, ablate in (("ctr", ()), ("noctr", ("ctr",))):
        variant = md.clone_params(base)
        run_vlp_stage(cfg, samples, vocab, variant, seed, ablate=ablate)
        metrics = evaluate_model(cfg, variant, vocab, seed, test_samples=test_samples)
        for key, val in metrics.items():
            out[f"{key}_{tag}"] = val
    out["probe_text_drop"] = out["probe_text_noctr"] - out["probe_text_ctr"]
    out["probe_image_drop"] = out["probe_image_noctr"] - out["probe_image_ctr"]
    out["recall_gain"] = out[f"recall_at_{k}_ctr"] - out[f"recall_at_{k}_noctr"]
    out["runtime_s"] = time.time() - t0
    return out


# ------------------------------------------------------------ gradient checks

def _rand(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def grad_check_suite(seed: int = 0, points: int = 10) -> dict[str, float]:
    """Max relative gradient error for every loss and full encoder path.

    Small dims throughout (K <= 6, decorrelation dim <= 8) so central
    differences stay cheap; each entry is the max over `points` random draws.
    """
    results: dict[str, float] = {}

    def run(name, build, repeats=None):
        worst = 0.0
        for pt in range(repeats if repeats is not None else points):
            rng = substream(seed, "gc", name, pt)
            f, params = build(rng)
            worst = max(worst, grad_check(f, params))
        results[name] = worst

    def unit_rows(t: Tensor) -> Tensor:
        return nm.l2_normalize(t, axis=-1)

    def build_cvl(rng):
        a, b = _rand(rng, 4, 6), _rand(rng, 4, 6)
        return lambda: lo.cvl_loss(unit_rows(a), unit_rows(b)), [a, b]

    def build_ssv(rng):
        a, b = _rand(rng, 4, 6), _rand(rng, 4, 6)
        return lambda: lo.ssv_loss(unit_rows(a), unit_rows(b)), [a, b]

    def build_tf(rng):
        a, b = _rand(rng, 5, 7), _rand(rng, 5, 7)
        return lambda: lo.ctr_tf_loss(a, b), [a, b]

    def build_tt(rng):
        a, b = _rand(rng, 5, 7), _rand(rng, 5, 7)
        return lambda: lo.ctr_tt_loss(a, b), [a, b]

    def build_mlm(rng):
        logits = _rand(rng, 3, 4, 9)
        labels = rng.integers(0, 9, size=(3, 4))
        labels[rng.random((3, 4)) < 0.4] = lo.IGNORE_LABEL
        return lambda: lo.mlm_loss(logits, labels), [logits]

    run("cvl_loss", build_cvl)
    run("ssv_loss", build_ssv)
    run("ctr_tf_loss", build_tf)
    run("ctr_tt_loss", build_tt)
    run("mlm_loss", build_mlm)

    tiny = md.ModelConfig(d_l=8, layers=1, heads=2, max_len=6, d_v=8, proj_dim=4,
                          ctr_dim=9, dropout=0.0, image_size=8, vision_patch=4,
                          patch_embed_dim=3, vision_hidden=6)

    def encoder_ctx(rng):
        params = md.init_params(tiny, vocab_size=12, seed=int(rng.integers(2**31)))
        # move weights off their small init so paths are well-exercised
        for t in params.tensors.values():
            t.data = t.data + rng.normal(0.0, 0.05, t.data.shape)
        ids = rng.integers(0, 12, size=(2, 6))
        ids[:, 0] = textmod.CLS
        images = rng.normal(0.5, 0.2, size=(2, 8, 8))
        return params, ids, images

    def probed(params, rng):
        """One scalar probe per parameter, moving it along a fixed random
        direction. Each probe's derivative is the full parameter gradient
        projected on that direction, so every adjoint in the path is covered
        while the checked coordinates keep healthy magnitudes (a raw
        per-coordinate sweep of a deep path bottoms out in finite-difference
        noise on near-cancelled coordinates)."""
        dirs = {n: rng.normal(size=t.data.shape) for n, t in params.trainable_named()}
        probes = {n: Tensor(np.zeros(()), requires_grad=True) for n in dirs}

        def view() -> md.ModelParams:
            v = md.ModelParams(params.cfg, params.vocab_size)
            for n, t in params.tensors.items():
                if n in probes:
                    v.tensors[n] = nm.add(Tensor(t.data), nm.mul(probes[n], Tensor(dirs[n])))
                else:
                    v.tensors[n] = t
            return v
        return view, list(probes.values())

    def build_text_to_cvl(rng):
        params, ids, images = encoder_ctx(rng)
        view, leaves = probed(params, rng)
        imgs_emb = Tensor(rng.normal(size=(2, 4)))
        v_hat = nm.l2_normalize(imgs_emb, axis=-1)

        def f():
            p = view()
            pooled, _ = md.text_encode(p, ids)
            return lo.cvl_loss(v_hat, md.project_l(p, pooled))
        return f, leaves

    def build_vision_to_cvl(rng):
        params, ids, images = encoder_ctx(rng)
        view, leaves = probed(params, rng)
        txt = Tensor(rng.normal(size=(2, 4)))
        l_hat = nm.l2_normalize(txt, axis=-1)

        def f():
            p = view()
            return lo.cvl_loss(md.project_v(p, md.vision_encode(p, images)), l_hat)
        return f, leaves

    def build_text_to_ctr(rng):
        params, ids, _ = encoder_ctx(rng)
        view, leaves = probed(params, rng)

        def f():
            p = view()
            pooled_a, _ = md.text_encode(p, ids, dropout=0.2, seed=7)
            pooled_b, _ = md.text_encode(p, ids, dropout=0.2, seed=8)
            z_a, z_b = md.project_d(p, pooled_a), md.project_d(p, pooled_b)
            return nm.add(lo.ctr_tf_loss(z_a, z_b), lo.ctr_tt_loss(z_a, z_b))
        return f, leaves

    def build_text_to_mlm(rng):
        params, ids, _ = encoder_ctx(rng)
        view, leaves = probed(params, rng)
        labels = rng.integers(0, 12, size=(2, 6))
        labels[rng.random((2, 6)) < 0.5] = lo.IGNORE_LABEL

        def f():
            p = view()
            _, tokens = md.text_encode(p, ids)
            return lo.mlm_loss(md.mlm_head(p, tokens), labels)
        return f, leaves

    run("text_to_cvl", build_text_to_cvl)
    run("vision_to_cvl", build_vision_to_cvl)
    run("text_to_ctr", build_text_to_ctr)
    run("text_to_mlm", build_text_to_mlm)
    return results

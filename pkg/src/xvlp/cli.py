"""Command-line surface: data generation, both training stages, evaluation,
diagnostics, gradient verification, and the multi-seed error-bar protocol.

Exit codes: 0 success, 2 configuration or path validation error, 3 runtime
or numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import evals as ev
from . import experiment as xp
from . import model as md
from . import synth
from . import text as textmod
from . import train as tr
from .config import (ConfigError, RunConfig, apply_overrides, canonical_text,
                     config_hash, parse_config, schema_help, to_model_config,
                     to_train_config, validate)
from .rng import derive_seed

log = logging.getLogger(__name__)

SEED_ENV = "XVLP_SEED"
GRAD_TOL = 1e-4


# ----------------------------------------------------------- canonical output

def canonical_json(obj, indent: int = 0) -> str:
    """Deterministic JSON: sorted keys, floats at 9 significant digits."""
    pad, inner = "  " * indent, "  " * (indent + 1)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{inner}"{k}": {canonical_json(obj[k], indent + 1)}' for k in sorted(obj)]
        return "{\n" + ",\n".join(items) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [f"{inner}{canonical_json(v, indent + 1)}" for v in obj]
        return "[\n" + ",\n".join(items) + f"\n{pad}]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if x != x:
            return "NaN"
        if x in (float("inf"), float("-inf")):
            return "Infinity" if x > 0 else "-Infinity"
        return f"{x:.9g}"
    if obj is None:
        return "null"
    return '"' + str(obj).replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj) + "\n", encoding="utf-8")


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, cfg: RunConfig, inputs: list[Path],
                   outputs: list[Path], extra: dict | None = None) -> None:
    manifest = {
        "tool_version": __version__,
        "config_sha256": config_hash(cfg),
        "inputs": {str(p): _sha256_file(p) for p in inputs},
        "outputs": {p.name: _sha256_file(p) for p in outputs},
    }
    manifest.update(extra or {})
    write_json(manifest, out_dir / "manifest.json")


# ------------------------------------------------------------------- loading

def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_model(cfg: RunConfig, checkpoint: Path) -> tuple[md.ModelParams, textmod.Vocabulary]:
    """Rebuild params for the configured architecture from a checkpoint file;
    the vocabulary is read from vocab.txt beside it."""
    vocab = textmod.load_vocab(_require(checkpoint.parent / "vocab.txt", "vocabulary"))
    params = md.init_params(to_model_config(cfg), len(vocab), seed=0)
    arrays = md.checkpoint_read(_require(checkpoint, "checkpoint"))
    md.load_params_into(params, {k: v for k, v in arrays.items()
                                 if not k.startswith(("opt.", "extra."))})
    return params, vocab


def _load_samples(cfg: RunConfig, data_dir: str | None, seed: int,
                  test_split: bool = False) -> list[synth.SyntheticSample]:
    if data_dir is not None:
        return synth.read_dataset(_require(Path(data_dir), "data directory"))
    return xp.build_corpus(cfg, seed, test_split=test_split)


# ------------------------------------------------------------------ commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    seed = cfg.get("data", "seed")
    samples = xp.build_corpus(cfg, seed, test_split=args.test)
    out = Path(args.out)
    tsv = synth.write_dataset(samples, out)
    img_hash = hashlib.sha256()
    for img in sorted((out / "images").iterdir()):
        img_hash.update(img.read_bytes())
    n_en = sum(1 for s in samples if s.language == "en")
    write_manifest(out, cfg, [], [tsv], extra={
        "n_samples": len(samples), "n_en": n_en, "n_sp": len(samples) - n_en,
        "images_sha256": img_hash.hexdigest(),
    })
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_pretrain_mlm(cfg: RunConfig, args) -> int:
    seed = cfg.get("data", "seed")
    samples = _load_samples(cfg, args.data, seed)
    vocab, params = xp.build_model(cfg, samples, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    writer = tr.MetricsWriter(out / "metrics.jsonl")
    opt, last = xp.run_mlm_stage(cfg, samples, vocab, params, seed, writer=writer)
    textmod.save_vocab(vocab, out / "vocab.txt")
    tr.checkpoint_save(params, opt, out / "checkpoint.bin")
    (out / "config.txt").write_text(canonical_text(cfg), encoding="utf-8")
    inputs = [Path(args.data) / "dataset.tsv"] if args.data else []
    write_manifest(out, cfg, inputs,
                   [out / "checkpoint.bin", out / "vocab.txt", out / "metrics.jsonl"],
                   extra={"vocab_en_size": vocab.en_size, "vocab_sp_size": vocab.sp_size,
                          "final_loss": float(last)})
    print(f"masked-token stage done; final loss {last:.9g}")
    return 0


def cmd_pretrain_vlp(cfg: RunConfig, args) -> int:
    seed = cfg.get("data", "seed")
    ablate = [a.strip() for a in (args.ablate or "").split(",") if a.strip()]
    for comp in ablate:
        if comp not in ("ssv", "cvl", "ctr", "tf", "tt", "mlm-init"):
            raise ConfigError(f"unknown --ablate component {comp!r}")
    samples = _load_samples(cfg, args.data, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    inputs = [Path(args.data) / "dataset.tsv"] if args.data else []
    if "mlm-init" in ablate or args.init is None:
        if "mlm-init" not in ablate:
            raise ConfigError("--init is required unless --ablate includes mlm-init")
        vocab, params = xp.build_model(cfg, samples, seed)
    else:
        init_dir = Path(args.init)
        ckpt = _require(init_dir / "checkpoint.bin", "initialization checkpoint")
        vocab = textmod.load_vocab(_require(init_dir / "vocab.txt", "vocabulary"))
        params = md.init_params(to_model_config(cfg), len(vocab), seed)
        tr.checkpoint_load(ckpt, params)
        inputs += [ckpt, init_dir / "vocab.txt"]

    writer = tr.MetricsWriter(out / "metrics.jsonl")
    opt, summary = xp.run_vlp_stage(cfg, samples, vocab, params, seed,
                                    ablate=ablate, writer=writer)
    textmod.save_vocab(vocab, out / "vocab.txt")
    tr.checkpoint_save(params, opt, out / "checkpoint.bin")
    (out / "config.txt").write_text(canonical_text(cfg), encoding="utf-8")
    write_manifest(out, cfg, inputs,
                   [out / "checkpoint.bin", out / "vocab.txt", out / "metrics.jsonl"],
                   extra={"ablate": ",".join(ablate), **summary})
    print(f"alignment stage done; best validation loss {summary['best_val']:.9g}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    seed = cfg.get("data", "seed")
    params, vocab = _load_model(cfg, Path(args.checkpoint))
    test = _load_samples(cfg, args.data, seed, test_split=True)
    languages = ("en", "sp") if args.language == "both" else (args.language,)
    templates = synth.load_templates()
    f_count = cfg.get("data", "f_count")
    eval_seed = derive_seed(seed, "eval")

    results: dict[str, float] = {}
    for lang in languages:
        subset = [s for s in test if s.language == lang]
        if not subset:
            raise ConfigError(f"no {lang} samples in the evaluation data")
        images = np.stack([s.image for s in subset])
        labels = np.stack([s.findings for s in subset]).astype(bool)
        prompts = ev.build_prompts(templates, lang, f_count)
        margins, decisions = ev.zero_shot_scores(params, vocab, images, prompts)
        scored = ev.macro_auc_f1(margins, labels, decisions)
        results[f"zero_shot_auc_{lang}"] = scored["auc"]
        results[f"zero_shot_f1_{lang}"] = scored["f1"]
        results[f"random_f1_{lang}"] = ev.random_baseline_f1(labels, eval_seed)

    en_idx, sp_idx = xp.paired_indices(test)
    if en_idx and args.language == "both":
        k = cfg.get("eval", "retrieval_k")
        embeds = ev.embed_reports(params, vocab, [test[i].report for i in en_idx + sp_idx])
        n = len(en_idx)
        results[f"recall_at_{k}"] = ev.retrieval_at_k(embeds[:n], embeds[n:], np.arange(n), k)

    out = Path(args.out)
    write_json(results, out / "zeroshot_metrics.json")
    write_manifest(out, cfg, [Path(args.checkpoint)], [out / "zeroshot_metrics.json"])
    for key in sorted(results):
        print(f"{key} = {results[key]:.9g}")
    return 0


def cmd_diagnose(cfg: RunConfig, args) -> int:
    seed = cfg.get("data", "seed")
    params, vocab = _load_model(cfg, Path(args.checkpoint))
    test = _load_samples(cfg, args.data, seed, test_split=True)
    en_idx, sp_idx = xp.paired_indices(test)
    if not en_idx:
        raise ConfigError("diagnosis needs paired bilingual samples")

    cap = cfg.get("eval", "bias_sample")
    take = min(len(en_idx), cap // 2) if cap > 0 else len(en_idx)
    idx = [en_idx[i] for i in range(take)] + [sp_idx[i] for i in range(take)]
    text_embeds = ev.embed_reports(params, vocab, [test[i].report for i in idx])
    image_embeds = ev.embed_images(params, np.stack([test[i].image for i in idx]))
    labels = np.array([0] * take + [1] * take)

    out = Path(args.out)
    report = ev.bias_report(text_embeds, image_embeds, labels, derive_seed(seed, "eval"),
                            out_dir=out, pca_iters=cfg.get("eval", "pca_iters"))
    payload = report.scalars()
    payload["centroid_cosine_text"] = report.centroid_cosine_text
    payload["centroid_cosine_image"] = report.centroid_cosine_image
    write_json(payload, out / "bias_report.json")
    write_manifest(out, cfg, [Path(args.checkpoint)],
                   [out / "bias_report.json", out / "pca_text.csv", out / "pca_image.csv"])
    for key in sorted(report.scalars()):
        print(f"{key} = {report.scalars()[key]:.9g}")
    return 0


def cmd_grad_check(cfg: RunConfig, args) -> int:
    results = xp.grad_check_suite(seed=args.seed, points=args.points)
    width = max(len(k) for k in results)
    bad = 0
    for name, err in results.items():
        ok = err < GRAD_TOL
        bad += not ok
        print(f"{name:<{width}}  max_rel_err = {err:.3e}  {'PASS' if ok else 'FAIL'}")
    if bad:
        print(f"{bad} gradient check(s) above {GRAD_TOL:g}")
        return 3
    return 0


def cmd_seeds(cfg: RunConfig, args) -> int:
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"--seeds must be a comma-separated integer list: {exc}") from None
    if not seeds:
        raise ConfigError("--seeds is empty")
    stats = ev.seed_variance(lambda s: xp.standard_pipeline(cfg, s), seeds)
    width = max(len(k) for k in stats)
    print(f"seeds: {', '.join(map(str, seeds))}")
    for key in sorted(stats):
        mean, std = stats[key]
        print(f"{key:<{width}}  mean = {mean:.9g}  std = {std:.9g}")
    if args.out:
        payload = {k: {"mean": v[0], "std": v[1]} for k, v in stats.items()}
        payload["seeds"] = list(seeds)
        write_json(payload, Path(args.out) / "seeds.json")
        write_manifest(Path(args.out), cfg, [], [Path(args.out) / "seeds.json"])
    return 0


# --------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="configuration file (section.key = value lines)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                        dest="overrides", help="override one config key, e.g. --set vlp.epochs=3")
    common.add_argument("-v", "--verbose", action="store_true", help="info-level logging")

    parser = argparse.ArgumentParser(
        prog="xvlp",
        description="Bilingual vision-language pretraining testbed.",
        epilog="configuration keys (defaults in parentheses-free form):\n" + schema_help()
               + f"\n\nenvironment: {SEED_ENV} overrides data.seed.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen-data", parents=[common], help="generate a bilingual image-report corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--test", action="store_true", help="generate the held-out evaluation split instead")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain-mlm", parents=[common], help="masked-token pretraining of the text encoder")
    p.add_argument("--data", help="generated data directory (default: regenerate from config)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_pretrain_mlm)

    p = sub.add_parser("pretrain-vlp", parents=[common], help="image-text alignment training")
    p.add_argument("--data", help="generated data directory (default: regenerate from config)")
    p.add_argument("--init", help="directory holding the masked-token stage checkpoint")
    p.add_argument("--ablate", metavar="LIST",
                   help="comma list from {ssv,cvl,ctr,tf,tt,mlm-init} to disable")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_pretrain_vlp)

    p = sub.add_parser("eval", parents=[common], help="zero-shot and retrieval evaluation")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--data", help="evaluation data directory (default: generate the held-out split)")
    p.add_argument("--language", choices=["en", "sp", "both"], default="both")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("diagnose", parents=[common], help="community-bias diagnostics")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint file")
    p.add_argument("--data", help="evaluation data directory (default: generate the held-out split)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_diagnose)

    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=10, help="random points per loss check")
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("seeds", parents=[common], help="multi-seed pipeline, mean and std per metric")
    p.add_argument("--seeds", required=True, metavar="LIST", help="comma-separated seeds, e.g. 1,2,3")
    p.add_argument("--out", help="optional output directory for seeds.json")
    p.set_defaults(fn=cmd_seeds)
    return parser


def load_run_config(args) -> RunConfig:
    cfg = parse_config(args.config)
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            cfg.set("data", "seed", int(env_seed))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
    apply_overrides(cfg, args.overrides)
    validate(cfg)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args)
        return args.fn(cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"missing path: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

"""Line-based run configuration: `section.key = value`, sections data / model
/ mlm / vlp / eval. Unknown keys are rejected; every key has a typed default.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from . import model as md
from . import train as tr


class ConfigError(Exception):
    """Bad configuration file, key, value, or constraint."""


# (type, default, help). Help strings mention the full-scale reference value
# where the desk default is a scaled-down stand-in.
SCHEMA: dict[str, dict[str, tuple[type, object, str]]] = {
    "data": {
        "seed": (int, 42, "root seed; all run substreams derive from it (env XVLP_SEED overrides)"),
        "n_en": (int, 2000, "English training pairs"),
        "n_sp": (int, 2000, "Spanish training pairs"),
        "f_count": (int, 8, "number of latent findings (max 8 in the shipped lexicon)"),
        "image_size": (int, 32, "square image side; must tile the finding grid"),
        "noise_sigma": (float, 0.05, "pixel noise std"),
        "prevalence": (float, 0.3, "per-finding positive rate"),
        "neg_mention_rate": (float, 0.5, "chance an absent finding is mentioned negated"),
        "language_shift": (float, 0.05, "amplitude of the per-language acquisition watermark"),
        "min_report_tokens": (int, 0, "drop shorter reports; no-op on the synthetic corpus"),
    },
    "model": {
        "d_l": (int, 64, "text encoder width (full-scale reference 768)"),
        "layers": (int, 4, "text encoder depth (full-scale reference 12)"),
        "heads": (int, 2, "attention heads per layer"),
        "max_len": (int, 64, "token sequence length (full-scale reference 256)"),
        "d_v": (int, 64, "vision encoder width"),
        "proj_dim": (int, 32, "shared image-text projection dim (full-scale reference 512)"),
        "ctr_dim": (int, 128, "decorrelation projection dim, must exceed d_l (full-scale reference 1024)"),
        "dropout": (float, 0.1, "dropout rate; also the text-view augmentation"),
        "vision_patch": (int, 8, "vision patch side"),
        "patch_embed_dim": (int, 16, "per-patch embedding dim"),
        "vision_hidden": (int, 128, "vision MLP hidden width"),
        "init_std": (float, 0.02, "gaussian init std for weights and new vocab rows"),
    },
    "mlm": {
        "lr": (float, 5e-4, "peak learning rate (matches the full-scale setting)"),
        "weight_decay": (float, 0.0, "decoupled weight decay for the masked-token stage"),
        "batch": (int, 32, "batch size (full-scale reference 1024)"),
        "epochs": (int, 3, "passes over the report corpus (full-scale reference 15)"),
        "warmup_frac": (float, 0.1, "linear warmup fraction (matches the full-scale setting)"),
        "mask_rate": (float, 0.15, "masked-position rate (matches the full-scale setting)"),
        "mask_frac": (float, 0.8, "fraction of selected positions replaced by [MASK]"),
        "rand_frac": (float, 0.1, "fraction of selected positions replaced by a random token"),
        "m_tokens": (int, 0, "ranked second-language vocab size; 0 = all distinct (full-scale reference 900)"),
    },
    "vlp": {
        "lr": (float, 4e-5, "peak learning rate (full-scale setting; raise for desk-scale runs)"),
        "weight_decay": (float, 5e-2, "decoupled weight decay (matches the full-scale setting)"),
        "batch": (int, 64, "batch size (full-scale reference 128)"),
        "epochs": (int, 12, "alignment epochs (full-scale reference 50)"),
        "warmup_frac": (float, 0.1, "linear warmup fraction"),
        "sigma1": (float, 0.07, "image-text InfoNCE temperature (matches the full-scale setting)"),
        "sigma2": (float, 0.07, "view-invariance InfoNCE temperature (matches the full-scale setting)"),
        "lambda": (float, 5.1e-3, "off-diagonal weight of the decorrelation losses (matches the full-scale setting)"),
        "n_frozen": (int, -1, "frozen lowest text layers; -1 = ceil(0.75*layers), the analog of 9 of 12"),
        "patience": (int, 5, "early-stop patience in validation evaluations"),
        "val_fraction": (float, 0.1, "held-out fraction for early stopping"),
        "grad_accum": (int, 1, "gradient accumulation steps"),
        "batch_mix": (str, "mixed", "mixed | alternating language batching"),
        "enable_cvl": (bool, True, "image-text alignment loss on/off"),
        "enable_ssv": (bool, True, "view-invariance loss on/off"),
        "enable_ctr": (bool, True, "both decorrelation losses on/off"),
        "enable_tf": (bool, True, "feature-dimension decorrelation on/off"),
        "enable_tt": (bool, True, "sample-dimension decorrelation on/off"),
    },
    "eval": {
        "test_n_en": (int, 200, "held-out English pairs generated for evaluation"),
        "test_n_sp": (int, 200, "held-out Spanish pairs generated for evaluation"),
        "retrieval_k": (int, 5, "cut-off for cross-lingual retrieval recall"),
        "probe_epochs": (int, 300, "gradient-descent epochs for the language probe"),
        "probe_lr": (float, 0.5, "learning rate for the language probe"),
        "pca_iters": (int, 100, "power-iteration steps per principal component"),
        "bias_sample": (int, 600, "max embeddings per modality in the bias report"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    def set(self, section: str, key: str, raw):
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        typ = SCHEMA[section][key][0]
        self.values[section][key] = _coerce(raw, typ, f"{section}.{key}")

    def section(self, name: str) -> dict:
        return dict(self.values[name])


def _coerce(raw, typ: type, where: str):
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    s = str(raw).strip()
    try:
        if typ is bool:
            low = s.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(s)
        if typ is int:
            if "." in s or "e" in s.lower():
                raise ValueError(s)
            return int(s)
        if typ is float:
            return float(s)
        return s
    except ValueError as exc:
        raise ConfigError(f"bad value for {where}: {raw!r} (expected {typ.__name__})") from exc


def default_config() -> RunConfig:
    cfg = RunConfig({sec: {k: entry[1] for k, entry in keys.items()} for sec, keys in SCHEMA.items()})
    return cfg


def parse_config(path: str | Path | None = None) -> RunConfig:
    """Defaults overlaid with `section.key = value` lines from path, if any."""
    cfg = default_config()
    if path is None:
        return cfg
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{line_no}: expected 'section.key = value'")
        name, raw = stripped.split("=", 1)
        name = name.strip()
        if name.count(".") != 1:
            raise ConfigError(f"{path}:{line_no}: key must be section.key, got {name!r}")
        section, key = name.split(".")
        cfg.set(section, key, raw.strip())
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> None:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be section.key=value, got {item!r}")
        name, raw = item.split("=", 1)
        if name.count(".") != 1:
            raise ConfigError(f"override key must be section.key, got {name!r}")
        section, key = name.strip().split(".")
        cfg.set(section, key, raw.strip())


def validate(cfg: RunConfig) -> None:
    """Cross-key constraints beyond per-value types."""
    try:
        to_model_config(cfg).validate()
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from exc
    d = cfg.values["data"]
    if d["n_en"] < 0 or d["n_sp"] < 0 or d["n_en"] + d["n_sp"] == 0:
        raise ConfigError("data.n_en/n_sp must be non-negative with at least one positive")
    if not 0.0 <= d["prevalence"] <= 1.0:
        raise ConfigError("data.prevalence must be in [0, 1]")
    if not 0.0 <= d["neg_mention_rate"] <= 1.0:
        raise ConfigError("data.neg_mention_rate must be in [0, 1]")
    if d["noise_sigma"] < 0:
        raise ConfigError("data.noise_sigma must be >= 0")
    if cfg.get("eval", "retrieval_k") < 1:
        raise ConfigError("eval.retrieval_k must be >= 1")
    for stage in ("mlm", "vlp"):
        try:
            to_train_config(cfg, stage).validate()
        except ValueError as exc:
            raise ConfigError(f"[{stage}] {exc}") from exc


def to_model_config(cfg: RunConfig) -> md.ModelConfig:
    m = cfg.values["model"]
    return md.ModelConfig(
        d_l=m["d_l"], layers=m["layers"], heads=m["heads"], max_len=m["max_len"],
        d_v=m["d_v"], proj_dim=m["proj_dim"], ctr_dim=m["ctr_dim"], dropout=m["dropout"],
        image_size=cfg.get("data", "image_size"), vision_patch=m["vision_patch"],
        patch_embed_dim=m["patch_embed_dim"], vision_hidden=m["vision_hidden"],
        init_std=m["init_std"],
    )


def to_train_config(cfg: RunConfig, stage: str) -> tr.TrainConfig:
    if stage == "mlm":
        m = cfg.values["mlm"]
        return tr.TrainConfig(
            lr_peak=m["lr"], epochs=m["epochs"], batch_size=m["batch"],
            weight_decay=m["weight_decay"], warmup_frac=m["warmup_frac"],
            mask_rate=m["mask_rate"], mask_frac=m["mask_frac"], rand_frac=m["rand_frac"],
        )
    if stage == "vlp":
        v = cfg.values["vlp"]
        enabled = {c: v[f"enable_{c}"] for c in ("cvl", "ssv", "ctr", "tf", "tt")}
        return tr.TrainConfig(
            lr_peak=v["lr"], epochs=v["epochs"], batch_size=v["batch"],
            weight_decay=v["weight_decay"], warmup_frac=v["warmup_frac"],
            sigma1=v["sigma1"], sigma2=v["sigma2"], lam=v["lambda"],
            enabled=enabled, n_frozen=v["n_frozen"], patience=v["patience"],
            val_fraction=v["val_fraction"], grad_accum=v["grad_accum"],
            batch_mix=v["batch_mix"],
        )
    raise ValueError(f"unknown stage {stage!r}")


def canonical_text(cfg: RunConfig) -> str:
    lines = []
    for section in sorted(cfg.values):
        for key in sorted(cfg.values[section]):
            lines.append(f"{section}.{key} = {cfg.values[section][key]}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(canonical_text(cfg).encode("utf-8")).hexdigest()


def schema_help() -> str:
    """Key-by-key default and description block for --help."""
    lines = []
    for section, keys in SCHEMA.items():
        for key, (typ, default, help_s) in keys.items():
            lines.append(f"  {section}.{key} = {default}  ({typ.__name__}) {help_s}")
    return "\n".join(lines)

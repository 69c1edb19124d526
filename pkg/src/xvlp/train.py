"""Two-stage training: masked-language pretraining, then vision-language
alignment with the lowest text layers frozen. Every random draw is derived
statelessly from (seed, stage, step), so resuming from a checkpoint replays
the uninterrupted run exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import losses as lo
from . import model as md
from . import text as textmod
from .model import ModelParams
from .numeric import backward, scale, zero_grads
from .rng import derive_seed, substream
from .synth import SyntheticSample

log = logging.getLogger(__name__)

BETA1, BETA2 = 0.9, 0.999
ADAM_EPS = 1e-8
COMPONENTS = ("cvl", "ssv", "tf", "tt", "ctr", "mlm")


@dataclass
class TrainConfig:
    lr_peak: float
    epochs: int
    batch_size: int
    weight_decay: float = 0.0
    warmup_frac: float = 0.1
    mask_rate: float = 0.15
    mask_frac: float = 0.8
    rand_frac: float = 0.1
    sigma1: float = lo.TEMP_DEFAULT
    sigma2: float = lo.TEMP_DEFAULT
    lam: float = lo.LAMBDA_DEFAULT
    enabled: dict = field(default_factory=dict)   # component -> bool, default on
    n_frozen: int = -1                            # -1: ceil(0.75 * layers)
    patience: int = 5
    val_fraction: float = 0.1
    grad_accum: int = 1
    batch_mix: str = "mixed"                      # or "alternating"

    def validate(self) -> None:
        if self.lr_peak <= 0:
            raise ValueError("lr_peak must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.batch_mix not in ("mixed", "alternating"):
            raise ValueError(f"batch_mix must be mixed|alternating, got {self.batch_mix}")
        if self.grad_accum < 1:
            raise ValueError("grad_accum must be >= 1")


def lr_at(step: int, total_steps: int, peak: float, warmup_frac: float) -> float:
    """Linear warmup to peak, then cosine back to zero at total_steps."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup = int(round(warmup_frac * total_steps))
    if step < warmup:
        return peak * step / warmup
    if step >= total_steps:
        return 0.0
    if total_steps == warmup:
        return peak
    progress = (step - warmup) / (total_steps - warmup)
    return peak * 0.5 * (1.0 + np.cos(np.pi * progress))


@dataclass
class OptState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skips: int = 0


def opt_step(params: ModelParams, opt: OptState, lr: float, weight_decay: float = 0.0) -> bool:
    """Decoupled-weight-decay Adam over trainable params with grads.

    A non-finite gradient anywhere aborts the whole step (params untouched,
    skip counter bumped). Params that received no gradient are left alone.
    Returns True when the step was applied.
    """
    live = [(n, t) for n, t in params.trainable_named() if t.grad is not None]
    for name, t in live:
        if not np.isfinite(t.grad).all():
            opt.skips += 1
            log.warning("non-finite gradient in %s; skipping step (skips=%d)", name, opt.skips)
            return False
    opt.t += 1
    b1t = 1.0 - BETA1 ** opt.t
    b2t = 1.0 - BETA2 ** opt.t
    for name, t in live:
        g = t.grad
        m = opt.m.setdefault(name, np.zeros_like(t.data))
        v = opt.v.setdefault(name, np.zeros_like(t.data))
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        update = (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)
        if weight_decay > 0.0:
            t.data = t.data - lr * weight_decay * t.data
        t.data = t.data - lr * update
    return True


def _assert_frozen_untouched(params: ModelParams) -> None:
    for name, t in params.tensors.items():
        if not t.requires_grad and t.grad is not None:
            raise AssertionError(f"gradient leaked into frozen parameter {name}")


# ------------------------------------------------------------- metrics stream

def _fmt(x: float) -> str:
    return f"{x:.9g}"


def metrics_line(step: int, lr: float, bd: lo.LossBreakdown, disabled: list[str]) -> str:
    """One flat JSON object per step; floats at 9 significant digits."""
    fields = [f'"step": {step}', f'"lr": {_fmt(lr)}']
    for name in COMPONENTS:
        fields.append(f'"{name}": {_fmt(getattr(bd, name))}')
    fields.append(f'"total": {_fmt(bd.total)}')
    fields.append(f'"disabled": "{",".join(disabled)}"')
    return "{" + ", ".join(fields) + "}"


class MetricsWriter:
    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.lines: list[str] = []
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, line: str) -> None:
        self.lines.append(line)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


# ------------------------------------------------------------ checkpointing

def checkpoint_save(params: ModelParams, opt: OptState, path, extra: dict | None = None) -> None:
    """Model params plus optimizer moments in one table (opt.* name prefix)."""
    arrays: dict[str, np.ndarray] = {name: t.data for name, t in params.tensors.items()}
    for name, arr in opt.m.items():
        arrays[f"opt.m.{name}"] = arr
    for name, arr in opt.v.items():
        arrays[f"opt.v.{name}"] = arr
    arrays["opt.t"] = np.array(float(opt.t))
    arrays["opt.skips"] = np.array(float(opt.skips))
    for key, val in (extra or {}).items():
        arrays[f"extra.{key}"] = np.asarray(val, dtype=np.float64)
    md.checkpoint_write(arrays, path)


def checkpoint_load(path, params: ModelParams) -> tuple[OptState, dict]:
    """Restore params in place; returns (optimizer state, extra scalars)."""
    arrays = md.checkpoint_read(path)
    md.load_params_into(params, {k: v for k, v in arrays.items() if not k.startswith(("opt.", "extra."))})
    opt = OptState()
    opt.t = int(arrays.pop("opt.t", np.array(0.0)))
    opt.skips = int(arrays.pop("opt.skips", np.array(0.0)))
    for key, arr in arrays.items():
        if key.startswith("opt.m."):
            opt.m[key[len("opt.m."):]] = arr.astype(np.float64)
        elif key.startswith("opt.v."):
            opt.v[key[len("opt.v."):]] = arr.astype(np.float64)
    extra = {k[len("extra."):]: arrays[k] for k in arrays if k.startswith("extra.")}
    return opt, extra


# -------------------------------------------------------------- augmentations

def augment_image(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flip / quarter-rotation / small shifted crop, drawn from rng."""
    out = image
    rot = int(rng.integers(0, 4))
    if rot:
        out = np.rot90(out, rot)
    flip = int(rng.integers(0, 3))
    if flip == 1:
        out = np.fliplr(out)
    elif flip == 2:
        out = np.flipud(out)
    dy, dx = rng.integers(-2, 3, size=2)
    padded = np.pad(out, 2, mode="edge")
    h, w = image.shape
    return padded[2 + dy:2 + dy + h, 2 + dx:2 + dx + w].copy()


# ------------------------------------------------------------------ MLM stage

def train_mlm(
    reports: list[str],
    vocab: textmod.Vocabulary,
    params: ModelParams,
    cfg: TrainConfig,
    seed: int,
    writer: MetricsWriter | None = None,
    start_step: int = 0,
    opt: OptState | None = None,
    stop_step: int | None = None,
) -> tuple[OptState, float]:
    """Masked-token pretraining; all layers trainable. Returns (opt, last loss).

    start_step skips already-applied steps when resuming from a checkpoint;
    stop_step halts after that many steps (simulating an interrupted run).
    """
    cfg.validate()
    writer = writer or MetricsWriter(None)
    md.set_frozen_layers(params, 0)
    opt = opt or OptState()

    ids_all = np.stack([textmod.tokenize(r, vocab, params.cfg.max_len) for r in reports])
    present = np.zeros(len(vocab), dtype=bool)
    present[: textmod.N_SPECIALS] = True
    present[np.unique(ids_all)] = True

    steps_per_epoch = len(reports) // cfg.batch_size
    if steps_per_epoch < 1:
        raise ValueError("corpus smaller than one batch")
    total_steps = steps_per_epoch * cfg.epochs
    disabled = [c for c in COMPONENTS if c != "mlm"]

    step = 0
    last = float("nan")
    for epoch in range(cfg.epochs):
        perm = substream(seed, "mlm", "shuffle", epoch).permutation(len(reports))
        for b in range(steps_per_epoch):
            if stop_step is not None and step >= stop_step:
                return opt, last
            if step < start_step:
                step += 1
                continue
            batch = ids_all[perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            masked, labels = textmod.mask_tokens(
                batch, len(vocab), cfg.mask_rate, derive_seed(seed, "mlm", "mask", step),
                cfg.mask_frac, cfg.rand_frac)
            zero_grads(params.tensors.values())
            _, tokens = md.text_encode(params, masked, dropout=params.cfg.dropout,
                                       seed=derive_seed(seed, "mlm", "drop", step))
            logits = md.mlm_head(params, tokens)
            loss = lo.mlm_loss(logits, labels, candidate_mask=present)
            total, bd = lo.total_loss({"mlm": loss})
            backward(total)
            lr = lr_at(step, total_steps, cfg.lr_peak, cfg.warmup_frac)
            opt_step(params, opt, lr, cfg.weight_decay)
            writer.write(metrics_line(step, lr, bd, disabled))
            last = bd.mlm
            step += 1
    return opt, last


# ------------------------------------------------------------------ VLP stage

def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Full batches only; a trailing partial batch is dropped."""
    n_full = len(order) // batch_size
    return [order[i * batch_size:(i + 1) * batch_size] for i in range(n_full)]


def _vlp_order(samples: list[SyntheticSample], indices: np.ndarray, cfg: TrainConfig, seed: int, epoch: int) -> list[np.ndarray]:
    rng = substream(seed, "vlp", "shuffle", epoch)
    if cfg.batch_mix == "mixed":
        return _batches(indices[rng.permutation(len(indices))], cfg.batch_size)
    by_lang = {lang: [i for i in indices if samples[i].language == lang] for lang in ("en", "sp")}
    batches = []
    for lang in ("en", "sp"):
        arr = np.array(by_lang[lang], dtype=int)
        batches.extend(_batches(arr[rng.permutation(len(arr))], cfg.batch_size))
    rng.shuffle(batches)
    return batches


def _vlp_forward(
    params: ModelParams,
    samples: list[SyntheticSample],
    idx: np.ndarray,
    ids_all: np.ndarray,
    cfg: TrainConfig,
    seed_a: int,
    seed_b: int,
    aug_seed: int,
):
    """One alignment forward pass; returns (scalar total, breakdown)."""
    images = np.stack([samples[i].image for i in idx])
    ids = ids_all[idx]
    parts = {}
    enabled = dict(cfg.enabled)
    ctr_on = enabled.get("ctr", True) and (enabled.get("tf", True) or enabled.get("tt", True))

    if enabled.get("cvl", True) or ctr_on:
        pooled_a, _ = md.text_encode(params, ids, dropout=params.cfg.dropout, seed=seed_a)
    if enabled.get("cvl", True):
        v_hat = md.project_v(params, md.vision_encode(params, images))
        l_hat = md.project_l(params, pooled_a)
        parts["cvl"] = lo.cvl_loss(v_hat, l_hat, cfg.sigma1)
    if enabled.get("ssv", True):
        rng_aug = np.random.default_rng(aug_seed)
        view_a = np.stack([augment_image(img, rng_aug) for img in images])
        view_b = np.stack([augment_image(img, rng_aug) for img in images])
        va = md.project_v(params, md.vision_encode(params, view_a))
        vb = md.project_v(params, md.vision_encode(params, view_b))
        parts["ssv"] = lo.ssv_loss(va, vb, cfg.sigma2)
    if ctr_on:
        pooled_b, _ = md.text_encode(params, ids, dropout=params.cfg.dropout, seed=seed_b)
        z_a = md.project_d(params, pooled_a)
        z_b = md.project_d(params, pooled_b)
        if enabled.get("tf", True):
            parts["tf"] = lo.ctr_tf_loss(z_a, z_b, cfg.lam)
        if enabled.get("tt", True):
            parts["tt"] = lo.ctr_tt_loss(z_a, z_b, cfg.lam)
    return lo.total_loss(parts, enabled)


def disabled_components(cfg: TrainConfig) -> list[str]:
    out = []
    enabled = cfg.enabled
    ctr_off = not enabled.get("ctr", True)
    for c in ("cvl", "ssv"):
        if not enabled.get(c, True):
            out.append(c)
    for c in ("tf", "tt"):
        if ctr_off or not enabled.get(c, True):
            out.append(c)
    if ctr_off or ("tf" in out and "tt" in out):
        if "ctr" not in out:
            out.append("ctr")
    out.append("mlm")
    return out


def train_vlp(
    samples: list[SyntheticSample],
    vocab: textmod.Vocabulary,
    params: ModelParams,
    cfg: TrainConfig,
    seed: int,
    writer: MetricsWriter | None = None,
    start_step: int = 0,
    opt: OptState | None = None,
    stop_step: int | None = None,
) -> tuple[OptState, dict]:
    """Vision-language alignment stage. Returns (opt state, summary dict).

    The lowest text layers are frozen (cfg.n_frozen, default ceil(0.75 L)).
    Early stopping tracks validation total loss with fixed per-batch seeds so
    successive evaluations are comparable; best params are restored at the end.
    start_step skips already-applied steps when resuming from a checkpoint;
    stop_step halts mid-run without the best-params restoration (an
    interrupted run never reaches it).
    """
    cfg.validate()
    writer = writer or MetricsWriter(None)
    if cfg.batch_size < 2 and cfg.enabled.get("ctr", True):
        raise ValueError("decorrelation losses need batch_size >= 2")
    n_frozen = cfg.n_frozen if cfg.n_frozen >= 0 else md.default_frozen(params.cfg.layers)
    md.set_frozen_layers(params, n_frozen)
    opt = opt or OptState()

    ids_all = np.stack([textmod.tokenize(s.report, vocab, params.cfg.max_len) for s in samples])
    split_rng = substream(seed, "vlp", "split")
    order = split_rng.permutation(len(samples))
    n_val = int(round(cfg.val_fraction * len(samples)))
    val_idx, train_idx = order[:n_val], order[n_val:]
    val_batches = _batches(val_idx, cfg.batch_size)

    steps_per_epoch = len(_vlp_order(samples, train_idx, cfg, seed, 0))
    if steps_per_epoch < 1:
        raise ValueError("not enough training samples for one batch")
    total_steps = steps_per_epoch * cfg.epochs
    disabled = disabled_components(cfg)

    def val_loss() -> float:
        if not val_batches:
            return float("nan")
        vals = []
        for j, idx in enumerate(val_batches):
            total, _ = _vlp_forward(params, samples, idx, ids_all, cfg,
                                    derive_seed(seed, "vlp", "val_a", j),
                                    derive_seed(seed, "vlp", "val_b", j),
                                    derive_seed(seed, "vlp", "val_aug", j))
            vals.append(float(total.data))
        return float(np.mean(vals))

    best = {"loss": float("inf"), "params": None, "epoch": -1}
    bad_evals = 0
    step = 0
    history = []
    stopped_early = False
    halted = False
    for epoch in range(cfg.epochs):
        for idx in _vlp_order(samples, train_idx, cfg, seed, epoch):
            if stop_step is not None and step >= stop_step:
                halted = True
                break
            if step < start_step:
                step += 1
                continue
            zero_grads(params.tensors.values())
            accum_bd = None
            for a in range(cfg.grad_accum):
                total, bd = _vlp_forward(
                    params, samples, idx, ids_all, cfg,
                    derive_seed(seed, "vlp", "drop_a", step, a),
                    derive_seed(seed, "vlp", "drop_b", step, a),
                    derive_seed(seed, "vlp", "aug", step, a))
                if cfg.grad_accum > 1:
                    total = scale(total, 1.0 / cfg.grad_accum)
                backward(total)
                accum_bd = bd
            _assert_frozen_untouched(params)
            lr = lr_at(step, total_steps, cfg.lr_peak, cfg.warmup_frac)
            opt_step(params, opt, lr, cfg.weight_decay)
            writer.write(metrics_line(step, lr, accum_bd, disabled))
            step += 1
        if halted:
            break
        if val_batches:
            v = val_loss()
            history.append(v)
            if v < best["loss"]:
                best = {"loss": v, "params": {n: t.data.copy() for n, t in params.tensors.items()}, "epoch": epoch}
                bad_evals = 0
            else:
                bad_evals += 1
                if bad_evals >= cfg.patience:
                    stopped_early = True
                    break
    if best["params"] is not None and not halted:
        for n, t in params.tensors.items():
            t.data = best["params"][n]
    return opt, {
        "val_history": history,
        "best_epoch": best["epoch"],
        "best_val": best["loss"],
        "stopped_early": stopped_early,
        "steps": step,
        "total_steps": total_steps,
        "n_frozen": n_frozen,
    }

"""Zero-shot classification, ranking metrics, and the community-bias report.

Every metric here is deterministic given its seed, and the scalar bias
diagnostics (probe accuracy, centroid gap, silhouette) are invariant to a
global rotation of the embedding space.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import model as md
from . import text as textmod
from .model import ModelParams
from .rng import substream
from .synth import TemplateTable

log = logging.getLogger(__name__)


@dataclass
class PromptSet:
    """Per-finding positive/negative prompt texts for one language."""
    language: str
    positives: list[str]
    negatives: list[str]


def build_prompts(templates: TemplateTable, language: str, f_count: int) -> PromptSet:
    names = templates.names[language][:f_count]
    if language == "en":
        return PromptSet("en", list(names), [f"no {n}" for n in names])
    return PromptSet("sp", list(names), [f"no hay {n}" for n in names])


def embed_images(params: ModelParams, images: np.ndarray, batch: int = 128) -> np.ndarray:
    out = [md.vision_encode(params, images[i:i + batch]).data for i in range(0, len(images), batch)]
    return np.concatenate(out, axis=0)


def embed_reports(params: ModelParams, vocab: textmod.Vocabulary, texts: list[str], batch: int = 128) -> np.ndarray:
    ids = np.stack([textmod.tokenize(t, vocab, params.cfg.max_len) for t in texts])
    out = [md.text_encode(params, ids[i:i + batch])[0].data for i in range(0, len(ids), batch)]
    return np.concatenate(out, axis=0)


def zero_shot_scores(
    params: ModelParams,
    vocab: textmod.Vocabulary,
    images: np.ndarray,
    prompts: PromptSet,
) -> tuple[np.ndarray, np.ndarray]:
    """Margins and decisions for each image x finding.

    The score is sim(image, positive prompt) - sim(image, negative prompt) in
    the shared projection space; the decision is positive only when the margin
    is strictly above zero, so exact ties come out negative.
    """
    v_hat = md.project_v(params, md.vision_encode(params, images)).data
    pos = md.project_l(params, md.text_encode(params, np.stack(
        [textmod.tokenize(t, vocab, params.cfg.max_len) for t in prompts.positives]))[0]).data
    neg = md.project_l(params, md.text_encode(params, np.stack(
        [textmod.tokenize(t, vocab, params.cfg.max_len) for t in prompts.negatives]))[0]).data
    margins = v_hat @ pos.T - v_hat @ neg.T
    return margins, margins > 0.0


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC; tied scores get half credit."""
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes present")
    ranks = _average_ranks(np.asarray(scores, dtype=np.float64))
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def f1_score(decisions: np.ndarray, labels: np.ndarray) -> float | None:
    """2TP / (2TP + FP + FN); None when the denominator is empty."""
    decisions = np.asarray(decisions).astype(bool)
    labels = np.asarray(labels).astype(bool)
    tp = int((decisions & labels).sum())
    fp = int((decisions & ~labels).sum())
    fn = int((~decisions & labels).sum())
    if 2 * tp + fp + fn == 0:
        return None
    return 2.0 * tp / (2 * tp + fp + fn)


def macro_auc_f1(scores: np.ndarray, labels: np.ndarray, decisions: np.ndarray | None = None) -> dict:
    """Per-category AUC/F1 macro-averaged; degenerate categories are skipped.

    scores/labels are n x F; decisions default to scores > 0.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if decisions is None:
        decisions = scores > 0.0
    aucs: list[float | None] = []
    f1s: list[float | None] = []
    for j in range(scores.shape[1]):
        col = labels[:, j].astype(bool)
        if col.all() or not col.any():
            log.warning("category %d has a single class; skipping its AUC", j)
            aucs.append(None)
        else:
            aucs.append(auc_score(scores[:, j], col))
        f1 = f1_score(decisions[:, j], col)
        if f1 is None:
            log.warning("category %d has no positive labels or predictions; skipping its F1", j)
        f1s.append(f1)
    valid_auc = [a for a in aucs if a is not None]
    valid_f1 = [f for f in f1s if f is not None]
    return {
        "auc": float(np.mean(valid_auc)) if valid_auc else float("nan"),
        "f1": float(np.mean(valid_f1)) if valid_f1 else float("nan"),
        "auc_per_category": aucs,
        "f1_per_category": f1s,
    }


def random_baseline_f1(labels: np.ndarray, seed: int, trials: int = 200) -> float:
    """Expected macro-F1 of a prevalence-matched random classifier."""
    labels = np.asarray(labels).astype(bool)
    rng = substream(seed, "baseline")
    prev = labels.mean(axis=0)
    out = []
    for _ in range(trials):
        decisions = rng.random(labels.shape) < prev[None, :]
        f1s = [f1_score(decisions[:, j], labels[:, j]) for j in range(labels.shape[1])]
        f1s = [f for f in f1s if f is not None]
        if f1s:
            out.append(float(np.mean(f1s)))
    return float(np.mean(out)) if out else 0.0


def retrieval_at_k(queries: np.ndarray, gallery: np.ndarray, truth: np.ndarray, k: int) -> float:
    """Fraction of queries whose true counterpart ranks in the cosine top-k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
    sims = qn @ gn.T
    topk = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    return float(np.mean([truth[i] in topk[i] for i in range(len(truth))]))


def language_probe(
    embeds: np.ndarray,
    labels: np.ndarray,
    seed: int,
    epochs: int = 300,
    lr: float = 0.5,
    weight_decay: float = 1e-3,
) -> float:
    """Held-out accuracy of a linear logistic probe (70/30 split).

    Trained by full-batch gradient descent from zero init with a small L2
    penalty: the optimum is unique and the whole procedure is equivariant
    under orthogonal rotations of the embedding space.
    """
    embeds = np.asarray(embeds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    x = embeds / np.maximum(np.linalg.norm(embeds, axis=1, keepdims=True), 1e-12)
    n = len(x)
    perm = substream(seed, "probe", "split").permutation(n)
    n_train = int(round(0.7 * n))
    tr, te = perm[:n_train], perm[n_train:]
    if len(tr) == 0 or len(te) == 0:
        raise ValueError("not enough samples for a 70/30 probe split")

    w = np.zeros(x.shape[1])
    b = 0.0
    xt, yt = x[tr], labels[tr]
    for _ in range(epochs):
        z = xt @ w + b
        p = 1.0 / (1.0 + np.exp(-z))
        err = p - yt
        w -= lr * (xt.T @ err / len(xt) + weight_decay * w)
        b -= lr * float(err.mean())
    pred = (x[te] @ w + b) > 0.0
    return float((pred == labels[te].astype(bool)).mean())


def silhouette(embeds: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over samples, euclidean distance, two clusters."""
    x = np.asarray(embeds, dtype=np.float64)
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    labels = np.asarray(labels).astype(bool)
    if labels.all() or not labels.any():
        raise ValueError("silhouette needs two clusters")
    d2 = np.maximum(
        (x * x).sum(1)[:, None] + (x * x).sum(1)[None, :] - 2.0 * (x @ x.T), 0.0)
    dist = np.sqrt(d2)
    s = np.empty(len(x))
    for i in range(len(x)):
        same = labels == labels[i]
        same_others = same.copy()
        same_others[i] = False
        a = dist[i][same_others].mean() if same_others.any() else 0.0
        b = dist[i][~same].mean()
        s[i] = 0.0 if max(a, b) == 0.0 else (b - a) / max(a, b)
    return float(s.mean())


def pca_top2(embeds: np.ndarray, seed: int, iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Top-2 principal directions by power iteration with deflation.

    Returns (coords n x 2, components 2 x D). Components are sign-ambiguous;
    only rotation-invariant scalars should be asserted on.
    """
    x = np.asarray(embeds, dtype=np.float64)
    xc = x - x.mean(axis=0, keepdims=True)
    cov = xc.T @ xc / len(xc)
    rng = substream(seed, "pca")
    comps = []
    for _ in range(2):
        v = rng.normal(size=cov.shape[0])
        v /= np.linalg.norm(v)
        for _ in range(iters):
            v = cov @ v
            norm = np.linalg.norm(v)
            if norm == 0.0:
                break
            v /= norm
        lam = float(v @ cov @ v)
        comps.append(v.copy())
        cov = cov - lam * np.outer(v, v)
    components = np.stack(comps)
    return xc @ components.T, components


@dataclass
class BiasReport:
    probe_text: float
    probe_image: float
    centroid_gap_text: float
    centroid_gap_image: float
    silhouette_text: float
    silhouette_image: float
    centroid_cosine_text: list = field(default_factory=list)
    centroid_cosine_image: list = field(default_factory=list)

    def scalars(self) -> dict[str, float]:
        return {
            "probe_text": self.probe_text,
            "probe_image": self.probe_image,
            "centroid_gap_text": self.centroid_gap_text,
            "centroid_gap_image": self.centroid_gap_image,
            "silhouette_text": self.silhouette_text,
            "silhouette_image": self.silhouette_image,
        }


def _centroid_stats(embeds: np.ndarray, labels: np.ndarray) -> tuple[float, list]:
    x = embeds / np.maximum(np.linalg.norm(embeds, axis=1, keepdims=True), 1e-12)
    labels = np.asarray(labels).astype(bool)
    c0 = x[~labels].mean(axis=0)
    c1 = x[labels].mean(axis=0)
    gap = float(np.linalg.norm(c1 - c0))
    cents = np.stack([c0, c1])
    cn = cents / np.maximum(np.linalg.norm(cents, axis=1, keepdims=True), 1e-12)
    return gap, (cn @ cn.T).tolist()


def bias_report(
    text_embeds: np.ndarray,
    image_embeds: np.ndarray,
    language_labels: np.ndarray,
    seed: int,
    out_dir=None,
    pca_iters: int = 100,
) -> BiasReport:
    """Community-bias diagnostics over both modalities.

    language_labels: 1 for the second language, 0 for the first. When out_dir
    is given, top-2 PCA coordinates are written as CSV per modality.
    """
    labels = np.asarray(language_labels)
    gap_t, cos_t = _centroid_stats(text_embeds, labels)
    gap_i, cos_i = _centroid_stats(image_embeds, labels)
    report = BiasReport(
        probe_text=language_probe(text_embeds, labels, seed),
        probe_image=language_probe(image_embeds, labels, seed),
        centroid_gap_text=gap_t,
        centroid_gap_image=gap_i,
        silhouette_text=silhouette(text_embeds, labels),
        silhouette_image=silhouette(image_embeds, labels),
        centroid_cosine_text=cos_t,
        centroid_cosine_image=cos_i,
    )
    if out_dir is not None:
        from pathlib import Path
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, embeds in (("text", text_embeds), ("image", image_embeds)):
            coords, _ = pca_top2(np.asarray(embeds), seed, iters=pca_iters)
            with open(out / f"pca_{name}.csv", "w", encoding="utf-8") as f:
                f.write("pc1,pc2,language\n")
                for (p1, p2), lab in zip(coords, labels):
                    f.write(f"{p1:.9g},{p2:.9g},{int(lab)}\n")
    return report


def seed_variance(run_fn, seeds: list[int]) -> dict[str, tuple[float, float]]:
    """mean and population std of each metric run_fn(seed) returns."""
    if not seeds:
        raise ValueError("need at least one seed")
    if len(seeds) == 1:
        log.warning("single seed: std is 0 by definition")
    results = [run_fn(s) for s in seeds]
    keys = results[0].keys()
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in results], dtype=np.float64)
        out[k] = (float(vals.mean()), float(vals.std()))
    return out

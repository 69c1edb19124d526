"""Controlled bilingual image-report corpus with shared latent findings.

Each latent findings vector is rendered once per requested language, so every
English sample i has a Spanish counterpart with the same findings, the same
template choices, and the same negated-mention subset. Images are bright
patches on a noisy grid plus a faint per-language acquisition watermark that
stands in for the scanner/population differences between source communities.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import text as textmod
from .rng import substream

LANGUAGES = ("en", "sp")
BG_LEVEL = 0.1
FG_LEVEL = 0.9


@dataclass
class SyntheticSample:
    sample_id: str
    language: str
    findings: np.ndarray          # uint8 bit vector, length f_count
    report: str
    image: np.ndarray             # (size, size) float64
    pair_index: int


@dataclass
class TemplateTable:
    names: dict[str, list[str]]                       # language -> finding names
    phrases: dict[tuple[str, int, str], list[str]]    # (language, finding, polarity) -> phrasings
    f_count: int


def load_templates(path: str | Path | None = None) -> TemplateTable:
    """Parse the lexicon TSV; validates coverage and language disjointness."""
    if path is None:
        source = resources.files("xvlp").joinpath("data/templates.tsv")
        raw = source.read_text(encoding="utf-8")
    else:
        raw = Path(path).read_text(encoding="utf-8")

    names: dict[str, dict[int, str]] = {lang: {} for lang in LANGUAGES}
    phrases: dict[tuple[str, int, str], list[str]] = {}
    for line_no, line in enumerate(raw.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"templates line {line_no}: expected 4 tab-separated fields")
        lang, idx_s, kind, phrase = parts
        if lang not in LANGUAGES:
            raise ValueError(f"templates line {line_no}: unknown language {lang!r}")
        idx = int(idx_s)
        if kind == "name":
            names[lang][idx] = phrase.strip()
        elif kind in ("pos", "neg"):
            phrases.setdefault((lang, idx, kind), []).append(phrase.strip())
        else:
            raise ValueError(f"templates line {line_no}: unknown kind {kind!r}")

    counts = {lang: len(names[lang]) for lang in LANGUAGES}
    if len(set(counts.values())) != 1:
        raise ValueError(f"languages cover different finding counts: {counts}")
    f_count = counts["en"]
    for lang in LANGUAGES:
        for k in range(f_count):
            if k not in names[lang]:
                raise ValueError(f"missing name for finding {k} in {lang}")
            for kind in ("pos", "neg"):
                got = phrases.get((lang, k, kind), [])
                if len(got) < 2:
                    raise ValueError(f"finding {k} {lang}/{kind} needs >= 2 phrasings, got {len(got)}")

    inventories = {
        lang: {w for (lg, _, _), ps in phrases.items() if lg == lang for p in ps for w in textmod.segment(p)}
        | {w for n in names[lang].values() for w in textmod.segment(n)}
        for lang in LANGUAGES
    }
    overlap = inventories["en"] & inventories["sp"]
    if overlap:
        raise ValueError(f"language token inventories overlap: {sorted(overlap)}")

    name_lists = {lang: [names[lang][k] for k in range(f_count)] for lang in LANGUAGES}
    return TemplateTable(names=name_lists, phrases=phrases, f_count=f_count)


def grid_shape(f_count: int) -> tuple[int, int]:
    """Row-major patch layout for f_count findings: rows x cols, rows <= cols."""
    if f_count < 1:
        raise ValueError(f"f_count must be >= 1, got {f_count}")
    rows = int(np.floor(np.sqrt(f_count)))
    while f_count % rows:
        rows -= 1
    return rows, f_count // rows


def sample_findings(f_count: int, prevalence: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= prevalence <= 1.0:
        raise ValueError(f"prevalence must be in [0, 1], got {prevalence}")
    return (rng.random(f_count) < prevalence).astype(np.uint8)


def render_image(findings: np.ndarray, noise_sigma: float, seed: int, size: int) -> np.ndarray:
    """Bright tile per set finding on a dim background, plus iid pixel noise.

    Noise is drawn independently of the findings, so flipping bit k changes
    only the pixels of tile k.
    """
    findings = np.asarray(findings)
    rows, cols = grid_shape(findings.size)
    if size % rows or size % cols:
        raise ValueError(f"image size {size} not divisible by patch grid {rows}x{cols}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")
    noise = np.random.default_rng(seed).normal(0.0, noise_sigma, (size, size)) if noise_sigma > 0 else 0.0
    img = np.full((size, size), BG_LEVEL)
    th, tw = size // rows, size // cols
    for k, bit in enumerate(findings):
        if bit:
            r, c = divmod(k, cols)
            img[r * th:(r + 1) * th, c * tw:(c + 1) * tw] = FG_LEVEL
    return np.clip(img + noise, 0.0, 1.0)


def language_watermark(language: str, size: int) -> np.ndarray:
    """Fixed unit-amplitude checkerboard; opposite sign per language."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    board = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    return board if language == "en" else -board


def make_report(
    findings: np.ndarray,
    language: str,
    templates: TemplateTable,
    choices: np.ndarray,
    neg_include: np.ndarray,
) -> str:
    """Deterministic report from findings plus pre-drawn content decisions.

    `choices` picks the phrasing per finding; `neg_include` selects which
    absent findings get a negated mention. Both are shared across the two
    languages of a pair so counterparts are content-identical translations.
    """
    parts = []
    for k, bit in enumerate(findings):
        if bit:
            options = templates.phrases[(language, k, "pos")]
            parts.append(options[int(choices[k]) % len(options)])
        elif neg_include[k]:
            options = templates.phrases[(language, k, "neg")]
            parts.append(options[int(choices[k]) % len(options)])
    return " ".join(parts)


def make_dataset(
    n_en: int,
    n_sp: int,
    f_count: int = 8,
    image_size: int = 32,
    noise_sigma: float = 0.05,
    prevalence: float = 0.3,
    neg_mention_rate: float = 0.5,
    language_shift: float = 0.05,
    seed: int = 0,
    templates: TemplateTable | None = None,
) -> list[SyntheticSample]:
    """Generate the bilingual corpus; fully determined by seed."""
    templates = templates or load_templates()
    if f_count > templates.f_count:
        raise ValueError(f"f_count {f_count} exceeds the {templates.f_count} findings in the template table")
    if min(n_en, n_sp) < 0 or max(n_en, n_sp) == 0:
        raise ValueError("need a positive number of samples")
    grid_shape(f_count)  # validates layout
    if image_size % grid_shape(f_count)[0] or image_size % grid_shape(f_count)[1]:
        raise ValueError(f"image size {image_size} not tileable for {f_count} findings")

    marks = {lang: language_shift * language_watermark(lang, image_size) for lang in LANGUAGES}
    counts = {"en": n_en, "sp": n_sp}
    samples = []
    for i in range(max(n_en, n_sp)):
        bits = sample_findings(f_count, prevalence, substream(seed, "data", "bits", i))
        content = substream(seed, "data", "content", i)
        choices = content.integers(0, 2, f_count)
        neg_include = content.random(f_count) < neg_mention_rate
        for lang in LANGUAGES:
            if i >= counts[lang]:
                continue
            img = render_image(bits, noise_sigma, seed=substream(seed, "data", "image", i, lang).integers(2**62), size=image_size)
            samples.append(SyntheticSample(
                sample_id=f"{lang}{i:05d}",
                language=lang,
                findings=bits.copy(),
                report=make_report(bits, lang, templates, choices, neg_include),
                image=np.clip(img + marks[lang], 0.0, 1.0),
                pair_index=i,
            ))
    return samples


# ------------------------------------------------------------------- file I/O

def write_image(image: np.ndarray, path: Path) -> None:
    """8-byte header (height, width as u32 LE) then f32 LE row-major pixels."""
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<II", h, w))
        f.write(image.astype("<f4").tobytes())


def read_image(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise ValueError(f"truncated image header in {path}")
        h, w = struct.unpack("<II", header)
        payload = f.read(h * w * 4)
        if len(payload) != h * w * 4:
            raise ValueError(f"truncated image payload in {path}")
        return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)


def write_dataset(samples: list[SyntheticSample], out_dir: str | Path) -> Path:
    """dataset.tsv plus one image file per sample under images/."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    tsv = out_dir / "dataset.tsv"
    with open(tsv, "w", encoding="utf-8") as f:
        for s in samples:
            if "\t" in s.report or "\n" in s.report:
                raise ValueError(f"report for {s.sample_id} contains tab/newline")
            rel = f"images/{s.sample_id}.img"
            write_image(s.image, out_dir / rel)
            bits = "".join(str(int(b)) for b in s.findings)
            f.write(f"{s.sample_id}\t{s.language}\t{bits}\t{s.report}\t{rel}\n")
    return tsv


def read_dataset(dir_path: str | Path) -> list[SyntheticSample]:
    dir_path = Path(dir_path)
    tsv = dir_path / "dataset.tsv"
    samples = []
    with open(tsv, encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise ValueError(f"{tsv}:{line_no}: expected 5 tab-separated fields")
            sample_id, language, bits, report, rel = parts
            if language not in LANGUAGES:
                raise ValueError(f"{tsv}:{line_no}: unknown language {language!r}")
            if not bits or any(c not in "01" for c in bits):
                raise ValueError(f"{tsv}:{line_no}: bad findings bitstring {bits!r}")
            samples.append(SyntheticSample(
                sample_id=sample_id,
                language=language,
                findings=np.array([int(c) for c in bits], dtype=np.uint8),
                report=report,
                image=read_image(dir_path / rel),
                pair_index=int("".join(ch for ch in sample_id if ch.isdigit())),
            ))
    return samples

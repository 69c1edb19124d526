"""Vocabulary construction, word-level tokenization, and MLM masking.

Token id layout is fixed: specials occupy 0..4, English tokens follow, and
appended second-language tokens take the contiguous tail of the table.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PAD, CLS, SEP, MASK, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"]
N_SPECIALS = len(SPECIAL_TOKENS)

_WORD_RE = re.compile(r"[a-z0-9]+")


def segment(text: str) -> list[str]:
    """Lowercased whitespace/punctuation word segmentation."""
    return _WORD_RE.findall(text.lower())


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)
    en_size: int = 0   # specials + English tokens
    sp_size: int = 0   # appended second-language tokens

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, word: str) -> int:
        return self.token_to_id.get(word, UNK)


def build_base_vocab(corpus_en: list[str]) -> Vocabulary:
    """Specials plus the sorted distinct tokens of the English corpus."""
    tokens = sorted({w for doc in corpus_en for w in segment(doc)})
    vocab = Vocabulary(SPECIAL_TOKENS + tokens)
    vocab.en_size = N_SPECIALS + len(tokens)
    return vocab


def build_tfidf_vocab(corpus_sp: list[str], m: int = 0) -> list[str]:
    """Top-m corpus tokens ranked by summed L2-normalized tf-idf weight.

    idf is smoothed: ln((1 + n_docs) / (1 + df)) + 1. Each document vector is
    L2-normalized before summing so long documents do not dominate. Ties break
    lexicographically. m <= 0 means "all distinct tokens".
    """
    docs = [segment(d) for d in corpus_sp]
    n = len(docs)
    if n == 0:
        return []
    df: dict[str, int] = {}
    for d in docs:
        for w in set(d):
            df[w] = df.get(w, 0) + 1
    idf = {w: math.log((1 + n) / (1 + c)) + 1.0 for w, c in df.items()}

    weight: dict[str, float] = {w: 0.0 for w in df}
    for d in docs:
        tf: dict[str, int] = {}
        for w in d:
            tf[w] = tf.get(w, 0) + 1
        norm = math.sqrt(sum((c * idf[w]) ** 2 for w, c in tf.items()))
        if norm == 0.0:
            continue
        for w, c in tf.items():
            weight[w] += c * idf[w] / norm

    ranked = sorted(weight, key=lambda w: (-weight[w], w))
    if m <= 0:
        return ranked
    if m > len(ranked):
        log.warning("requested %d tokens but corpus has %d distinct; returning all", m, len(ranked))
        return ranked
    return ranked[:m]


def merge_vocab(vocab_en: Vocabulary, sp_tokens: list[str]) -> Vocabulary:
    """Append ranked second-language tokens after the English block."""
    kept = []
    for t in sp_tokens:
        if t in vocab_en.token_to_id:
            log.warning("dropping duplicate token %r already present in base vocab", t)
            continue
        kept.append(t)
    merged = Vocabulary(list(vocab_en.id_to_token) + kept)
    merged.en_size = vocab_en.en_size
    merged.sp_size = len(kept)
    return merged


def extend_embeddings(w_en: np.ndarray, sp_count: int, seed: int, init_std: float = 0.02) -> np.ndarray:
    """[W_en; W_sp] with W_sp ~ N(0, init_std^2); existing rows untouched."""
    rng = np.random.default_rng(seed)
    w_sp = rng.normal(0.0, init_std, size=(sp_count, w_en.shape[1]))
    return np.concatenate([w_en, w_sp], axis=0)


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """[CLS] content [SEP], truncated to max_len-2 content words, PAD-filled."""
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    words = segment(text)[: max_len - 2]
    ids = [CLS] + [vocab.lookup(w) for w in words] + [SEP]
    ids.extend([PAD] * (max_len - len(ids)))
    return np.array(ids, dtype=np.int64)


def detokenize(ids: np.ndarray, vocab: Vocabulary) -> str:
    words = [vocab.id_to_token[i] for i in np.asarray(ids) if i >= N_SPECIALS]
    return " ".join(words)


def attention_mask(ids: np.ndarray) -> np.ndarray:
    return (np.asarray(ids) != PAD).astype(np.float64)


def mask_tokens(
    ids: np.ndarray,
    vocab_size: int,
    rate: float,
    seed: int,
    mask_frac: float = 0.8,
    rand_frac: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """BERT-style masking over content positions only.

    Each non-special position is selected with probability `rate`; of the
    selected, mask_frac become [MASK], rand_frac become a random content id,
    and the rest stay put. Labels carry the original id at selected positions
    and -1 elsewhere. Deterministic given seed.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must be in [0, 1], got {rate}")
    if mask_frac + rand_frac > 1.0:
        raise ValueError("mask_frac + rand_frac must not exceed 1")
    ids = np.asarray(ids)
    rng = np.random.default_rng(seed)
    content = ids >= N_SPECIALS
    selected = content & (rng.random(ids.shape) < rate)

    labels = np.full(ids.shape, -1, dtype=np.int64)
    labels[selected] = ids[selected]

    out = ids.copy()
    u = rng.random(ids.shape)
    to_mask = selected & (u < mask_frac)
    to_rand = selected & (u >= mask_frac) & (u < mask_frac + rand_frac)
    out[to_mask] = MASK
    if to_rand.any():
        out[to_rand] = rng.integers(N_SPECIALS, vocab_size, size=int(to_rand.sum()))
    return out, labels


def save_vocab(vocab: Vocabulary, path) -> None:
    """One non-special token per line; line number equals id - 5."""
    with open(path, "w", encoding="utf-8") as f:
        for t in vocab.id_to_token[N_SPECIALS:]:
            f.write(t + "\n")


def load_vocab(path, en_size: int | None = None) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
    vocab = Vocabulary(SPECIAL_TOKENS + tokens)
    vocab.en_size = en_size if en_size is not None else N_SPECIALS + len(tokens)
    vocab.sp_size = len(vocab) - vocab.en_size
    return vocab

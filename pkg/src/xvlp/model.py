"""Toy text and vision encoders plus the three projection heads.

The text encoder is a small pre-norm transformer pooled at the CLS position;
the vision encoder is a patch embedding followed by an MLP. Projectors for the
image-text space are row-normalized; the wider decorrelation projector is not.
"""
from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from . import text as textmod
from .numeric import Tensor
from .rng import derive_seed, substream

MAGIC = b"MUC1"
LN_EPS = 1e-5
MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    d_l: int = 64
    layers: int = 4
    heads: int = 2
    max_len: int = 64
    d_v: int = 64
    proj_dim: int = 32
    ctr_dim: int = 128
    dropout: float = 0.1
    image_size: int = 32
    vision_patch: int = 8
    patch_embed_dim: int = 16
    vision_hidden: int = 128
    mlp_ratio: int = 2
    init_std: float = 0.02

    def validate(self) -> None:
        if self.d_l % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_l ({self.d_l})")
        if self.ctr_dim <= self.d_l:
            raise ValueError(f"ctr_dim ({self.ctr_dim}) must exceed d_l ({self.d_l})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.image_size % self.vision_patch:
            raise ValueError(f"image_size ({self.image_size}) not divisible by vision_patch ({self.vision_patch})")
        for name in ("d_l", "layers", "heads", "max_len", "d_v", "proj_dim", "vision_patch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


class ModelParams:
    """Named parameter table; iteration order is insertion order."""

    def __init__(self, cfg: ModelConfig, vocab_size: int):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> None:
        self.tensors[name] = Tensor(data, requires_grad=True)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def trainable(self) -> list[Tensor]:
        return [t for t in self.tensors.values() if t.requires_grad]

    def trainable_named(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.tensors.items() if t.requires_grad]


def init_params(cfg: ModelConfig, vocab_size: int, seed: int) -> ModelParams:
    """Gaussian(0, init_std^2) weights, zero biases, unit layer-norm gains."""
    cfg.validate()
    p = ModelParams(cfg, vocab_size)
    rng = substream(seed, "init")

    def w(name, *shape):
        p.add(name, rng.normal(0.0, cfg.init_std, shape))

    def zeros(name, *shape):
        p.add(name, np.zeros(shape))

    def ones(name, *shape):
        p.add(name, np.ones(shape))

    d, h = cfg.d_l, cfg.d_l * cfg.mlp_ratio
    w("text.word_emb", vocab_size, d)
    w("text.pos_emb", cfg.max_len, d)
    for i in range(cfg.layers):
        pre = f"text.l{i}"
        ones(f"{pre}.ln1.g", d)
        zeros(f"{pre}.ln1.b", d)
        for mat in ("wq", "wk", "wv", "wo"):
            w(f"{pre}.attn.{mat}", d, d)
        # no key bias: a per-dimension shift common to every key cancels in
        # the softmax, so the parameter would be functionally inert
        for vec in ("bq", "bv", "bo"):
            zeros(f"{pre}.attn.{vec}", d)
        ones(f"{pre}.ln2.g", d)
        zeros(f"{pre}.ln2.b", d)
        w(f"{pre}.mlp.w1", d, h)
        zeros(f"{pre}.mlp.b1", h)
        w(f"{pre}.mlp.w2", h, d)
        zeros(f"{pre}.mlp.b2", d)
    ones("text.ln_f.g", d)
    zeros("text.ln_f.b", d)
    zeros("mlm.bias", vocab_size)

    ppix = cfg.vision_patch * cfg.vision_patch
    w("vision.patch.w", ppix, cfg.patch_embed_dim)
    zeros("vision.patch.b", cfg.patch_embed_dim)
    n_patches = (cfg.image_size // cfg.vision_patch) ** 2
    w("vision.mlp.w1", n_patches * cfg.patch_embed_dim, cfg.vision_hidden)
    zeros("vision.mlp.b1", cfg.vision_hidden)
    w("vision.mlp.w2", cfg.vision_hidden, cfg.d_v)
    zeros("vision.mlp.b2", cfg.d_v)

    for name, din, dout in (
        ("proj_v", cfg.d_v, cfg.proj_dim),
        ("proj_l", cfg.d_l, cfg.proj_dim),
        ("proj_d", cfg.d_l, cfg.ctr_dim),
    ):
        hidden = max(din, dout)
        w(f"{name}.w1", din, hidden)
        zeros(f"{name}.b1", hidden)
        w(f"{name}.w2", hidden, dout)
        zeros(f"{name}.b2", dout)
    return p


def _layer_norm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    mu = nm.mean(x, axis=-1, keepdims=True)
    var = nm.variance(x, axis=-1, keepdims=True)
    xn = nm.div(nm.sub(x, mu), nm.sqrt(nm.add(var, Tensor(np.array(LN_EPS)))))
    return nm.add(nm.mul(xn, g), b)


def _attention(p: ModelParams, x: Tensor, mask_bias: np.ndarray, layer: int) -> Tensor:
    cfg = p.cfg
    k_batch, seq, d = x.shape
    heads, dh = cfg.heads, d // cfg.heads
    pre = f"text.l{layer}.attn"

    def split_heads(t: Tensor) -> Tensor:
        return nm.transpose(nm.reshape(t, (k_batch, seq, heads, dh)), (0, 2, 1, 3))

    q = split_heads(nm.add(nm.matmul(x, p[f"{pre}.wq"]), p[f"{pre}.bq"]))
    k = split_heads(nm.matmul(x, p[f"{pre}.wk"]))
    v = split_heads(nm.add(nm.matmul(x, p[f"{pre}.wv"]), p[f"{pre}.bv"]))

    scores = nm.scale(nm.matmul(q, nm.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    scores = nm.add(scores, Tensor(mask_bias))
    att = nm.softmax(scores, axis=-1)
    out = nm.matmul(att, v)
    out = nm.reshape(nm.transpose(out, (0, 2, 1, 3)), (k_batch, seq, d))
    return nm.add(nm.matmul(out, p[f"{pre}.wo"]), p[f"{pre}.bo"])


def text_encode(
    p: ModelParams,
    ids: np.ndarray,
    dropout: float = 0.0,
    seed: int = 0,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Returns (pooled CLS embedding K x D, per-token states K x L x D).

    PAD positions are excluded as attention keys, so ids hidden behind the
    mask cannot influence any unmasked position's output.
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError(f"ids must be K x L, got shape {ids.shape}")
    k_batch, seq = ids.shape
    if seq > p.cfg.max_len:
        raise ValueError(f"sequence length {seq} exceeds max_len {p.cfg.max_len}")
    if mask is None:
        mask = textmod.attention_mask(ids)
    # bias over keys: 0 where attendable, MASK_BIAS where PAD
    mask_bias = ((1.0 - mask) * MASK_BIAS).reshape(k_batch, 1, 1, seq)

    x = nm.add(nm.embedding(p["text.word_emb"], ids), nm.slice_(p["text.pos_emb"], slice(0, seq)))
    for i in range(p.cfg.layers):
        a = _attention(p, _layer_norm(x, p[f"text.l{i}.ln1.g"], p[f"text.l{i}.ln1.b"]), mask_bias, i)
        if dropout > 0.0:
            a = nm.dropout(a, dropout, derive_seed(seed, "attn", i))
        x = nm.add(x, a)
        m = _layer_norm(x, p[f"text.l{i}.ln2.g"], p[f"text.l{i}.ln2.b"])
        m = nm.add(nm.matmul(nm.relu(nm.add(nm.matmul(m, p[f"text.l{i}.mlp.w1"]), p[f"text.l{i}.mlp.b1"])),
                             p[f"text.l{i}.mlp.w2"]), p[f"text.l{i}.mlp.b2"])
        if dropout > 0.0:
            m = nm.dropout(m, dropout, derive_seed(seed, "mlp", i))
        x = nm.add(x, m)
    x = _layer_norm(x, p["text.ln_f.g"], p["text.ln_f.b"])
    pooled = nm.slice_(x, (slice(None), 0))
    return pooled, x


def vision_encode(p: ModelParams, images: np.ndarray) -> Tensor:
    """Patch embedding + MLP on K x H x W grids, producing K x d_v."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ValueError(f"images must be K x H x W, got shape {images.shape}")
    k_batch, hgt, wid = images.shape
    ps = p.cfg.vision_patch
    if hgt % ps or wid % ps:
        raise ValueError(f"image {hgt}x{wid} not divisible by patch size {ps}")
    gr, gc = hgt // ps, wid // ps
    n_patches = gr * gc
    expected = p["vision.mlp.w1"].shape[0]
    if n_patches * p.cfg.patch_embed_dim != expected:
        raise ValueError(f"image layout gives {n_patches} patches; model was built for {expected // p.cfg.patch_embed_dim}")

    patches = images.reshape(k_batch, gr, ps, gc, ps).transpose(0, 1, 3, 2, 4).reshape(k_batch, n_patches, ps * ps)
    x = nm.relu(nm.add(nm.matmul(Tensor(patches), p["vision.patch.w"]), p["vision.patch.b"]))
    x = nm.reshape(x, (k_batch, n_patches * p.cfg.patch_embed_dim))
    x = nm.relu(nm.add(nm.matmul(x, p["vision.mlp.w1"]), p["vision.mlp.b1"]))
    return nm.add(nm.matmul(x, p["vision.mlp.w2"]), p["vision.mlp.b2"])


def _mlp2(p: ModelParams, prefix: str, x: Tensor) -> Tensor:
    hdn = nm.relu(nm.add(nm.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return nm.add(nm.matmul(hdn, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def project_v(p: ModelParams, x: Tensor) -> Tensor:
    """Image embedding into the shared space; rows unit-normalized."""
    return nm.l2_normalize(_mlp2(p, "proj_v", x), axis=-1)


def project_l(p: ModelParams, x: Tensor) -> Tensor:
    """Text embedding into the shared space; rows unit-normalized."""
    return nm.l2_normalize(_mlp2(p, "proj_l", x), axis=-1)


def project_d(p: ModelParams, x: Tensor) -> Tensor:
    """Wide decorrelation embedding; deliberately NOT normalized."""
    return _mlp2(p, "proj_d", x)


def mlm_head(p: ModelParams, per_token: Tensor) -> Tensor:
    """Tied-vocabulary logits: states @ word_emb^T + bias."""
    return nm.add(nm.matmul(per_token, nm.transpose(p["text.word_emb"])), p["mlm.bias"])


def set_frozen_layers(p: ModelParams, n_frozen: int) -> None:
    """Freeze the lowest n_frozen text layers; n == layers also freezes embeddings."""
    layers = p.cfg.layers
    if not 0 <= n_frozen <= layers:
        raise ValueError(f"n_frozen must be in [0, {layers}], got {n_frozen}")
    for name, t in p.tensors.items():
        m = re.match(r"text\.l(\d+)\.", name)
        if m:
            t.requires_grad = int(m.group(1)) >= n_frozen
        elif name in ("text.word_emb", "text.pos_emb"):
            t.requires_grad = n_frozen < layers
        else:
            t.requires_grad = True


def default_frozen(layers: int) -> int:
    """Desk-scale analog of freezing 9 of 12 layers: ceil(0.75 * L)."""
    return int(np.ceil(0.75 * layers))


# -------------------------------------------------------------- checkpoint IO

def checkpoint_write(arrays: dict[str, np.ndarray], path) -> None:
    """Binary table: magic, then per array name/rank/dims/payload.

    f32 arrays use the plain rank byte; f64 payloads set the rank byte's high
    bit so double-precision state round-trips bit-exactly.
    """
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype == np.float32:
                rank_byte, payload = arr.ndim, arr.astype("<f4").tobytes()
            else:
                rank_byte, payload = arr.ndim | 0x80, arr.astype("<f8").tobytes()
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<B", rank_byte))
            for dim in arr.shape:
                f.write(struct.pack("<I", dim))
            f.write(payload)


def checkpoint_read(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"bad checkpoint magic in {path}")
    arrays: dict[str, np.ndarray] = {}
    off = 4
    while off < len(blob):
        if off + 2 > len(blob):
            raise ValueError(f"truncated checkpoint {path}")
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        rank_byte = blob[off]
        off += 1
        wide = bool(rank_byte & 0x80)
        rank = rank_byte & 0x7F
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        count = int(np.prod(dims)) if dims else 1
        width = 8 if wide else 4
        end = off + count * width
        if end > len(blob):
            raise ValueError(f"truncated payload for {name!r} in {path}")
        dt = "<f8" if wide else "<f4"
        arrays[name] = np.frombuffer(blob[off:end], dtype=dt).reshape(dims).copy()
        off = end
    return arrays


def save_params(p: ModelParams, path) -> None:
    checkpoint_write({name: t.data for name, t in p.tensors.items()}, path)


def load_params_into(p: ModelParams, arrays: dict[str, np.ndarray]) -> None:
    """Copy stored arrays into an already-built parameter table, shape-checked."""
    for name, t in p.tensors.items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if tuple(arrays[name].shape) != t.data.shape:
            raise ValueError(f"shape mismatch for {name!r}: {arrays[name].shape} vs {t.data.shape}")
        t.data = arrays[name].astype(np.float64)


def clone_params(p: ModelParams) -> ModelParams:
    """Deep copy of the values and trainability flags; graph state is not cloned."""
    out = ModelParams(p.cfg, p.vocab_size)
    for name, t in p.tensors.items():
        out.add(name, t.data.copy())
        out.tensors[name].requires_grad = t.requires_grad
    return out

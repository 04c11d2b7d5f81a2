"""Toy-scale multimodal model: patch-transformer visual encoder, linear
projection into the word-embedding space, and a causal transformer LM."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokenizer import TokenSequence


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.trainable:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def name_parameters(self, prefix: str) -> None:
        """Stamp fully qualified names onto the parameter tensors."""
        for name, p in self.named_parameters(prefix):
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _param(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), trainable=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _param(rng, (d_in, d_out), 1.0 / math.sqrt(d_in))
        self.bias = Tensor(np.zeros(d_out), trainable=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        y = ad.matmul(ad.reshape(x, (-1, x.shape[-1])), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return ad.reshape(y, lead + (self.weight.shape[1],))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(d), trainable=True)
        self.beta = Tensor(np.zeros(d), trainable=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Attention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, causal: bool):
        if d % heads:
            raise ValueError(f"heads={heads} does not divide dim={d}")
        self.q = Linear(d, d, rng)
        self.k = Linear(d, d, rng)
        self.v = Linear(d, d, rng)
        self.out = Linear(d, d, rng)
        self.heads = heads
        self.causal = causal

    def __call__(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        h, dh = self.heads, d // self.heads

        def split(t):
            return ad.transpose(ad.reshape(t, (B, L, h, dh)), (0, 2, 1, 3))

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = ad.matmul(q, ad.swap_last(k)) * (1.0 / math.sqrt(dh))
        mask = np.tril(np.ones((L, L), dtype=bool)) if self.causal else None
        att = ad.softmax(scores, axis=-1, mask=mask)
        y = ad.transpose(ad.matmul(att, v), (0, 2, 1, 3))
        return self.out(ad.reshape(y, (B, L, d)))


class Block(Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, causal: bool, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(d)
        self.attn = Attention(d, heads, rng, causal)
        self.ln2 = LayerNorm(d)
        self.fc1 = Linear(d, mlp_ratio * d, rng)
        self.fc2 = Linear(mlp_ratio * d, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.fc2(ad.relu(self.fc1(self.ln2(x))))


# ---------------------------------------------------------------------------
# visual encoder


@dataclass
class VisualEncoderConfig:
    height: int = 64
    width: int = 32
    channels: int = 3
    patch: int = 8
    dim: int = 64
    layers: int = 2
    heads: int = 4
    tap_point: str = "post_last_layer"
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.height % self.patch or self.width % self.patch:
            raise ValueError(f"image {self.height}x{self.width} not divisible by patch {self.patch}")
        if self.dim % self.heads:
            raise ValueError(f"heads={self.heads} does not divide dim={self.dim}")
        if self.tap_point not in ("pre_last_layer", "post_last_layer"):
            raise ValueError(f"unknown tap_point {self.tap_point!r}")

    @property
    def num_patches(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W, C] -> [B, (H/p)*(W/p), p*p*C], patches in row-major order."""
    B, H, W, C = images.shape
    x = images.reshape(B, H // patch, patch, W // patch, patch, C)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(B, (H // patch) * (W // patch), patch * patch * C)


class VisualEncoder(Module):
    def __init__(self, cfg: VisualEncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch * cfg.patch * cfg.channels, cfg.dim, rng)
        self.pos = _param(rng, (cfg.num_patches, cfg.dim), 0.02)
        self.blocks = [Block(cfg.dim, cfg.heads, rng, causal=False, mlp_ratio=cfg.mlp_ratio)
                       for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.dim)

    def active_parameters(self) -> list[Tensor]:
        """Parameters that receive gradient at the configured tap point."""
        if self.cfg.tap_point == "post_last_layer":
            return self.parameters()
        unused = {id(p) for p in self.blocks[-1].parameters()}
        return [p for p in self.parameters() if id(p) not in unused]

    def __call__(self, images: np.ndarray) -> Tensor:
        return encode_image(images, self)


def encode_image(images, encoder: VisualEncoder) -> Tensor:
    """Per-patch features f_v, [B, num_patches, dim] (or [N, dim] for one image).

    ``images`` is a pixel array in [0, 1] or a Tensor of one (the latter keeps
    the pixels differentiable).
    """
    cfg = encoder.cfg
    as_tensor = isinstance(images, Tensor)
    if not as_tensor:
        images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = ad.reshape(images, (1,) + images.shape) if as_tensor else images[None]
    if images.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise ValueError(f"image shape {images.shape[1:]} does not match encoder "
                         f"{(cfg.height, cfg.width, cfg.channels)}")
    if as_tensor:
        B, H, W, C, p = *images.shape, cfg.patch
        x = ad.reshape((images - 0.5) * 4.0, (B, H // p, p, W // p, p, C))
        x = ad.reshape(ad.transpose(x, (0, 1, 3, 2, 4, 5)), (B, (H // p) * (W // p), p * p * C))
    else:
        x = Tensor(patchify((images - 0.5) / 0.25, cfg.patch))
    x = encoder.patch_embed(x) + encoder.pos
    blocks = encoder.blocks if cfg.tap_point == "post_last_layer" else encoder.blocks[:-1]
    for blk in blocks:
        x = blk(x)
    x = encoder.ln_f(x)
    return ad.index(x, 0) if single else x


def reid_embed(images: np.ndarray, encoder: VisualEncoder) -> Tensor:
    """Retrieval embedding: mean of the patch features, [B, dim]."""
    feats = encode_image(images, encoder)
    return ad.mean(feats, axis=-2)


class Projection(Linear):
    """Affine map from visual features to LM word-embedding space."""

    def __init__(self, d_v: int, d_lm: int, rng: np.random.Generator):
        super().__init__(d_v, d_lm, rng)


def project(f_v: Tensor, proj: Projection) -> Tensor:
    if f_v.shape[-1] != proj.weight.shape[0]:
        raise ValueError(f"feature dim {f_v.shape[-1]} != projection input {proj.weight.shape[0]}")
    return proj(f_v)


# ---------------------------------------------------------------------------
# language model


@dataclass
class CausalLMConfig:
    vocab_size: int = 256
    dim: int = 64
    layers: int = 3
    heads: int = 4
    max_len: int = 160
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"heads={self.heads} does not divide dim={self.dim}")


class CausalLM(Module):
    def __init__(self, cfg: CausalLMConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.tok = _param(rng, (cfg.vocab_size, cfg.dim), 1.0 / math.sqrt(cfg.dim))
        self.pos = _param(rng, (cfg.max_len, cfg.dim), 0.02)
        self.blocks = [Block(cfg.dim, cfg.heads, rng, causal=True, mlp_ratio=cfg.mlp_ratio)
                       for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(cfg.dim)
        self.head = Linear(cfg.dim, cfg.vocab_size, rng, bias=False)


def lm_forward(lm: CausalLM, ids: np.ndarray, image_slots: np.ndarray | None = None,
               image_embeds: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Logits [B, L, V] and final hidden states [B, L, d].

    Embeddings at ``image_slots`` [B, N] are replaced by ``image_embeds``
    [B, N, d].  1-D ``ids`` are treated as a batch of one.
    """
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None]
        if image_slots is not None:
            image_slots = np.asarray(image_slots)[None]
        if image_embeds is not None and image_embeds.ndim == 2:
            image_embeds = ad.reshape(image_embeds, (1,) + image_embeds.shape)
    B, L = ids.shape
    if L > lm.cfg.max_len:
        raise ValueError(f"sequence length {L} exceeds max_len {lm.cfg.max_len}")
    x = ad.embedding(lm.tok, ids)
    n_slots = 0 if image_slots is None else np.asarray(image_slots).shape[-1]
    n_embeds = 0 if image_embeds is None else image_embeds.shape[1]
    if n_slots != n_embeds:
        raise ValueError(f"{n_slots} image slots but {n_embeds} image embeddings")
    if n_slots:
        x = ad.scatter_positions(x, image_slots, image_embeds)
    x = x + ad.index(lm.pos, slice(0, L))
    for blk in lm.blocks:
        x = blk(x)
    hidden = lm.ln_f(x)
    logits = lm.head(hidden)
    if single:
        return ad.index(logits, 0), ad.index(hidden, 0)
    return logits, hidden


def pool_image_latents(hidden: Tensor, image_slots: np.ndarray, mode: str = "mean") -> Tensor:
    """Pool LM hidden states over the image-slot positions -> [B, d] (or [d])."""
    image_slots = np.asarray(image_slots, dtype=np.int64)
    if image_slots.size == 0:
        raise ValueError("no image slots to pool")
    single = hidden.ndim == 2
    if single:
        hidden = ad.reshape(hidden, (1,) + hidden.shape)
        image_slots = image_slots[None]
    if mode == "mean":
        out = ad.mean(ad.gather_positions(hidden, image_slots), axis=1)
    elif mode == "last":
        out = ad.index(ad.gather_positions(hidden, image_slots[:, -1:]), (slice(None), 0))
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    return ad.index(out, 0) if single else out


def greedy_decode(lm: CausalLM, prefix: TokenSequence, image_embeds: Tensor, eos_id: int,
                  max_new: int = 24) -> list[int]:
    """Debug-only greedy continuation of ``prefix``."""
    ids = list(prefix.ids)
    out: list[int] = []
    with ad.no_grad():
        for _ in range(max_new):
            if len(ids) >= lm.cfg.max_len:
                break
            logits, _ = lm_forward(lm, np.array(ids), prefix.image_slots, image_embeds)
            nxt = int(np.argmax(logits.data[-1]))
            out.append(nxt)
            ids.append(nxt)
            if nxt == eos_id:
                break
    return out


# ---------------------------------------------------------------------------
# model sets


@dataclass
class ModelSet:
    """Everything one training stage owns.  Stage-2 sets carry no LM."""

    stage: str
    encoder: VisualEncoder
    projection: Projection | None = None
    lm: CausalLM | None = None
    id_head: Linear | None = None
    vocab: list[str] | None = None
    pooling: str = "mean"

    def modules(self) -> dict[str, Module]:
        mods = {"encoder": self.encoder, "projection": self.projection,
                "lm": self.lm, "id_head": self.id_head}
        return {k: v for k, v in mods.items() if v is not None}

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{k}.{n}", p) for k, m in self.modules().items() for n, p in m.named_parameters()]

    def header(self) -> dict:
        return {
            "stage": self.stage,
            "encoder": asdict(self.encoder.cfg),
            "lm": asdict(self.lm.cfg) if self.lm else None,
            "projection": list(self.projection.weight.shape) if self.projection else None,
            "id_head": list(self.id_head.weight.shape) if self.id_head else None,
            "vocab": self.vocab,
            "pooling": self.pooling,
        }


def build_models(stage: str, enc_cfg: VisualEncoderConfig, lm_cfg: CausalLMConfig | None,
                 num_classes: int | None, seed: int, vocab: list[str] | None = None,
                 pooling: str = "mean") -> ModelSet:
    """Freshly initialised models; each part draws from its own seeded stream."""
    enc = VisualEncoder(enc_cfg, np.random.default_rng([seed, 1]))
    proj = lm = None
    if lm_cfg is not None:
        proj = Projection(enc_cfg.dim, lm_cfg.dim, np.random.default_rng([seed, 2]))
        lm = CausalLM(lm_cfg, np.random.default_rng([seed, 3]))
    head = None
    if num_classes:
        feat = lm_cfg.dim if lm_cfg is not None else enc_cfg.dim
        head = Linear(feat, num_classes, np.random.default_rng([seed, 4]), bias=False)
    ms = ModelSet(stage, enc, proj, lm, head, vocab, pooling)
    for k, m in ms.modules().items():
        m.name_parameters(k + ".")
    return ms

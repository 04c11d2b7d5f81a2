"""PK sampling, augmentation and the two training stages.

Recipes for the multimodal stage:

========== ================== ======
recipe     dialogue mode      lambda
========== ================== ======
baseline   baseline_prompt    1.0
common     common_instruction 1.0
syncreid   baseline_prompt    0.3
full       common_instruction 0.3
========== ================== ======

With lambda == 1 the identity/triplet terms are not computed at all.
"""

from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NonFiniteError, Tensor
from .losses import TripletConfig, id_loss, lm_nll, overall_loss, triplet_loss
from .models import (CausalLMConfig, ModelSet, VisualEncoderConfig, build_models, encode_image,
                     lm_forward, pool_image_latents, project, reid_embed)
from .synthdata import Dataset, build_dialogue
from .tokenizer import (IMAGE_CONTINUATION_INSTRUCTION, Vocabulary, build_vocab, format_dialogue,
                        pad_batch)
from .synthdata import BASELINE_PROMPTS, BASELINE_TEMPLATE

log = logging.getLogger(__name__)

RECIPES = {
    "baseline": ("baseline_prompt", 1.0),
    "common": ("common_instruction", 1.0),
    "syncreid": ("baseline_prompt", None),
    "full": ("common_instruction", None),
}


@dataclass
class AugmentConfig:
    flip: bool = True
    flip_p: float = 0.5
    crop: bool = True
    pad: int = 4
    erase: bool = True
    erase_p: float = 0.5
    erase_area: tuple[float, float] = (0.1, 0.3)


@dataclass
class TrainConfig:
    stage: str = "mllmreid_pretrain"
    recipe: str = "full"
    lam: float = 0.3
    P: int = 8
    K: int = 4
    epochs: int = 15
    lr: float = 3e-4
    seed: int = 0
    margin: float = 0.3
    triplet_reduction: str = "mean"
    clip_norm: float | None = None
    turns: int = 1
    debug_checks: bool = False
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda={self.lam} outside [0, 1]")
        if self.stage not in ("baseline_pretrain", "mllmreid_pretrain", "reid"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}; choose from {sorted(RECIPES)}")


@dataclass
class PKBatch:
    indices: np.ndarray  # dataset record indices, identity-major
    labels: np.ndarray   # contiguous class labels
    pids: np.ndarray

    def check(self, P: int, K: int) -> None:
        uniq, counts = np.unique(self.labels, return_counts=True)
        if len(uniq) != P or (counts != K).any():
            raise AssertionError(f"PK invariant broken: {len(uniq)} ids, counts {counts.tolist()}")


def group_by_identity(dataset: Dataset, split: str = "train") -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(dataset.records):
        if r.split == split:
            groups.setdefault(r.pid, []).append(i)
    return groups


def pk_sample(groups: dict[int, list[int]], P: int, K: int, rng: np.random.Generator,
              label_of: dict[int, int] | None = None) -> PKBatch:
    """P identities without replacement, K images each (with replacement only
    when an identity has fewer than K images)."""
    pids = sorted(groups)
    if len(pids) < P:
        raise ValueError(f"need {P} identities, split has {len(pids)}")
    label_of = label_of or {p: i for i, p in enumerate(pids)}
    chosen = rng.choice(len(pids), size=P, replace=False)
    idx, labels, out_pids = [], [], []
    for c in chosen:
        pid = pids[int(c)]
        pool = groups[pid]
        picks = rng.choice(len(pool), size=K, replace=len(pool) < K)
        idx.extend(pool[int(j)] for j in picks)
        labels.extend([label_of[pid]] * K)
        out_pids.extend([pid] * K)
    return PKBatch(np.array(idx), np.array(labels), np.array(out_pids))


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig,
            fill: np.ndarray | None = None) -> np.ndarray:
    """Flip, pad-and-crop, random erasing (in that order); returns a new array."""
    img = np.array(image, dtype=np.float64, copy=True)
    H, W, C = img.shape
    if cfg.flip and rng.random() < cfg.flip_p:
        img = img[:, ::-1].copy()
    if cfg.crop and cfg.pad > 0:
        padded = np.zeros((H + 2 * cfg.pad, W + 2 * cfg.pad, C))
        padded[cfg.pad:cfg.pad + H, cfg.pad:cfg.pad + W] = img
        y, x = (int(v) for v in rng.integers(0, 2 * cfg.pad + 1, size=2))
        img = padded[y:y + H, x:x + W].copy()
    if cfg.erase and rng.random() < cfg.erase_p:
        lo, hi = cfg.erase_area
        fill = np.zeros(C) if fill is None else np.asarray(fill)
        for _ in range(100):
            area = rng.uniform(lo, hi) * H * W
            aspect = math.exp(rng.uniform(math.log(0.3), math.log(1 / 0.3)))
            h = int(round(math.sqrt(area * aspect)))
            w = int(round(math.sqrt(area / aspect)))
            if 0 < h <= H and 0 < w <= W and lo <= h * w / (H * W) <= hi:
                y = int(rng.integers(0, H - h + 1))
                x = int(rng.integers(0, W - w + 1))
                img[y:y + h, x:x + w] = fill
                break
    return img


def batch_images(dataset: Dataset, batch: PKBatch, rng: np.random.Generator,
                 cfg: AugmentConfig) -> np.ndarray:
    raw = dataset.float_images(batch.indices)
    return np.stack([augment(im, rng, cfg, dataset.mean) for im in raw])


def dialogue_corpus(dataset: Dataset) -> list[str]:
    texts = list(dataset.captions.values()) + list(dataset.continuations.values())
    texts += [IMAGE_CONTINUATION_INSTRUCTION, "continue the following text ."]
    texts += [BASELINE_TEMPLATE.format(prompt=p) for p in BASELINE_PROMPTS]
    return texts


def _history_row(step: int, lm: float, idl: float | None, tri: float | None, lam: float,
                 lr: float) -> dict:
    overall = overall_loss(lm, idl or 0.0, tri or 0.0, lam)
    return {"step": step, "lm_nll": lm, "id_loss": idl, "triplet_loss": tri,
            "overall": overall, "lambda": lam, "lr": lr}


def _finite_or_abort(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite loss at step {step}")


@contextmanager
def _at_step(step: int):
    """Tags non-finite errors raised inside a forward pass with the step index."""
    try:
        yield
    except NonFiniteError as exc:
        raise NonFiniteError(f"non-finite loss at step {step}: {exc}") from exc


def steps_for(dataset: Dataset, cfg: TrainConfig) -> int:
    n_train = len(dataset.split("train"))
    if cfg.P * cfg.K > n_train:
        raise ValueError(f"P*K={cfg.P * cfg.K} exceeds {n_train} training images")
    return max(1, cfg.epochs * (n_train // (cfg.P * cfg.K)))


def init_pretrain_models(dataset: Dataset, cfg: TrainConfig, enc_cfg: VisualEncoderConfig | None = None,
                         lm_cfg: CausalLMConfig | None = None, pooling: str = "mean") -> ModelSet:
    vocab = build_vocab(dialogue_corpus(dataset))
    enc_cfg = enc_cfg or VisualEncoderConfig()
    lm_cfg = lm_cfg or CausalLMConfig()
    if len(vocab) > lm_cfg.vocab_size:
        raise ValueError(f"vocabulary of {len(vocab)} tokens exceeds LM vocab_size {lm_cfg.vocab_size}")
    stage = "baseline_pretrain" if cfg.recipe == "baseline" else "mllmreid_pretrain"
    return build_models(stage, enc_cfg, lm_cfg, len(dataset.train_pids), cfg.seed,
                        vocab=vocab.tokens, pooling=pooling)


def stage1_losses(models: ModelSet, vocab: Vocabulary, dataset: Dataset, batch: PKBatch,
                  images: np.ndarray, mode: str, lam: float, rng: np.random.Generator,
                  tri_cfg: TripletConfig, turns: int = 1):
    """Forward pass of the multimodal stage; returns (total, lm, id, tri)."""
    n_img = models.encoder.cfg.num_patches
    seqs = []
    for rec_i, pid in zip(batch.indices, batch.pids):
        sample = build_dialogue(int(rec_i), dataset.captions[int(pid)], dataset.continuations[int(pid)],
                                mode, rng, turns)
        seqs.append(format_dialogue(sample, vocab, n_img))
    ids, mask, slots = pad_batch(seqs, vocab.pad_id)
    f_v = encode_image(images, models.encoder)
    tokens = project(f_v, models.projection)
    logits, hidden = lm_forward(models.lm, ids, slots, tokens)
    lm = lm_nll(logits, ids, mask)
    if lam >= 1.0:
        return lm, lm, None, None
    pooled = pool_image_latents(hidden, slots, models.pooling)
    idl = id_loss(models.id_head(pooled), batch.labels)
    tri = triplet_loss(pooled, batch.labels, tri_cfg)
    return overall_loss(lm, idl, tri, lam), lm, idl, tri


def train_stage1(models: ModelSet, dataset: Dataset, cfg: TrainConfig,
                 steps: int | None = None, on_step: Callable[[dict], None] | None = None):
    """Multimodal stage for any of the four recipes.

    Returns ``(models, history)``; history rows are
    ``{step, lm_nll, id_loss, triplet_loss, overall, lambda, lr}``.
    """
    mode, fixed_lam = RECIPES[cfg.recipe]
    lam = cfg.lam if fixed_lam is None else fixed_lam
    if cfg.stage == "baseline_pretrain" and lam != 1.0:
        raise ValueError("baseline pretraining has no identity terms (lambda must be 1)")
    vocab = Vocabulary(models.vocab)
    tri_cfg = TripletConfig(cfg.margin, "euclidean", cfg.triplet_reduction)
    groups = group_by_identity(dataset)
    label_of = {p: i for i, p in enumerate(sorted(groups))}
    params = models.encoder.active_parameters() + models.projection.parameters() + models.lm.parameters()
    if lam < 1.0:
        params += models.id_head.parameters()
    opt = Adam(params, lr=cfg.lr)
    # separate streams: batches/augmentations are shared across recipes with
    # the same seed, prompt draws are not
    batch_rng = np.random.default_rng([cfg.seed, 11])
    aug_rng = np.random.default_rng([cfg.seed, 12])
    prompt_rng = np.random.default_rng([cfg.seed, 13])
    steps = steps if steps is not None else steps_for(dataset, cfg)
    history = []
    for step in range(steps):
        batch = pk_sample(groups, cfg.P, cfg.K, batch_rng, label_of)
        if cfg.debug_checks:
            batch.check(cfg.P, cfg.K)
        images = batch_images(dataset, batch, aug_rng, cfg.augment)
        ad.get_tape().clear()
        with _at_step(step):
            total, lm, idl, tri = stage1_losses(models, vocab, dataset, batch, images, mode, lam,
                                                prompt_rng, tri_cfg, cfg.turns)
        _finite_or_abort(total.item(), step)
        ad.backward(total)
        if cfg.clip_norm:
            ad.clip_grad_norm(params, cfg.clip_norm)
        opt.step()
        row = _history_row(step, lm.item(), idl.item() if idl is not None else None,
                           tri.item() if tri is not None else None, lam, cfg.lr)
        history.append(row)
        if on_step:
            on_step(row)
    models.stage = "baseline_pretrain" if cfg.recipe == "baseline" else "mllmreid_pretrain"
    return models, history


def train_baseline(models: ModelSet, dataset: Dataset, cfg: TrainConfig, **kw):
    """Diverse prompts, caption targets, no identity terms."""
    cfg = TrainConfig(**{**asdict(cfg), "recipe": "baseline", "stage": "baseline_pretrain", "lam": 1.0})
    return train_stage1(models, dataset, cfg, **kw)


def train_stage2(encoder_source: ModelSet | None, dataset: Dataset, cfg: TrainConfig,
                 steps: int | None = None, on_step: Callable[[dict], None] | None = None,
                 enc_cfg: VisualEncoderConfig | None = None):
    """Identity + triplet training of the visual encoder alone.

    The encoder is copied from ``encoder_source`` (a stage-1 or baseline model
    set) or freshly initialised when it is None.  A new identity head is
    created.  Captions are never read.
    """
    enc_cfg = encoder_source.encoder.cfg if encoder_source is not None else (enc_cfg or VisualEncoderConfig())
    groups = group_by_identity(dataset)
    label_of = {p: i for i, p in enumerate(sorted(groups))}
    models = build_models("reid", enc_cfg, None, len(groups), cfg.seed + 1000)
    if encoder_source is not None:
        src = dict(encoder_source.encoder.named_parameters())
        for name, p in models.encoder.named_parameters():
            p.data = src[name].data.copy()
    tri_cfg = TripletConfig(cfg.margin, "euclidean", cfg.triplet_reduction)
    params = models.encoder.active_parameters() + models.id_head.parameters()
    opt = Adam(params, lr=cfg.lr)
    batch_rng = np.random.default_rng([cfg.seed, 21])
    aug_rng = np.random.default_rng([cfg.seed, 22])
    steps = steps if steps is not None else steps_for(dataset, cfg)
    history = []
    for step in range(steps):
        batch = pk_sample(groups, cfg.P, cfg.K, batch_rng, label_of)
        if cfg.debug_checks:
            batch.check(cfg.P, cfg.K)
        images = batch_images(dataset, batch, aug_rng, cfg.augment)
        ad.get_tape().clear()
        with _at_step(step):
            emb = reid_embed(images, models.encoder)
            idl = id_loss(models.id_head(emb), batch.labels)
            tri = triplet_loss(emb, batch.labels, tri_cfg)
        total = idl + tri
        _finite_or_abort(total.item(), step)
        ad.backward(total)
        if cfg.clip_norm:
            ad.clip_grad_norm(params, cfg.clip_norm)
        opt.step()
        row = {"step": step, "lm_nll": None, "id_loss": idl.item(), "triplet_loss": tri.item(),
               "overall": total.item(), "lambda": 0.0, "lr": cfg.lr}
        history.append(row)
        if on_step:
            on_step(row)
    return models, history


def extract_embeddings(models: ModelSet, dataset: Dataset, split: str, batch_size: int = 64):
    """EmbeddingMatrix of a split using the visual encoder only."""
    from .evaluation import EmbeddingMatrix

    idx = dataset.split(split)
    feats = []
    with ad.no_grad():
        for s in range(0, len(idx), batch_size):
            feats.append(reid_embed(dataset.float_images(idx[s:s + batch_size]), models.encoder).data)
    feats = np.concatenate(feats) if feats else np.zeros((0, models.encoder.cfg.dim))
    return EmbeddingMatrix(feats, np.array([dataset.records[i].pid for i in idx]),
                           np.array([dataset.records[i].cam for i in idx]))


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

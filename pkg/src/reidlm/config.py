"""Strict JSON run configuration.

One document with ``data``, ``model``, ``train``, ``eval`` and ``ablate``
sections plus top-level ``seed`` and ``out``.  Unknown keys are rejected
with a close-match suggestion, wrong types are rejected, and dotted
``--set`` overrides are applied after the file values.
"""

from __future__ import annotations

import difflib
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .evaluation import Protocol
from .models import CausalLMConfig, VisualEncoderConfig
from .synthdata import DataConfig
from .trainer import RECIPES, AugmentConfig, TrainConfig

RECIPE_ALIASES = {"mllmreid": "full", "both": "full"}


class ConfigError(ValueError):
    """Bad config file, override or value (usage error)."""


@dataclass
class DataSection:
    num_train_ids: int = 100
    num_eval_ids: int = 50
    imgs_per_id: int = 8
    cams: int = 4
    seed: int = 0
    domain_style: int = 0
    noise_sigma: float = 0.06
    continuations_file: str | None = None
    root: str | None = None  # load a gen-data directory instead of rendering
    target_domain_style: int = 1
    target_seed: int = 1

    def data_config(self, target: bool = False) -> DataConfig:
        return DataConfig(self.num_train_ids, self.num_eval_ids, self.imgs_per_id, self.cams,
                          self.target_seed if target else self.seed,
                          self.target_domain_style if target else self.domain_style,
                          self.noise_sigma, self.continuations_file)


@dataclass
class EncoderSection:
    patch: int = 8
    dim: int = 64
    layers: int = 2
    heads: int = 4
    tap_point: str = "post_last_layer"
    mlp_ratio: int = 4


@dataclass
class LMSection:
    vocab_size: int = 256
    dim: int = 64
    layers: int = 3
    heads: int = 4
    max_len: int = 160
    mlp_ratio: int = 2


@dataclass
class ModelSection:
    encoder: EncoderSection = field(default_factory=EncoderSection)
    lm: LMSection = field(default_factory=LMSection)
    pooling: str = "mean"


@dataclass
class AugmentSection:
    flip: bool = True
    flip_p: float = 0.5
    crop: bool = True
    pad: int = 4
    erase: bool = True
    erase_p: float = 0.5
    erase_area: list[float] = field(default_factory=lambda: [0.1, 0.3])


@dataclass
class TrainSection:
    recipe: str = "full"
    lam: float = field(default=0.3, metadata={"key": "lambda"})
    P: int = 8
    K: int = 4
    pretrain_epochs: int = 15
    pretrain_lr: float = 3e-4
    reid_epochs: int = 30
    reid_lr: float = 3e-4
    margin: float = 0.3
    triplet_reduction: str = "mean"
    clip_norm: float | None = None
    turns: int = 1
    debug_checks: bool = False
    init: str | None = None  # stage-2 start: checkpoint path, "scratch", or None for <out>/checkpoints
    augment: AugmentSection = field(default_factory=AugmentSection)


@dataclass
class EvalSection:
    metric: str = "euclidean"
    exclude_same_camera: bool = True
    max_rank: int = 50
    rank_lists: bool = True
    checkpoint: str | None = None


@dataclass
class AblateSection:
    seeds: int = 3
    recipes: list[str] = field(default_factory=lambda: list(RECIPES))


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    seed: int = 0
    out: str = "runs/default"

    # -- conversions ---------------------------------------------------------

    def encoder_config(self) -> VisualEncoderConfig:
        return VisualEncoderConfig(**asdict(self.model.encoder))

    def lm_config(self) -> CausalLMConfig:
        return CausalLMConfig(**asdict(self.model.lm))

    def protocol(self) -> Protocol:
        return Protocol(self.eval.metric, self.eval.exclude_same_camera, self.eval.max_rank)

    def _train_common(self) -> dict:
        t = self.train
        aug = asdict(t.augment)
        aug["erase_area"] = tuple(aug["erase_area"])
        return dict(lam=t.lam, P=t.P, K=t.K, seed=self.seed, margin=t.margin,
                    triplet_reduction=t.triplet_reduction, clip_norm=t.clip_norm, turns=t.turns,
                    debug_checks=t.debug_checks, augment=AugmentConfig(**aug))

    def pretrain_config(self, recipe: str | None = None) -> TrainConfig:
        recipe = recipe or self.train.recipe
        stage = "baseline_pretrain" if recipe == "baseline" else "mllmreid_pretrain"
        common = self._train_common()
        if recipe == "baseline":
            common["lam"] = 1.0
        return TrainConfig(stage=stage, recipe=recipe, epochs=self.train.pretrain_epochs,
                           lr=self.train.pretrain_lr, **common)

    def reid_config(self) -> TrainConfig:
        return TrainConfig(stage="reid", recipe=self.train.recipe, epochs=self.train.reid_epochs,
                           lr=self.train.reid_lr, **self._train_common())

    def to_dict(self) -> dict:
        return _dump(self)

    def content_hash(self) -> str:
        return git_blob_hash(canonical_json(self.to_dict()).encode())

    def validate(self) -> "RunConfig":
        try:
            self.train.recipe = RECIPE_ALIASES.get(self.train.recipe, self.train.recipe)
            for r in self.ablate.recipes:
                if RECIPE_ALIASES.get(r, r) not in RECIPES:
                    raise ValueError(f"unknown recipe {r!r} in ablate.recipes")
            self.ablate.recipes = [RECIPE_ALIASES.get(r, r) for r in self.ablate.recipes]
            if self.ablate.seeds < 1:
                raise ValueError("ablate.seeds must be >= 1")
            if len(self.train.augment.erase_area) != 2:
                raise ValueError("train.augment.erase_area needs [low, high]")
            if self.model.pooling not in ("mean", "last"):
                raise ValueError(f"unknown model.pooling {self.model.pooling!r}")
            if self.eval.metric not in ("euclidean", "cosine"):
                raise ValueError(f"unknown eval.metric {self.eval.metric!r}")
            self.data.data_config()
            self.encoder_config()
            self.lm_config()
            self.pretrain_config()
            self.reid_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def resolve_paths(self, base: Path | None = None) -> "RunConfig":
        """Make every path absolute (relative ones against ``base`` or cwd)."""
        base = (base or Path.cwd()).resolve()

        def res(p):
            return None if p in (None, "scratch") else str((base / p).resolve())

        self.out = res(self.out)
        self.data.root = res(self.data.root)
        self.data.continuations_file = res(self.data.continuations_file)
        self.eval.checkpoint = res(self.eval.checkpoint)
        if self.train.init not in (None, "scratch"):
            self.train.init = res(self.train.init)
        return self


# ---------------------------------------------------------------------------
# generic strict (de)serialisation over the section dataclasses


def _key(f) -> str:
    return f.metadata.get("key", f.name)


def _dump(obj):
    if is_dataclass(obj):
        return {_key(f): _dump(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_dump(v) for v in obj]
    return obj


def _type_ok(value, tp) -> bool:
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        return any(_type_ok(value, a) for a in typing.get_args(tp))
    if tp is type(None):
        return value is None
    if tp is bool:
        return isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is str:
        return isinstance(value, str)
    if origin is list:
        (inner,) = typing.get_args(tp)
        return isinstance(value, list) and all(_type_ok(v, inner) for v in value)
    return False


def _type_name(tp) -> str:
    return getattr(tp, "__name__", None) or str(tp).replace("typing.", "")


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    by_key = {_key(f): f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        dotted = f"{path}.{key}" if path else key
        if key not in by_key:
            close = difflib.get_close_matches(key, list(by_key), n=1, cutoff=0.6)
            hint = f"; did you mean '{path + '.' if path else ''}{close[0]}'?" if close else ""
            raise ConfigError(f"unknown key '{dotted}'{hint}")
        f = by_key[key]
        tp = hints[f.name]
        if is_dataclass(tp):
            kwargs[f.name] = _build(tp, value, dotted)
        else:
            if not _type_ok(value, tp):
                raise ConfigError(f"'{dotted}' expects {_type_name(tp)}, got {json.dumps(value)}")
            if tp is float or float in typing.get_args(tp):
                value = float(value) if isinstance(value, int) else value
            kwargs[f.name] = value
    return cls(**kwargs)


def _set_dotted(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set '{dotted}': '{p}' is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``key.path=value``; the value is JSON if it parses, else a plain string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_document(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if not text.strip():
        return {}
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: syntax error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def parse_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    doc = load_document(path)
    for item in overrides or []:
        key, value = parse_override(item)
        _set_dotted(doc, key, value)
    return _build(RunConfig, doc, "").validate()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def git_blob_hash(data: bytes) -> str:
    """sha1 of ``b"blob <len>\\0" + data``, the way git names file contents."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def defaults() -> RunConfig:
    return RunConfig()


__all__ = ["ConfigError", "RunConfig", "parse_config", "parse_override", "canonical_json",
           "git_blob_hash", "defaults", "RECIPE_ALIASES"]

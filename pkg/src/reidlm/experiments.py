"""Two-stage pipeline runs and the four-recipe ablation grid."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field
from typing import Callable

from .evaluation import EvalReport, Protocol, evaluate_model
from .models import CausalLMConfig, ModelSet, VisualEncoderConfig
from .synthdata import Dataset
from .trainer import TrainConfig, init_pretrain_models, train_stage1, train_stage2

# display names of the ablation rows, in table order
RECIPE_LABELS = {
    "baseline": "baseline",
    "common": "+common",
    "syncreid": "+syncreid",
    "full": "+both",
}


@dataclass
class RecipeRun:
    recipe: str
    seed: int
    pretrained: ModelSet
    reid: ModelSet
    pretrain_history: list[dict]
    reid_history: list[dict]
    report: EvalReport


def run_recipe(dataset: Dataset, recipe: str, pre_cfg: TrainConfig, reid_cfg: TrainConfig,
               enc_cfg: VisualEncoderConfig | None = None, lm_cfg: CausalLMConfig | None = None,
               pooling: str = "mean", protocol: Protocol | None = None,
               on_step: Callable[[dict], None] | None = None) -> RecipeRun:
    """Stage 1 with ``recipe``, stage 2 on the resulting encoder, then evaluate."""
    pre_cfg = TrainConfig(**{**pre_cfg.__dict__, "recipe": recipe,
                             "stage": "baseline_pretrain" if recipe == "baseline" else "mllmreid_pretrain",
                             "lam": 1.0 if recipe == "baseline" else pre_cfg.lam})
    models = init_pretrain_models(dataset, pre_cfg, enc_cfg, lm_cfg, pooling)
    models, h1 = train_stage1(models, dataset, pre_cfg, on_step=on_step)
    reid, h2 = train_stage2(models, dataset, reid_cfg, on_step=on_step)
    return RecipeRun(recipe, pre_cfg.seed, models, reid, h1, h2, evaluate_model(reid, dataset, protocol))


@dataclass
class AblationRow:
    recipe: str
    label: str
    map_values: list[float] = field(default_factory=list)
    rank1_values: list[float] = field(default_factory=list)

    @staticmethod
    def _sd(xs: list[float]) -> float:
        return statistics.stdev(xs) if len(xs) > 1 else 0.0

    @property
    def map_mean(self) -> float:
        return statistics.fmean(self.map_values)

    @property
    def map_sd(self) -> float:
        return self._sd(self.map_values)

    @property
    def rank1_mean(self) -> float:
        return statistics.fmean(self.rank1_values)

    @property
    def rank1_sd(self) -> float:
        return self._sd(self.rank1_values)

    def as_dict(self) -> dict:
        return {"recipe": self.recipe, "label": self.label, "n": len(self.map_values),
                "map_mean": self.map_mean, "map_sd": self.map_sd,
                "rank1_mean": self.rank1_mean, "rank1_sd": self.rank1_sd,
                "map": self.map_values, "rank1": self.rank1_values}


def summarize(runs: list[RecipeRun]) -> list[AblationRow]:
    rows = {r: AblationRow(r, RECIPE_LABELS[r]) for r in RECIPE_LABELS}
    for run in runs:
        rows[run.recipe].map_values.append(run.report.mAP)
        rows[run.recipe].rank1_values.append(run.report.rank1)
    return [row for row in rows.values() if row.map_values]


def ablation_tsv(rows: list[AblationRow]) -> str:
    lines = ["recipe\tmap_mean\tmap_sd\trank1_mean\trank1_sd\tn"]
    for r in rows:
        lines.append(f"{r.label}\t{r.map_mean:.6f}\t{r.map_sd:.6f}\t{r.rank1_mean:.6f}\t{r.rank1_sd:.6f}\t"
                     f"{len(r.map_values)}")
    return "\n".join(lines) + "\n"


def run_ablation(dataset: Dataset, seeds: list[int], pre_cfg: TrainConfig, reid_cfg: TrainConfig,
                 recipes: list[str] | None = None, enc_cfg: VisualEncoderConfig | None = None,
                 lm_cfg: CausalLMConfig | None = None, pooling: str = "mean",
                 protocol: Protocol | None = None,
                 on_run: Callable[[RecipeRun], None] | None = None) -> list[RecipeRun]:
    """Every recipe for every training seed on one fixed dataset."""
    runs = []
    for seed in seeds:
        for recipe in recipes or list(RECIPE_LABELS):
            pre = TrainConfig(**{**pre_cfg.__dict__, "seed": seed})
            reid = TrainConfig(**{**reid_cfg.__dict__, "seed": seed})
            run = run_recipe(dataset, recipe, pre, reid, enc_cfg, lm_cfg, pooling, protocol)
            runs.append(run)
            if on_run:
                on_run(run)
    return runs

"""Command-line entry point: ``reidlm <command> [--config F] [--set k=v ...]``.

Exit codes: 0 ok, 1 usage/config error, 2 invariant failure, 3 runtime or
numeric failure.  Every command writes ``<out>/manifest.json`` (also on
failure, with the cause) plus a per-command copy under ``manifests/``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import checkpoint_id, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, canonical_json, git_blob_hash, parse_config
from .evaluation import cross_dataset_eval, embed_split, evaluate, rank_lists
from .synthdata import REFERENCE_STATS, build_dataset, dataset_stats, load_dataset, save_dataset

log = logging.getLogger("reidlm")

COMMANDS = ("gen-data", "pretrain", "train-reid", "eval", "cross-eval", "ablate", "gradcheck", "selftest")
EXIT_OK, EXIT_USAGE, EXIT_INVARIANT, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class InvariantFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for invariant failures here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override applied after the file, e.g. train.lambda=0.5")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--seed", type=int, help="training seed (overrides config 'seed')")
    common.add_argument("--recipe", help="baseline | common | syncreid | full (alias: mllmreid)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="reidlm", description="Synthetic person re-identification with a small multimodal LM.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen-data": "render the synthetic dataset to <out>/dataset",
        "pretrain": "multimodal stage 1 (or the baseline stage) -> checkpoints/pretrain.mlrd",
        "train-reid": "stage 2 identity+triplet training -> checkpoints/reid.mlrd",
        "eval": "held-out query/gallery evaluation -> eval.json",
        "cross-eval": "in-domain vs shifted-domain evaluation -> cross_eval.json",
        "ablate": "four-recipe matrix over N seeds -> ablation.tsv/json/png",
        "gradcheck": "finite-difference checks of every op and loss",
        "selftest": "fast invariant suite (gradients, closed forms, oracles, data contracts)",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name])
        if name in ("ablate", "gradcheck"):
            sp.add_argument("--seeds", type=int, help="number of seeds")
        if name in ("eval", "cross-eval"):
            sp.add_argument("--checkpoint", help="checkpoint to evaluate (default <out>/checkpoints/reid.mlrd)")
    return p


# ---------------------------------------------------------------------------
# helpers


def _write_atomic(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)
    return path


def _write_json(path: Path, obj) -> Path:
    return _write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _file_hash(path: Path) -> str:
    return git_blob_hash(Path(path).read_bytes())


class Run:
    """Book-keeping for one command: artifacts, inputs, timings, metrics."""

    def __init__(self, command: str, argv: list[str], cfg: RunConfig | None):
        self.command, self.argv, self.cfg = command, argv, cfg
        self.out = Path(cfg.out) if cfg else None
        self.artifacts: list[Path] = []
        self.inputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.metrics: dict = {}
        self._t0 = time.perf_counter()

    def add(self, path: Path) -> Path:
        self.artifacts.append(Path(path))
        return path

    def add_input(self, path: Path) -> None:
        path = Path(path)
        if path.is_file():
            self.inputs[str(path)] = _file_hash(path)

    def timed(self, name: str, fn, *a, **kw):
        t = time.perf_counter()
        result = fn(*a, **kw)
        self.timings[name] = round(time.perf_counter() - t, 3)
        return result

    def manifest(self, status: str, code: int, error: BaseException | None) -> dict:
        cfg_doc = self.cfg.to_dict() if self.cfg else None
        arts = {}
        for p in self.artifacts:
            if p.is_file():
                key = str(p.relative_to(self.out)) if self.out and p.is_relative_to(self.out) else str(p)
                arts[key] = _file_hash(p)
        self.timings["total"] = round(time.perf_counter() - self._t0, 3)
        return {
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "exit_code": code,
            "error": None if error is None else {"type": type(error).__name__, "message": str(error)},
            "config": cfg_doc,
            "config_hash": git_blob_hash(canonical_json(cfg_doc).encode()) if cfg_doc else None,
            "input_hashes": self.inputs,
            "artifacts": arts,
            "timings_s": self.timings,
            "metrics": self.metrics,
            "version": __version__,
        }

    def finish(self, status: str, code: int, error: BaseException | None = None) -> None:
        if self.out is None:
            return
        man = self.manifest(status, code, error)
        _write_json(self.out / "manifests" / f"{self.command}.json", man)
        _write_json(self.out / "manifest.json", man)


def _dataset(cfg: RunConfig, run: Run, target: bool = False):
    if cfg.data.root and not target:
        root = Path(cfg.data.root)
        if not (root / "manifest.json").is_file():
            raise UsageError(f"data.root {root} has no manifest.json (run gen-data first)")
        run.add_input(root / "manifest.json")
        return run.timed("load_data", load_dataset, root)
    return run.timed("render_target" if target else "render_data", build_dataset, cfg.data.data_config(target))


def _history_to_jsonl(rows: list[dict], stage: str) -> list[str]:
    return [json.dumps({**r, "stage": stage}, sort_keys=True) for r in rows]


def _write_losses(run: Run, stage: str, history: list[dict]) -> None:
    """``losses.jsonl`` keeps one block per stage; re-running a stage replaces its block."""
    path = run.out / "losses.jsonl"
    keep = []
    if path.is_file():
        keep = [ln for ln in path.read_text(encoding="utf-8").splitlines()
                if ln.strip() and json.loads(ln).get("stage") != stage]
    _write_atomic(path, "\n".join(keep + _history_to_jsonl(history, stage)) + "\n")
    run.add(path)
    from .plots import plot_losses

    run.add(plot_losses(history, run.out / f"losses_{stage}.png"))


def _step_logger(every: int = 25):
    def on_step(row):
        if row["step"] % every == 0:
            log.info("step %d overall=%.4f lm=%s id=%s tri=%s", row["step"], row["overall"],
                     _fmt(row["lm_nll"]), _fmt(row["id_loss"]), _fmt(row["triplet_loss"]))
    return on_step


def _fmt(v):
    return "-" if v is None else f"{v:.4f}"


def _checkpoint_arg(cfg: RunConfig, args) -> Path:
    path = Path(args.checkpoint).resolve() if getattr(args, "checkpoint", None) else (
        Path(cfg.eval.checkpoint) if cfg.eval.checkpoint else Path(cfg.out) / "checkpoints" / "reid.mlrd")
    if not path.is_file():
        raise UsageError(f"checkpoint {path} not found (train-reid first or pass --checkpoint)")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args, run: Run) -> None:
    ds = _dataset(cfg, run)
    root = run.out / "dataset"
    man = run.timed("write_data", save_dataset, ds, root)
    run.add(man)
    stats = dataset_stats(ds)
    lines = ["dataset\tID_q\tID_g\tID_t\tIMG_q\tIMG_g\tIMG_t\tCAM_n"]
    s = stats.as_dict()
    lines.append("synthetic\t" + "\t".join(str(s[k]) for k in ("ID_q", "ID_g", "ID_t", "IMG_q", "IMG_g",
                                                              "IMG_t", "CAM_n")))
    for name, ref in REFERENCE_STATS.items():
        lines.append(name + "\t" + "\t".join(str(ref[k]) for k in ("ID_q", "ID_g", "ID_t", "IMG_q", "IMG_g",
                                                                  "IMG_t", "CAM_n")))
    run.add(_write_atomic(run.out / "dataset_stats.tsv", "\n".join(lines) + "\n"))
    run.metrics["stats"] = s
    print(f"wrote {len(ds.records)} images to {root}")


def cmd_pretrain(cfg: RunConfig, args, run: Run) -> None:
    from .trainer import init_pretrain_models, train_stage1

    ds = _dataset(cfg, run)
    tcfg = cfg.pretrain_config()
    models = init_pretrain_models(ds, tcfg, cfg.encoder_config(), cfg.lm_config(), cfg.model.pooling)
    models, hist = run.timed("train", train_stage1, models, ds, tcfg, on_step=_step_logger())
    ck = run.add(save_checkpoint(models, run.out / "checkpoints" / "pretrain.mlrd"))
    _write_losses(run, "pretrain", hist)
    tail = hist[-min(10, len(hist)):]
    run.metrics.update({"recipe": tcfg.recipe, "steps": len(hist), "lambda": hist[0]["lambda"],
                        "final_lm_nll": float(np.mean([r["lm_nll"] for r in tail])),
                        "checkpoint_id": checkpoint_id(ck)})
    print(f"pretrain ({tcfg.recipe}) {len(hist)} steps, final lm_nll {run.metrics['final_lm_nll']:.4f} -> {ck}")


def cmd_train_reid(cfg: RunConfig, args, run: Run) -> None:
    from .trainer import train_stage2

    ds = _dataset(cfg, run)
    init = cfg.train.init
    if init == "scratch":
        source = None
    else:
        path = Path(init) if init else run.out / "checkpoints" / "pretrain.mlrd"
        if not path.is_file():
            raise UsageError(f"stage-2 init checkpoint {path} not found; run pretrain or set train.init=scratch")
        run.add_input(path)
        source = load_checkpoint(path)
    models, hist = run.timed("train", train_stage2, source, ds, cfg.reid_config(), on_step=_step_logger(),
                             enc_cfg=cfg.encoder_config())
    ck = run.add(save_checkpoint(models, run.out / "checkpoints" / "reid.mlrd"))
    _write_losses(run, "reid", hist)
    tail = hist[-min(10, len(hist)):]
    run.metrics.update({"steps": len(hist), "init": init or "pretrain",
                        "final_overall": float(np.mean([r["overall"] for r in tail])),
                        "checkpoint_id": checkpoint_id(ck)})
    print(f"train-reid {len(hist)} steps -> {ck}")


def cmd_eval(cfg: RunConfig, args, run: Run) -> None:
    from .plots import plot_cmc

    path = _checkpoint_arg(cfg, args)
    run.add_input(path)
    models = load_checkpoint(path)
    ds = _dataset(cfg, run)
    q, g = embed_split(models, ds, "query"), embed_split(models, ds, "gallery")
    report = run.timed("evaluate", evaluate, q, g, cfg.protocol())
    ckid = checkpoint_id(path)
    run.add(_write_json(run.out / "eval.json", report.to_json(ckid)))
    run.add(_write_atomic(run.out / "cmc.tsv", "rank\tcmc\n" + "".join(
        f"{k}\t{v:.6f}\n" for k, v in enumerate(report.cmc, start=1))))
    run.add(plot_cmc({"query vs gallery": report.cmc}, run.out / "cmc.png"))
    if cfg.eval.rank_lists:
        run.add(_write_atomic(run.out / "rank_lists.txt", rank_lists(q, g, cfg.protocol())))
    run.metrics.update({"map": report.mAP, "rank1": report.rank1, "checkpoint_id": ckid})
    print(f"mAP {100 * report.mAP:.2f}  R1 {100 * report.rank1:.2f}  ({report.num_valid_queries} queries)")


def cmd_cross_eval(cfg: RunConfig, args, run: Run) -> None:
    from .plots import plot_cmc, plot_cross

    path = _checkpoint_arg(cfg, args)
    run.add_input(path)
    models = load_checkpoint(path)
    src, tgt = _dataset(cfg, run), _dataset(cfg, run, target=True)
    rep = run.timed("evaluate", cross_dataset_eval, models, src, tgt, cfg.protocol())
    rep.source_name = f"source (style {src.config.domain_style})"
    rep.target_name = f"target (style {tgt.config.domain_style}, seed {tgt.config.seed})"
    ckid = checkpoint_id(path)
    run.add(_write_json(run.out / "cross_eval.json", rep.to_json(ckid)))
    run.add(_write_atomic(run.out / "cross_eval.tsv", "eval_on\tmap\trank1\n" + "".join(
        f"{r['eval_on']}\t{r['map']:.6f}\t{r['rank1']:.6f}\n" for r in rep.rows())))
    run.add(plot_cross(rep.rows(), run.out / "cross_eval.png"))
    run.add(plot_cmc({rep.source_name: rep.source.cmc, rep.target_name: rep.target.cmc},
                     run.out / "cross_eval_cmc.png"))
    run.metrics.update({"rows": rep.rows(), "checkpoint_id": ckid})
    for r in rep.rows():
        print(f"{r['eval_on']}: mAP {100 * r['map']:.2f}  R1 {100 * r['rank1']:.2f}")


def cmd_ablate(cfg: RunConfig, args, run: Run) -> None:
    from .experiments import ablation_tsv, run_ablation, summarize
    from .plots import plot_ablation
    from .trainer import write_history

    n = args.seeds if args.seeds is not None else cfg.ablate.seeds
    if n < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = list(range(cfg.seed, cfg.seed + n))
    ds = _dataset(cfg, run)
    per_run = []

    def on_run(r):
        tag = f"{r.recipe}_s{r.seed}"
        run.add(save_checkpoint(r.reid, run.out / "checkpoints" / "ablate" / f"{tag}.mlrd"))
        write_history([{**h, "stage": "pretrain"} for h in r.pretrain_history]
                      + [{**h, "stage": "reid"} for h in r.reid_history], run.out / "ablate" / f"{tag}.jsonl")
        per_run.append({"recipe": r.recipe, "seed": r.seed, "map": r.report.mAP, "rank1": r.report.rank1})
        log.info("%s seed %d: mAP %.4f R1 %.4f", r.recipe, r.seed, r.report.mAP, r.report.rank1)

    (run.out / "ablate").mkdir(parents=True, exist_ok=True)
    runs = run.timed("ablate", run_ablation, ds, seeds, cfg.pretrain_config(), cfg.reid_config(),
                     cfg.ablate.recipes, cfg.encoder_config(), cfg.lm_config(), cfg.model.pooling,
                     cfg.protocol(), on_run)
    rows = summarize(runs)
    table = [r.as_dict() for r in rows]
    run.add(_write_json(run.out / "ablation.json", {"seeds": seeds, "rows": table, "runs": per_run}))
    tsv = ablation_tsv(rows)
    run.add(_write_atomic(run.out / "ablation.tsv", tsv))
    run.add(plot_ablation(table, run.out / "ablation.png"))
    run.metrics["ablation"] = [{k: r[k] for k in ("label", "map_mean", "map_sd", "rank1_mean", "rank1_sd")}
                               for r in table]
    for r in rows:
        print(f"{r.label:10s} mAP {100 * r.map_mean:.2f} ± {100 * r.map_sd:.2f}   "
              f"R1 {100 * r.rank1_mean:.2f} ± {100 * r.rank1_sd:.2f}")


def _report_checks(results, run: Run, name: str) -> None:
    lines = []
    for r in results:
        print(r.line())
        lines.append(f"{r.name}\t{'pass' if r.passed else 'fail'}\t{r.value}\t{r.threshold}")
    run.add(_write_atomic(run.out / f"{name}.tsv", "check\tstatus\tvalue\tthreshold\n" + "\n".join(lines) + "\n"))
    failed = [r.name for r in results if not r.passed]
    run.metrics.update({"checks": len(results), "failed": failed})
    if failed:
        raise InvariantFailure("failed: " + "; ".join(failed))


def cmd_gradcheck(cfg: RunConfig, args, run: Run) -> None:
    from .checks import run_gradchecks

    seeds = args.seeds if args.seeds is not None else 10
    _report_checks(run.timed("gradcheck", run_gradchecks, seeds=seeds), run, "gradcheck")


def cmd_selftest(cfg: RunConfig, args, run: Run) -> None:
    from .checks import selftest

    _report_checks(run.timed("selftest", selftest), run, "selftest")


HANDLERS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train-reid": cmd_train_reid,
            "eval": cmd_eval, "cross-eval": cmd_cross_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "selftest": cmd_selftest}


def _load_config(args) -> RunConfig:
    overrides = list(args.set)
    if args.out is not None:
        overrides.append(f"out={json.dumps(args.out)}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.recipe is not None:
        overrides.append(f"train.recipe={json.dumps(args.recipe)}")
    return parse_config(args.config, overrides).resolve_paths()


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        if args.out is not None:
            # no valid config to echo, but the failure is still recorded
            run = Run(args.command, argv, None)
            run.out = Path(args.out).resolve()
            run.finish("usage_error", EXIT_USAGE, exc)
        return EXIT_USAGE
    run = Run(args.command, argv, cfg)
    error: BaseException | None = None
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        HANDLERS[args.command](cfg, args, run)
    except (UsageError, ConfigError) as exc:
        code, status, error = EXIT_USAGE, "usage_error", exc
        print(f"error: {exc}", file=sys.stderr)
    except (InvariantFailure, AssertionError) as exc:
        code, status, error = EXIT_INVARIANT, "invariant_failure", exc
        print(f"invariant failure: {exc}", file=sys.stderr)
    except Exception as exc:  # numeric, IO, corrupt inputs, anything unexpected
        code, status, error = EXIT_RUNTIME, "runtime_error", exc
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
    else:
        run.finish("ok", EXIT_OK)
        return EXIT_OK
    try:
        run.finish(status, code, error)
    except OSError:
        pass
    return code


if __name__ == "__main__":
    sys.exit(main())

import json
from pathlib import Path

import pytest

from reidlm import checks
from reidlm.checks import CheckResult
from reidlm.cli import main
from reidlm.config import ConfigError, RunConfig, git_blob_hash, parse_config, parse_override

ROOT = Path(__file__).resolve().parents[1]
SMOKE = str(ROOT / "configs" / "smoke.json")


# ---------------------------------------------------------------------------
# config parsing


def test_empty_file_gives_defaults(tmp_path):
    f = tmp_path / "empty.json"
    f.write_text("")
    assert parse_config(f).to_dict() == RunConfig().to_dict()
    assert parse_config(None).to_dict() == RunConfig().to_dict()


def test_default_values():
    c = RunConfig()
    assert c.train.lam == 0.3 and (c.train.P, c.train.K) == (8, 4)
    assert (c.train.pretrain_epochs, c.train.reid_epochs) == (15, 30)
    assert c.train.pretrain_lr == c.train.reid_lr == 3e-4
    assert c.to_dict()["train"]["lambda"] == 0.3


def test_override_supersedes_file(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"train": {"lambda": 0.1, "P": 4}}))
    c = parse_config(f, ["train.lambda=0.5"])
    assert c.train.lam == 0.5 and c.train.P == 4
    assert c.pretrain_config().lam == 0.5


def test_unknown_key_suggestion(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"train": {"lamda": 0.5}}))
    with pytest.raises(ConfigError, match="unknown key 'train.lamda'; did you mean 'train.lambda'"):
        parse_config(f)
    with pytest.raises(ConfigError, match="did you mean 'train.lambda'"):
        parse_config(None, ["train.lamda=0.5"])
    with pytest.raises(ConfigError, match="unknown key 'zzz'"):
        parse_config(None, ["zzz=1"])


def test_syntax_error_line_number(tmp_path):
    f = tmp_path / "bad.json"
    f.write_text('{\n  "train": {\n    "P": 4,\n  }\n}\n')
    with pytest.raises(ConfigError, match="line 4"):
        parse_config(f)


def test_type_and_range_errors():
    with pytest.raises(ConfigError, match="'train.P' expects int"):
        parse_config(None, ['train.P="eight"'])
    with pytest.raises(ConfigError, match="lambda"):
        parse_config(None, ["train.lambda=1.5"])
    with pytest.raises(ConfigError):
        parse_config(None, ["train.recipe=unknown"])
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


def test_override_value_parsing():
    assert parse_override("a.b=3") == ("a.b", 3)
    assert parse_override("a=full") == ("a", "full")
    assert parse_override('a=[1, 2]') == ("a", [1, 2])


def test_recipe_aliases():
    assert parse_config(None, ["train.recipe=mllmreid"]).train.recipe == "full"
    assert parse_config(None, ["train.recipe=both"]).train.recipe == "full"
    base = parse_config(None, ["train.recipe=baseline"])
    assert base.pretrain_config().lam == 1.0 and base.pretrain_config().stage == "baseline_pretrain"


def test_resolve_paths(tmp_path):
    c = parse_config(None, ["out=rel/dir"]).resolve_paths(tmp_path)
    assert c.out == str(tmp_path / "rel" / "dir")


def test_git_blob_hash():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"


# ---------------------------------------------------------------------------
# command line


def _manifest(out):
    return json.loads((Path(out) / "manifest.json").read_text())


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["no-such-command"])
    assert e.value.code == 1
    out = tmp_path / "o"
    assert main(["eval", "--config", SMOKE, "--set", "train.lamda=0.5", "--out", str(out)]) == 1
    assert "did you mean 'train.lambda'" in capsys.readouterr().err
    man = _manifest(out)
    assert man["status"] == "usage_error" and man["exit_code"] == 1 and "lamda" in man["error"]["message"]


def test_missing_checkpoint_is_usage_error(tmp_path):
    out = tmp_path / "o"
    assert main(["eval", "--config", SMOKE, "--out", str(out)]) == 1
    assert "not found" in _manifest(out)["error"]["message"]


def test_invariant_failure_exit_2(tmp_path, monkeypatch):
    monkeypatch.setattr(checks, "run_gradchecks",
                        lambda **kw: [CheckResult("op:fake", False, 1.0, 1e-4)])
    out = tmp_path / "o"
    assert main(["gradcheck", "--out", str(out)]) == 2
    man = _manifest(out)
    assert man["status"] == "invariant_failure" and "op:fake" in man["error"]["message"]
    assert (out / "gradcheck.tsv").read_text().splitlines()[1].startswith("op:fake\tfail")


def test_runtime_failure_exit_3(tmp_path):
    out = tmp_path / "o"
    bad = tmp_path / "bad.mlrd"
    bad.write_bytes(b"not a checkpoint")
    assert main(["eval", "--config", SMOKE, "--out", str(out), "--checkpoint", str(bad)]) == 3
    assert _manifest(out)["error"]["type"] == "CheckpointError"


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    codes = [main(["gen-data", "--config", SMOKE, "--out", str(out)]),
             main(["pretrain", "--config", SMOKE, "--out", str(out), "--recipe", "mllmreid",
                   "--set", f"data.root={json.dumps(str(out / 'dataset'))}"]),
             main(["train-reid", "--config", SMOKE, "--out", str(out),
                   "--set", f"data.root={json.dumps(str(out / 'dataset'))}"]),
             main(["eval", "--config", SMOKE, "--out", str(out),
                   "--set", f"data.root={json.dumps(str(out / 'dataset'))}"])]
    return out, codes


def test_smoke_chain(smoke_run):
    out, codes = smoke_run
    assert codes == [0, 0, 0, 0]
    for name in ("manifest.json", "losses.jsonl", "eval.json", "cmc.tsv", "cmc.png", "rank_lists.txt",
                 "checkpoints/pretrain.mlrd", "checkpoints/reid.mlrd", "dataset/manifest.json",
                 "dataset_stats.tsv", "losses_pretrain.png", "losses_reid.png"):
        assert (out / name).is_file(), name
    stages = [json.loads(ln)["stage"] for ln in (out / "losses.jsonl").read_text().splitlines()]
    assert set(stages) == {"pretrain", "reid"}
    assert stages == sorted(stages, key=["pretrain", "reid"].index)
    rep = json.loads((out / "eval.json").read_text())
    assert {"rank1", "map", "cmc", "num_valid_queries", "protocol", "checkpoint_id"} <= set(rep)
    man = _manifest(out)
    assert man["status"] == "ok" and man["config"]["train"]["recipe"] == "full"
    assert "eval.json" in man["artifacts"] and man["metrics"]["map"] == rep["map"]
    for cmd in ("gen-data", "pretrain", "train-reid", "eval"):
        assert (out / "manifests" / f"{cmd}.json").is_file()


def test_manifest_config_reruns_identically(smoke_run, tmp_path):
    out, _ = smoke_run
    cfg = json.loads((out / "manifests" / "train-reid.json").read_text())["config"]
    cfg["out"] = str(tmp_path / "again")
    f = tmp_path / "echo.json"
    f.write_text(json.dumps(cfg))
    (tmp_path / "again" / "checkpoints").mkdir(parents=True)
    (tmp_path / "again" / "checkpoints" / "pretrain.mlrd").write_bytes(
        (out / "checkpoints" / "pretrain.mlrd").read_bytes())
    assert main(["train-reid", "--config", str(f)]) == 0
    assert main(["eval", "--config", str(f)]) == 0
    assert (tmp_path / "again" / "eval.json").read_bytes() == (out / "eval.json").read_bytes()


def test_cross_eval_outputs(smoke_run):
    out, _ = smoke_run
    assert main(["cross-eval", "--config", SMOKE, "--out", str(out)]) == 0
    rep = json.loads((out / "cross_eval.json").read_text())
    assert len(rep["rows"]) == 2 and {"source", "target"} <= set(rep)
    assert (out / "cross_eval.png").is_file() and (out / "cross_eval.tsv").is_file()


def test_ablate_four_rows(tmp_path):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", SMOKE, "--out", str(out), "--seeds", "1"]) == 0
    rep = json.loads((out / "ablation.json").read_text())
    assert [r["label"] for r in rep["rows"]] == ["baseline", "+common", "+syncreid", "+both"]
    assert all({"map_mean", "map_sd", "rank1_mean", "rank1_sd"} <= set(r) for r in rep["rows"])
    assert len((out / "ablation.tsv").read_text().splitlines()) == 5
    assert len(list((out / "checkpoints" / "ablate").glob("*.mlrd"))) == 4

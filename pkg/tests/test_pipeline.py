import json
import shutil
from pathlib import Path

import pytest

from knpl.cli import main as cli
from knpl.config import PipelineConfig
from knpl.errors import StageError, StaleCacheError
from knpl.pipeline import STAGES, RunDir, read_jsonl, run_pipeline, run_stage
from knpl.report import verify

SMALL = Path(__file__).parent / "fixtures" / "small.ini"


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = PipelineConfig.load(SMALL)
    status = run_pipeline(root, cfg)
    assert set(status.values()) == {"ran"}
    return root, cfg


def test_every_stage_stamped(small_run):
    root, cfg = small_run
    run = RunDir(root)
    for stage in STAGES:
        assert run.stamp(stage) is not None, stage
    events = read_jsonl(root / "logs" / "events.jsonl")
    assert [e["stage"] for e in events] == list(STAGES)


def test_verify_clean(small_run):
    root, cfg = small_run
    assert verify(root, cfg) == []


def test_second_run_is_cached(small_run):
    root, cfg = small_run
    before = tree_bytes(root)
    status = run_pipeline(root, cfg)
    assert set(status.values()) == {"cached"}
    assert tree_bytes(root) == before


def test_filtered_instances_never_reach_later_stages(small_run):
    root, _ = small_run
    kept = set(json.loads((root / "filter" / "partitions.json").read_text())["kept"])
    facts = read_jsonl(root / "filter" / "facts.jsonl")
    known = {f["fact"] for f in facts if f["known"]}
    for stage, name in (("intervene", "interventions.jsonl"), ("shortcut", "classes.jsonl"),
                        ("conflict", "conflict.jsonl"), ("score", "two_hop.jsonl")):
        ids = {r["id"] for r in read_jsonl(root / stage / name)}
        assert ids <= kept, stage
    for r in read_jsonl(root / "locate" / "kn_sets.jsonl"):
        assert r["fact"] in known


def test_config_change_invalidates_dependants(small_run, tmp_path):
    root, cfg = small_run
    copy = tmp_path / "run"
    shutil.copytree(root, copy)
    changed = PipelineConfig.from_text(SMALL.read_text() + "tau = 0.8\n")
    assert changed.digest(["world", "train"]) == cfg.digest(["world", "train"])
    with pytest.raises(StaleCacheError):
        run_pipeline(copy, changed)
    run = RunDir(copy)
    assert run_stage(run, changed, "filter") == "cached"
    with pytest.raises(StaleCacheError):
        run_stage(run, changed, "score")
    with pytest.raises(StaleCacheError):
        run_stage(run, changed, "shortcut")


def test_refresh_recomputes_identically(small_run, tmp_path):
    root, cfg = small_run
    copy = tmp_path / "run"
    shutil.copytree(root, copy)
    status = run_pipeline(copy, cfg, refresh=True, jobs=2)
    assert set(status.values()) == {"ran"}
    a, b = tree_bytes(root), tree_bytes(copy)
    assert a.keys() == b.keys()
    events = "logs/events.jsonl"
    for k in a:
        if k != events:
            assert a[k] == b[k], k
    # the refresh appends an identical second round of events
    assert b[events] == a[events] * 2


def test_missing_upstream_is_a_stage_error(tmp_path):
    with pytest.raises(StageError) as e:
        run_stage(RunDir(tmp_path), PipelineConfig.load(SMALL), "locate")
    assert "locate" in str(e.value)


def test_verify_detects_tampering(small_run, tmp_path):
    root, cfg = small_run
    copy = tmp_path / "run"
    shutil.copytree(root, copy)
    path = copy / "report" / "report.json"
    rep = json.loads(path.read_text())
    rep["filter"]["n_kept"] += 1
    path.write_text(json.dumps(rep, sort_keys=True, indent=1) + "\n")
    problems = verify(copy, cfg)
    assert any("n_kept" in p for p in problems)


def test_report_text_is_delimited(small_run):
    root, _ = small_run
    text = (root / "report" / "report.txt").read_text()
    sections = [line for line in text.splitlines() if line.startswith("=== ")]
    assert "=== interventions ===" in sections and "=== shortcut ===" in sections
    figs = {p.name for p in (root / "report" / "figures").iterdir()}
    assert "kn_scores.svg" in figs and "activations_no_cot.ppm" in figs


def test_cli_commands(small_run, tmp_path, capsys, monkeypatch):
    root, _ = small_run
    assert cli(["--config", str(SMALL), "--run-dir", str(root), "verify"]) == 0
    assert "verify\tok\t0 discrepancies" in capsys.readouterr().out
    assert cli(["--run-dir", str(root), "verify"]) == 0
    assert cli(["--config", str(SMALL), "config"]) == 0
    assert "[attribution]" in capsys.readouterr().out
    monkeypatch.setenv("KNPL_RUN_DIR", str(root))
    assert cli(["--config", str(SMALL), "report"]) == 0
    assert capsys.readouterr().out.strip() == "report\tcached"
    assert cli(["--config", str(SMALL), "--run-dir", str(tmp_path / "empty"), "score"]) == 1
    assert "upstream" in capsys.readouterr().err
    assert cli([]) == 2

from __future__ import annotations

import json
import math
import warnings
from dataclasses import replace

import pytest

from imitlab import cli, envs, harness
from imitlab.active import ActiveLearningConfig
from imitlab.harness import ExperimentConfig, ExperimentReport, SeedResult, compare
from imitlab.models import TrainConfig


def _tiny(method="PL", **kw) -> ExperimentConfig:
    t = TrainConfig()
    t = replace(t, policy=replace(t.policy, epochs=5), dynamics=replace(t.dynamics, epochs=5), dae=replace(t.dae, epochs=5))
    base = dict(
        env_kind=envs.POINT_REACH,
        method=method,
        active=ActiveLearningConfig(n_total=4, active_ratio=0.5, retrain_every=1),
        train=t,
        test_set_size=5,
        n_seeds=1,
    )
    base.update(kw)
    return ExperimentConfig(**base)


def _report(counts, method="X", digest="d") -> ExperimentReport:
    cfg = {"method": method, "controller": "bc_only"}
    return ExperimentReport(cfg, [SeedResult(i, c, 10, digest) for i, c in enumerate(counts)])


def test_smoke_run_persists_report(tmp_path):
    cfg = _tiny("AL", output_path=str(tmp_path / "al"))
    rep = harness.run_experiment(cfg)
    assert (tmp_path / "al" / "report.json").exists()
    back = ExperimentReport.load(tmp_path / "al")
    assert back.to_dict() == json.loads(json.dumps(rep.to_dict()))
    s = back.seeds[0]
    assert s.error is None and 0 <= s.successes <= 5 and s.n_demos == 4
    lines = (tmp_path / "al" / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == list(harness.METRIC_FIELDS) and len(lines) == 2


def test_rerun_is_byte_identical(tmp_path):
    a = harness.run_experiment(_tiny("rand_on_policy", output_path=str(tmp_path / "a")))
    b = harness.run_experiment(_tiny("rand_on_policy", output_path=str(tmp_path / "b")))
    assert a.metrics_csv() == b.metrics_csv()
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()


def test_methods_share_test_sets():
    pl = harness.run_experiment(_tiny("PL"), save=False)
    dart = harness.run_experiment(_tiny("DART"), save=False)
    assert pl.seeds[0].test_digest == dart.seeds[0].test_digest
    assert compare(pl, dart).n_seeds == 1


def test_monitor_in_experiment():
    rep = harness.run_experiment(_tiny("PL", monitor=harness.MonitorSettings(True, 3)), save=False)
    f = rep.seeds[0].failure
    assert f is not None and 0.0 <= f["f1"] <= 1.0


def test_seed_derivation_is_purpose_specific():
    seeds = {harness.derive_seed(0, i, p) for i in range(5) for p in harness.PURPOSES}
    assert len(seeds) == 5 * len(harness.PURPOSES)
    assert harness.derive_seed(3, 2, "test") == harness.derive_seed(3, 2, "test")
    with pytest.raises(ValueError):
        harness.derive_seed(0, 0, "other")


def test_compare_identical_all_ties():
    r = _report([3, 5, 5, 1])
    t = compare(r, r)
    assert (t.wins, t.losses, t.ties) == (0, 0, 4)
    assert math.isnan(t.win_pct)


def test_compare_seven_three():
    t = compare(_report([5] * 7 + [1] * 3, "A"), _report([4] * 7 + [2] * 3, "B"))
    assert (t.wins, t.losses) == (7, 3)
    assert t.win_pct == 70.0
    assert t.summary().startswith("A 70% - B 30%")


def test_compare_rejects_mismatch():
    a = _report([1, 2])
    b = ExperimentReport(a.config, [SeedResult(5, 1, 10, "d"), SeedResult(6, 1, 10, "d")])
    with pytest.raises(ValueError):
        compare(a, b)
    with pytest.raises(ValueError):
        compare(a, _report([1, 2], digest="other"))


def test_config_round_trip(tmp_path):
    cfg = _tiny("AL")
    p = tmp_path / "cfg.json"
    p.write_text(cfg.dumps())
    assert ExperimentConfig.load(p) == cfg
    d = cfg.to_dict()
    d["schema_version"] = 99
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict(d)
    with pytest.raises(ValueError):
        ExperimentConfig(method="BC")


def test_single_gamma_sweep_matches_experiment():
    base = _tiny("AL")
    rows = harness.sweep_gamma(base, [0.5])
    rep = harness.run_experiment(base, save=False)
    assert rows[0]["total_successes"] == sum(rep.success_counts().values())
    assert rows[0]["mean_successes"] == harness._fmt(harness.mean_successes(rep))


def test_gamma_sweep_records_invalid_entry():
    with pytest.warns(UserWarning):
        rows = harness.sweep_gamma(_tiny("AL", active=ActiveLearningConfig(n_total=4, active_ratio=0.5, retrain_every=2)), [0.75])
    assert rows[0]["error"] and rows[0]["mean_successes"] == ""
    with pytest.raises(ValueError):
        harness.sweep_gamma(_tiny("AL"), [])


def test_uthr_dedupe():
    with pytest.raises(ValueError):
        harness._dedupe_mults([])
    with pytest.raises(ValueError):
        harness._dedupe_mults([1.0])
    with pytest.warns(UserWarning):
        assert harness._dedupe_mults([1.5, 2, 1.5]) == [1.5, 2.0]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert harness._dedupe_mults([1.1, 3]) == [1.1, 3.0]


def test_imagination_sweep_rows():
    t = _tiny().train
    rows = harness.sweep_imagination(envs.POINT_REACH, 4, [0, 1, 3], test_set_size=5, train_cfg=t)
    assert [r["rollout_steps"] for r in rows] == [0, 1, 3]
    assert set(harness.IMAGINATION_FIELDS) <= set(rows[0])


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck", "--n", "6"]) == 0


def test_cli_selftest(capsys):
    assert cli.main(["selftest"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_cli_collect_train_eval(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(harness.OUTPUT_ENV, str(tmp_path))
    data = tmp_path / "d.jsonl"
    models = tmp_path / "m.json"
    assert cli.main(["collect", "--env", envs.POINT_REACH, "--n", "3", "--out", str(data)]) == 0
    assert cli.main(["train", str(data), "--out", str(models)]) == 0
    assert cli.main(["eval", str(models), "--env", envs.POINT_REACH, "--test-set-size", "3"]) == 0
    assert '"successes"' in capsys.readouterr().out

import csv
import json

import numpy as np
import pytest

from rlcert.cli import EXIT_CONFIG, EXIT_OK, EXIT_RESOURCE, main, read_result_csv, validate_config, ConfigError
from rlcert.env import GridWorld
from rlcert.qfunc import save, value_iteration


def write(tmp_path, name, cfg):
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps(cfg))
    return str(p)


ACTION = {"mode": "certify-action", "env": {"name": "gridworld"}, "horizon": 5,
          "smoothing": {"sigma": 0.1, "m": 500}}


def test_certify_action_rows(tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", write(tmp_path, "a", ACTION), "--out", str(out)]) == EXIT_OK
    meta, header, rows = read_result_csv(out / "a.csv")
    assert header[:5] == ["sigma", "episode", "t", "action", "radius"]
    assert [int(r[2]) for r in rows] == list(range(5))
    assert meta["schema"] == "action-radius" and "m: 500" in meta["alpha"]
    assert len(meta["config-sha256"]) == 64
    doc = json.loads((out / "a.json").read_text())
    assert doc["config_sha256"] == meta["config-sha256"]


def test_rerun_byte_identical(tmp_path):
    cfg = dict(ACTION, smoothing={"sigma": [0.05, 0.2], "m": 300}, episodes=2)
    path = write(tmp_path, "b", cfg)
    assert main(["run", path, "--out", str(tmp_path / "o1")]) == EXIT_OK
    assert main(["run", path, "--out", str(tmp_path / "o2"), "--jobs", "2"]) == EXIT_OK
    for ext in ("csv", "json"):
        assert (tmp_path / "o1" / f"b.{ext}").read_bytes() == (tmp_path / "o2" / f"b.{ext}").read_bytes()


def test_sigma_nonpositive_rejected(tmp_path, capsys):
    cfg = dict(ACTION, smoothing={"sigma": [0.1, 0.0]})
    code = main(["run", write(tmp_path, "c", cfg), "--out", str(tmp_path / "o")])
    assert code == EXIT_CONFIG
    assert "smoothing.sigma[1]" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("raw, field", [
    ({"mode": "certify-action", "env": {"name": "gridworld"}, "extra": 1}, "unknown key"),
    ({"mode": "certify-action"}, "env: required"),
    ({"mode": "fly", "env": {"name": "gridworld"}}, "mode"),
    ({"mode": "attack", "env": {"name": "gridworld"}, "attack": {"method": "pgd"}}, "attack.method"),
    ({"mode": "attack", "env": {"name": "gridworld"}, "smoothing": {"v_min": 0}}, "v_min/v_max"),
    ({"mode": "attack", "env": {"name": "gridworld"}, "smoothing": {"m": 1.5}}, "smoothing.m"),
])
def test_validation_messages(raw, field):
    with pytest.raises(ConfigError, match=field):
        validate_config(raw)


def test_semantic_config_errors(tmp_path, capsys):
    bad_env = {"mode": "certify-action", "env": {"name": "gridworld", "params": {"colour": 3}}}
    assert main(["run", write(tmp_path, "d", bad_env), "--out", str(tmp_path)]) == EXIT_CONFIG
    pole = {"mode": "certify-action", "env": {"name": "polebalance"}}
    assert main(["run", write(tmp_path, "e", pole), "--out", str(tmp_path)]) == EXIT_CONFIG
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["run", str(tmp_path / "broken.json")]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "env.params" in err and "q.source" in err and "invalid JSON" in err


def test_resource_exit(tmp_path):
    cfg = {"mode": "certify-reward-local", "env": {"name": "toyfreeway"},
           "smoothing": {"sigma": 0.1, "exact": True}, "local": {"max_nodes": 5}}
    assert main(["run", write(tmp_path, "f", cfg), "--out", str(tmp_path / "o")]) == EXIT_RESOURCE


def test_weights_source_and_env_var(tmp_path, monkeypatch):
    env = GridWorld(5)
    save(value_iteration(env.tabular_model(), 0.9), tmp_path / "q.jsonl")
    cfg = dict(ACTION, q={"source": "weights", "path": str(tmp_path / "q.jsonl")})
    monkeypatch.setenv("RLCERT_OUT", str(tmp_path / "envout"))
    assert main(["run", write(tmp_path, "g", cfg)]) == EXIT_OK
    assert main(["run", write(tmp_path, "h", ACTION), "--out", str(tmp_path / "envout")]) == EXIT_OK
    a = read_result_csv(tmp_path / "envout" / "g.csv")[2]
    b = read_result_csv(tmp_path / "envout" / "h.csv")[2]
    assert a == b


def test_seed_override_changes_provenance(tmp_path):
    path = write(tmp_path, "s", ACTION)
    main(["run", path, "--out", str(tmp_path / "o1")])
    main(["run", path, "--out", str(tmp_path / "o2"), "--seed", "4"])
    m1 = read_result_csv(tmp_path / "o1" / "s.csv")[0]
    m2 = read_result_csv(tmp_path / "o2" / "s.csv")[0]
    assert m1["config-sha256"] != m2["config-sha256"] and "smoothing=4" in m2["seeds"]


@pytest.mark.parametrize("mode, extra", [
    ("certify-reward-global", {"global": {"epsilon": [0.0, 0.1]}}),
    ("certify-reward-local", {"local": {"eps_max": 0.2}}),
    ("attack", {"attack": {"epsilon": [0.0, 0.1], "trials": 4}}),
])
def test_other_modes_run(tmp_path, mode, extra):
    cfg = {"mode": mode, "env": {"name": "toyfreeway"}, "horizon": 6,
           "smoothing": {"sigma": 0.2, "m": 200}, **extra}
    assert main(["run", write(tmp_path, "m", cfg), "--out", str(tmp_path)]) == EXIT_OK
    meta, header, rows = read_result_csv(tmp_path / "m.csv")
    assert rows and header[0] == "sigma"


def test_report_families(tmp_path, capsys):
    res = tmp_path / "res"
    sweep = dict(ACTION, smoothing={"sigma": [0.05, 0.1], "m": 300})
    main(["run", write(tmp_path, "sweep", sweep), "--out", str(res)])
    local = {"mode": "certify-reward-local", "env": {"name": "toyfreeway"}, "horizon": 6,
             "smoothing": {"sigma": 0.2, "exact": True}}
    main(["run", write(tmp_path, "local", local), "--out", str(res)])
    assert main(["report", str(res)]) == EXIT_OK
    with open(res / "report" / "radius_vs_step.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["sigma"] for r in rows} == {"0.05", "0.1"} and {r["run"] for r in rows} == {"sweep"}
    with open(res / "report" / "reward_vs_eps.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["series"] for r in rows} == {"local"} and rows[0]["epsilon"] == "0.0"
    with open(res / "report" / "certified_ratio.csv") as fh:
        ratio = list(csv.DictReader(fh))
    first = [r for r in ratio if r["sigma"] == "0.05"][0]
    assert first["radius_threshold"] == "0.0" and first["certified_ratio"] == "1.0"


def test_report_errors(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty")]) == EXIT_CONFIG
    assert "empty input" in capsys.readouterr().err
    mixed = tmp_path / "mixed"
    main(["run", write(tmp_path, "grid", ACTION), "--out", str(mixed)])
    fw = {"mode": "certify-action", "env": {"name": "toyfreeway"}, "horizon": 3, "smoothing": {"m": 100}}
    main(["run", write(tmp_path, "fw", fw), "--out", str(mixed)])
    assert main(["report", str(mixed)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "fw.csv" in err and "grid.csv" in err
    (tmp_path / "junk").mkdir()
    (tmp_path / "junk" / "x.csv").write_text("a,b\n1,2\n")
    assert main(["report", str(tmp_path / "junk")]) == EXIT_CONFIG

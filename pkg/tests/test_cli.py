import json

import pytest

from seaflow.access import Principal, PrincipalStore, Role
from seaflow.cli import main


def test_scenarios_verb(capsys):
    assert main(["scenarios"]) == 0
    assert "combined.json" in capsys.readouterr().out.split()


def test_run_text_and_outputs(tmp_path, capsys):
    metrics = tmp_path / "metrics.txt"
    report_json = tmp_path / "report.json"
    code = main(["run", "--config", "org7", "--duration", "7200", "--seed", "3",
                 "--metrics-out", str(metrics), "--report-json", str(report_json)])
    assert code == 0
    out = capsys.readouterr().out
    assert out.startswith("scenario org7 seed=3 duration_s=7200")
    assert "# TYPE" in metrics.read_text()
    assert json.loads(report_json.read_text())["seed"] == 3


def test_config_error_exit_code(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.json")]) == 1
    assert "config error" in capsys.readouterr().err


def test_slo_breach_exit_code(tmp_path, capsys):
    from importlib import resources

    data = json.loads((resources.files("seaflow") / "scenarios" / "org7.json").read_text())
    data["slo"] = [{"name": "impossible", "metric": "delivery_latency_seconds",
                    "aggregation": "p95", "op": "<=", "threshold": 0.001, "window_s": 86400}]
    path = tmp_path / "strict.json"
    path.write_text(json.dumps(data))
    assert main(["run", "--config", str(path), "--duration", "7200"]) == 0
    assert main(["run", "--config", str(path), "--duration", "7200", "--fail-on-slo"]) == 2
    assert "impossible" in capsys.readouterr().err


def test_token_and_query(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SEAFLOW_SECRET", "cli-test-secret")
    principals = tmp_path / "principals.json"
    store = PrincipalStore()
    store.add(Principal("reader", "ext", frozenset({Role.CONSUMER})))
    store.dump(principals)
    journal = tmp_path / "journal.jsonl"
    assert main(["run", "--config", "combined", "--duration", "7200", "--journal", str(journal)]) == 0
    capsys.readouterr()

    assert main(["token", "--principals", str(principals), "--principal", "reader",
                 "--grant", "query_pull:@open_access"]) == 0
    token = capsys.readouterr().out.strip()
    base = ["query", "--journal", str(journal), "--principals", str(principals), "--token", token]
    assert main(base) == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert rows and {r["category"] for r in rows} == {"open_access"}
    assert main(base + ["--category", "legally_restricted"]) == 3
    assert main(base[:-1] + ["forged"]) == 3
    assert main(["token", "--principals", str(principals), "--principal", "reader",
                 "--grant", "publish:data/#"]) == 3


def test_token_requires_secret(tmp_path, monkeypatch, capsys):
    monkeypatch.delenv("SEAFLOW_SECRET", raising=False)
    principals = tmp_path / "p.json"
    PrincipalStore().dump(principals)
    assert main(["token", "--principals", str(principals), "--principal", "x",
                 "--grant", "subscribe:data/#"]) == 3
    assert "SEAFLOW_SECRET" in capsys.readouterr().err


def test_bad_grant_syntax_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["token", "--principals", "p", "--principal", "x", "--grant", "nonsense"])
    assert info.value.code == 2

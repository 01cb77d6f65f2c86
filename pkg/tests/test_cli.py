import json
from pathlib import Path

import pytest

from pvi import cli, harness
from pvi.expfam import NotNormalizable

CONFIGS = Path(__file__).parent.parent / "configs"
SMOKE = str(CONFIGS / "conjugate_smoke.toml")


def _small_config(tmp_path, name="small.toml", method="pvi"):
    path = tmp_path / name
    path.write_text(f'''seed = 0
[method]
name = "{method}"
[data]
source = "synth_logreg"
d = 2
N = 200
[split]
scheme = "homogeneous"
M = 2
[schedule]
kind = "synchronous"
rho = 0.5
rounds = 2
''')
    return str(path)


def test_missing_config_exits_1(tmp_path, capsys):
    missing = tmp_path / "absent.toml"
    assert cli.main(["run", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_bad_field_is_reported_with_path_and_section(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text("[optimizer]\nstep = 3\n")
    assert cli.main(["run", "--config", str(path)]) == 1
    err = capsys.readouterr().err
    assert str(path) in err and "[optimizer]" in err and "step" in err


def test_usage_errors_exit_1(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--seed", "notanint"])
    assert exc.value.code == 1
    assert cli.main(["verify", "--criteria", "one"]) == 1
    assert cli.main(["verify", "--criteria", "99"]) == 1


def test_numerical_failure_exits_2(monkeypatch, capsys):
    def boom(cfg, out_dir=None):
        raise NotNormalizable("aggregate is improper", (0,))

    monkeypatch.setattr(harness, "run_experiment", boom)
    assert cli.main(["run", SMOKE]) == 2
    assert "NotNormalizable" in capsys.readouterr().err


def test_run_then_emit_plots_round_trips(tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["run", SMOKE, "--out", str(out), "--seed", "3"]) == 0
    final = json.loads(capsys.readouterr().out)
    trace_path = out / "trace.jsonl"
    trace = harness.load_trace(trace_path)
    assert trace.to_jsonl() == trace_path.read_text()
    assert trace.records[-1]["test_nll"] == final["test_nll"]
    assert json.loads((out / "manifest.json").read_text())["seed"] == 3
    plots = tmp_path / "plots"
    assert cli.main(["emit-plots", str(trace_path), "--out", str(plots)]) == 0
    lines = (plots / "comms_test_nll.csv").read_text().splitlines()
    assert len(lines) == 1 + len(trace)
    assert [float(line.split(",")[3]) for line in lines[1:]] == [r["test_nll"] for r in trace]


def test_method_override_and_compare(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    out = tmp_path / "vcl"
    assert cli.main(["run", cfg, "--method", "vcl", "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["method"]["name"] == "vcl"
    capsys.readouterr()
    assert cli.main(["compare", cfg, "--methods", "pvi", "bcm_same", "--seeds", "0", "1", "--threads", "2",
                     "--out", str(tmp_path / "cmp")]) == 0
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 2 and all("(n=2)" in line for line in table)
    assert (tmp_path / "cmp" / "small" / "bcm_same" / "1" / "trace.jsonl").is_file()


def test_split_command(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    assert cli.main(["split", cfg, cfg, "--out", str(tmp_path / "part")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["M"] == 2 and sum(summary["sizes"]) == 160
    assert sum(map(sum, summary["label_counts"])) == 160
    assert len(json.loads((tmp_path / "part" / "partition.json").read_text())["assignments"]) == 160

    csv_path = tmp_path / "data.csv"
    csv_path.write_text("a,b,target\n" + "".join(f"{i},{i % 3},{i % 2}\n" for i in range(20)))
    assert cli.main(["split", str(csv_path), cfg]) == 0
    assert json.loads(capsys.readouterr().out)["sizes"] == [10, 10]


def test_verify_subset_is_deterministic(tmp_path, capsys):
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        assert cli.main(["verify", "--criteria", "1,13", "--out", str(d)]) == 0
    out = capsys.readouterr().out
    assert out.count("[PASS]") == 4 and "2/2 criteria passed" in out
    names = sorted(p.name for p in dirs[0].iterdir())
    assert names and names == sorted(p.name for p in dirs[1].iterdir())
    for name in names:
        assert (dirs[0] / name).read_bytes() == (dirs[1] / name).read_bytes()

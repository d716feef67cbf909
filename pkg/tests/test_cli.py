import json

import pytest

from reenroll.cli import AnalyzeRequest, main, run_analysis
from reenroll.errors import ConfigError
from reenroll.inference import analyze, noninferiority_test
from reenroll.scheme import scheme_to_dict
from reenroll.simgen import SCHEMA_DICT, SimConfig, TruthTable
from reenroll.trial_data import Schema, write_records

from conftest import UNIFORM_SCHEME

TOY_SCHEMA = {"roles": {}, "columns": {"g": {"role": "z"}}}
G_SCHEME = {"arms": ["1", "2"], "rows": [{"episode": "any", "z": {"g": "a"}, "p": {"1": "0.5", "2": "0.5"}}]}
ALL = ["ipw", "sipw", "aipw", "ps", "aps", "anova", "ancova", "anhecova"]


def write_toy(tmp_path, rows, scheme=UNIFORM_SCHEME):
    (tmp_path / "data.csv").write_text("participant_id,episode,arm,outcome,g\n" + "\n".join(rows) + "\n")
    (tmp_path / "schema.json").write_text(json.dumps(TOY_SCHEMA))
    (tmp_path / "scheme.json").write_text(scheme if isinstance(scheme, str) else json.dumps(scheme))
    return [f"--data={tmp_path / 'data.csv'}", f"--schema={tmp_path / 'schema.json'}",
            f"--scheme={tmp_path / 'scheme.json'}"]


@pytest.fixture(scope="module")
def sim_files(tmp_path_factory, sim_rs, sim_scheme):
    d = tmp_path_factory.mktemp("sim")
    with open(d / "data.csv", "w", newline="") as fh:
        write_records(sim_rs, fh, Schema.from_dict(SCHEMA_DICT))
    (d / "schema.json").write_text(json.dumps(SCHEMA_DICT))
    (d / "scheme.json").write_text(json.dumps(scheme_to_dict(sim_scheme)))
    return d


def sim_args(d):
    return [f"--data={d / 'data.csv'}", f"--schema={d / 'schema.json'}", f"--scheme={d / 'scheme.json'}"]


def test_toy_end_to_end(tmp_path, capsys):
    args = write_toy(tmp_path, ["a,1,1,4,a", "b,1,2,7,a"])
    code = main(["analyze", *args, "--comparisons=1v2", "--methods=sipw", "--format=json",
                 f"--outdir={tmp_path / 'out'}"])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["reports"][0]["theta_jk"] == 4.0
    assert doc["reports"][0]["theta_kj"] == 7.0
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["exit_code"] == 0 and len(manifest["inputs"]) == 3
    assert (tmp_path / "out" / "report.txt").read_text().startswith("method")


def test_uncovered_pattern_exits_2(tmp_path, capsys):
    args = write_toy(tmp_path, ["a,1,1,4,a", "b,1,2,7,b"], G_SCHEME)
    code = main(["analyze", *args, "--comparisons=1v2", "--methods=ipw", f"--outdir={tmp_path}"])
    assert code == 2
    assert "uncovered z-pattern" in capsys.readouterr().err
    assert json.loads((tmp_path / "manifest.json").read_text())["exit_code"] == 2
    assert main(["validate", *args]) == 2


def test_estimation_failure_exits_3(tmp_path, capsys):
    args = write_toy(tmp_path, ["a,1,2,4,a", "b,1,2,7,a"])
    code = main(["analyze", *args, "--comparisons=1v2", "--methods=ps", f"--outdir={tmp_path}"])
    assert code == 3
    assert "j=1, k=2, t=1, h=0" in capsys.readouterr().err


def test_bad_inputs_exit_2(tmp_path, capsys):
    args = write_toy(tmp_path, ["a,1,1,4,a", "b,1,2,7,a"])
    assert main(["analyze", *args, "--comparisons=1v2", "--methods=aipw", f"--outdir={tmp_path}"]) == 2
    assert "--intercept-only" in capsys.readouterr().err
    assert main(["analyze", *args, "--comparisons=1v2", "--methods=aipw", "--intercept-only",
                 f"--outdir={tmp_path}"]) == 0
    assert main(["analyze", *args, "--comparisons=12", f"--outdir={tmp_path}"]) == 2
    (tmp_path / "data.csv").write_text("participant_id,episode,arm,outcome,g\na,1,1,4\n")
    assert main(["analyze", *args, "--comparisons=1v2", "--methods=ipw", f"--outdir={tmp_path}"]) == 2
    assert "line 2" in capsys.readouterr().err


def test_request_check():
    with pytest.raises(ConfigError, match="unknown methods"):
        AnalyzeRequest("d", "s", "p", [("1", "2")], ["magic"]).check()


def test_cli_matches_library(sim_files, sim_rs, sim_scheme, tmp_path, capsys):
    code = main(["analyze", *sim_args(sim_files), "--comparisons=2v1,3v1", f"--methods={','.join(ALL)}",
                 "--covariates=x_c,x_b", "--margin=-3", "--format=json", f"--outdir={tmp_path}"])
    assert code == 0
    reports = json.loads(capsys.readouterr().out)["reports"]
    assert len(reports) == 16
    it = iter(reports)
    for j, k in (("2", "1"), ("3", "1")):
        for m in ALL:
            sub = ({"2": "HS", "3": "DA"}[j]) if m in ("anova", "ancova", "anhecova") else None
            cov = ("x_c", "x_b") if m in ("aipw", "aps", "ancova", "anhecova") else ()
            est, _, var = analyze(m, sim_rs, sim_scheme, j, k, covariates=cov, substudy=sub)
            r = next(it)
            assert (r["method"], r["comparison"]) == (m, f"{j}v{k}")
            assert r["estimate"] == est.value and r["se"] == var.se
            assert r["noninferiority"]["noninferior"] == noninferiority_test(est, var, -3.0).noninferior


def test_run_analysis_episode_scope(sim_rs, sim_scheme):
    req = AnalyzeRequest("d", "s", "p", [("2", "1")], ["ps"], episodes=(1,))
    entries, rep = run_analysis(req, sim_rs, sim_scheme)
    assert entries[0]["episodes"] == [1] and len(entries[0]["per_episode"]) == 1
    assert rep.dropped_count == 0


def test_csv_and_text_formats(sim_files, tmp_path, capsys):
    base = ["analyze", *sim_args(sim_files), "--comparisons=2v1", "--methods=ipw,ps", f"--outdir={tmp_path}"]
    assert main(base + ["--format=csv"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].startswith("method,comparison,estimate") and len(lines) == 3
    assert main(["validate", *sim_args(sim_files)]) == 0
    assert capsys.readouterr().out.startswith("ok:")


@pytest.fixture(scope="module")
def truth_file(tmp_path_factory):
    d = tmp_path_factory.mktemp("truth")
    values = {(c, s): v for c, base in (("2v1", -3.93), ("3v1", 0.83))
              for s, v in (("all", base), ("t=1", base), ("substudy", base))}
    (d / "truth.json").write_text(json.dumps(TruthTable(values, {}, 0).to_dict()))
    return d / "truth.json"


def simulate(tmp_path, name, truth_file, *extra):
    out = tmp_path / name
    code = main(["simulate", "--n=120", "--reps=3", "--seed=7", "--methods=ipw,sipw,ps,ps[t=1],anova",
                 f"--truth-file={truth_file}", f"--outdir={out}", *extra])
    assert code == 0
    return out


def test_simulate_is_deterministic(tmp_path, truth_file, capsys, monkeypatch):
    a = simulate(tmp_path, "a", truth_file, "--dump-replications")
    b = simulate(tmp_path, "b", truth_file, "--dump-replications")
    c = simulate(tmp_path, "c", truth_file, "--workers=2", "--dump-replications")
    monkeypatch.setenv("REENROLL_WORKERS", "3")
    d = simulate(tmp_path, "d", truth_file)
    csv_a = (a / "summary.csv").read_bytes()
    assert csv_a == (b / "summary.csv").read_bytes() == (c / "summary.csv").read_bytes()
    assert csv_a == (d / "summary.csv").read_bytes()
    assert (a / "replications.csv").read_bytes() == (c / "replications.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["seed"] == 7 and manifest["config"]["simulation"]["n"] == 120
    assert str(truth_file) in manifest["inputs"]
    assert csv_a.decode().count("\n") == 1 + 2 * 5


def test_simulate_config_errors(tmp_path, truth_file, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n": 50, "bogus": 1}))
    assert main(["simulate", f"--config={cfg}", f"--truth-file={truth_file}", f"--outdir={tmp_path}"]) == 2
    assert "unknown config keys" in capsys.readouterr().err
    assert main(["simulate", "--reps=1", "--methods=magic", f"--truth-file={truth_file}",
                 f"--outdir={tmp_path}"]) == 2
    assert main(["simulate", "--reps=1", "--workers=0", f"--truth-file={truth_file}", f"--outdir={tmp_path}"]) == 2
    assert main(["oracle", "--draws=1000", f"--outdir={tmp_path}"]) == 2


def test_config_file_and_overrides(tmp_path, truth_file):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SimConfig(n=80, reps=2, scenario=2).to_dict()))
    out = tmp_path / "o"
    assert main(["simulate", f"--config={cfg}", "--n=90", "--methods=ipw", f"--truth-file={truth_file}",
                 f"--outdir={out}"]) == 0
    sim = json.loads((out / "manifest.json").read_text())["config"]["simulation"]
    assert (sim["n"], sim["scenario"], sim["reps"]) == (90, 2, 2)

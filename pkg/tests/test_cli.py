import json

import pandas as pd
import pytest

from speedgov import cli
from speedgov import pipeline as pl


def test_stars_are_strict():
    assert [pl.stars(p) for p in (0.0009, 0.001, 0.009, 0.01, 0.049, 0.05, None, float("nan"))] == [
        "***", "**", "**", "*", "*", "", "", ""]


def test_month_range():
    assert pl.month_range("2023-11:2024-01") == ["2023-11", "2023-12", "2024-01"]
    with pytest.raises(pl.ValidationError):
        pl.month_range("2023-12:2023-11")


def test_clean_dumps_are_canonical():
    text = pl.dumps({"b": float("nan"), "a": [1.0, float("inf")]})
    assert json.loads(text) == {"a": [1.0, None], "b": None}
    assert text.index('"a"') < text.index('"b"')


def test_report_on_empty_dir_exits_4(tmp_path, capsys):
    assert cli.main(["report", "--run-dir", str(tmp_path)]) == 4
    assert "UNAVAILABLE" in capsys.readouterr().out


@pytest.mark.parametrize("args", [
    ["--outcomes", "braking"],
    ["--cluster", "state"],
    ["--ban-month", "2023-11", "--ref-month", "2023-11"],
])
def test_run_validation_errors_exit_2(small_trips_csv, tmp_path, args):
    path, _, _ = small_trips_csv
    argv = ["run", "--trips", str(path), "--out", str(tmp_path / "r"), *args]
    if "--cluster" in args:
        with pytest.raises(SystemExit) as exc:  # argparse rejects unknown choices itself
            cli.main(argv)
        assert exc.value.code == 2
    else:
        assert cli.main(argv) == 2


def test_missing_trips_file_exits_2(tmp_path):
    assert cli.main(["features", "--trips", str(tmp_path / "none.csv"), "--out", str(tmp_path / "f.csv")]) == 2


def test_config_file_with_flag_override(tmp_path):
    cfg_path = tmp_path / "run.toml"
    cfg_path.write_text('trips = "a.csv"\nout_dir = "x"\ndraws = 50\ncluster = "month"\n', encoding="utf-8")
    cfg = pl.PipelineConfig.from_toml(cfg_path, {"draws": 80, "seed": None})
    assert (cfg.draws, cfg.cluster, cfg.seed) == (80, "month", 7)
    bad = tmp_path / "bad.toml"
    bad.write_text("colour = 1\n", encoding="utf-8")
    with pytest.raises(pl.ValidationError, match="unknown config keys"):
        pl.PipelineConfig.from_toml(bad)


@pytest.fixture(scope="module")
def run_dir(small_trips_csv, tmp_path_factory):
    path, _, _ = small_trips_csv
    out = tmp_path_factory.mktemp("run") / "r"
    code = cli.main(["run", "--trips", str(path), "--out", str(out), "--draws", "20", "--n-perm", "50",
                     "--outcomes", "harsh_accel", "harsh_decel", "speeding"])
    assert code == 0
    return out


def test_run_writes_artifacts_and_manifest(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    for o in ("harsh_accel", "harsh_decel", "speeding"):
        assert {f"fit_{o}.json", f"did_{o}.json", f"event_study_{o}.csv"} <= names
    assert {"manifest.json", "report.md", "robustness.json", "concordance.md", "panel.csv"} <= names
    assert "FAILED" not in names
    man = json.loads((run_dir / "manifest.json").read_text())
    assert set(man["artifacts"]) == names - {"manifest.json", "report.md"}
    assert man["inputs"]["trips"]["sha256"] == pl.sha256_file(man["config"]["trips"])


def test_speeding_is_labelled_and_outside_family(run_dir):
    rob = json.loads((run_dir / "robustness.json").read_text())
    assert rob["family"] == ["harsh_accel", "harsh_decel"]
    assert rob["labels"]["speeding"] == pl.FIRMWARE_LABEL
    did = json.loads((run_dir / "did_speeding.json").read_text())
    assert did["label"] == pl.FIRMWARE_LABEL
    assert pl.FIRMWARE_LABEL in (run_dir / "report.md").read_text()


def test_report_command_regenerates_report(run_dir, tmp_path):
    out = tmp_path / "rep.md"
    assert cli.main(["report", "--run-dir", str(run_dir), "--out", str(out)]) == 0
    assert out.read_text() == (run_dir / "report.md").read_text()


def test_subcommands_on_run_outputs(run_dir, tmp_path):
    panel = str(run_dir / "panel.csv")
    es = tmp_path / "es.csv"
    assert cli.main(["event-study", "--panel", panel, "--months", "2023-08:2023-12", "--out", str(es)]) == 0
    frame = pd.read_csv(es)
    assert frame.loc[frame.reference, "coef"].tolist() == [0.0]
    pj = tmp_path / "perm.json"
    assert cli.main(["permute", "--panel", panel, "--n", "40", "--out", str(pj)]) == 0
    assert json.loads(pj.read_text())["n_perm"] == 40
    oj = tmp_path / "oster.json"
    assert cli.main(["oster", "--beta-short", "-0.12", "--beta-full", "-0.115", "--r2-short", "0.01",
                     "--r2-full", "0.1596", "--out", str(oj)]) == 0
    assert json.loads(oj.read_text())["beta_star"] == pytest.approx(-0.1150 + 0.005 * 0.3 * 0.1596 / 0.1496)
    pf = tmp_path / "fit.json"
    assert cli.main(["predict-counterfactual", "--fit", str(run_dir / "fit_harsh_accel.json"), "--panel", panel,
                     "--out", str(pf)]) == 0
    assert "delta_pp" in json.loads(pf.read_text())


def test_failed_stage_leaves_marker(tmp_path):
    # a trips file whose riders never ride in the reference month
    from speedgov.synth_dgp import TripDgpConfig, generate_trip_records
    from speedgov.telemetry_io import write_trips

    recs, _ = generate_trip_records(TripDgpConfig(n_users=30, seed=2, first_month="2023-02", last_month="2023-05",
                                                  ban_month="2023-05"))
    trips = tmp_path / "t.csv"
    write_trips(recs, trips)
    out = tmp_path / "r"
    code = cli.main(["run", "--trips", str(trips), "--out", str(out), "--draws", "5", "--no-stability"])
    assert code in (2, 3)
    assert (out / "FAILED").exists()
    assert "stage:" in (out / "FAILED").read_text()

import json
import math

import pytest

from fedphys import cli
from fedphys import experiment as ex
from fedphys import federation as fed
from fedphys import synth
from fedphys.evaluation import MetricsRow
from fedphys.synth import NoiseTarget

SMALL = ["--set", "dataset.subjects=4", "--set", "dataset.duration_s=14", "--set", "dataset.height=3",
         "--set", "dataset.width=3", "--set", "federation.rounds=2"]


def small_config(**kw):
    base = dict(subjects=4, duration_s=14.0, height=3, width=3, rounds=2, levels=(0.0, 0.5), repeats=2)
    base.update(kw)
    return ex.ExperimentConfig(**base)


# --- config -------------------------------------------------------------------

def test_parse_config_sections_and_comments():
    text = """
    # a sweep
    [dataset]
    subjects = 10   # fewer
    seed = 4
    [noise]
    target = label
    levels = 0, 1.5, 4.5
    [federation]
    quality_map = maxminus
    local_steps = none
    [run]
    policies = fedavg
    """
    cfg = ex.make_config(ex.parse_config_text(text))
    assert cfg.subjects == 10 and cfg.seed == 4
    assert cfg.noise_target == NoiseTarget.LABEL and cfg.levels == (0.0, 1.5, 4.5)
    assert cfg.quality_map == fed.QualityMap.MAXMINUS and cfg.local_steps is None
    assert cfg.policies == (fed.Policy.FEDAVG,)


@pytest.mark.parametrize("text,match", [
    ("bogus = 1", "unknown key"),
    ("[dataset]\nsubjects", "expected 'key = value'"),
])
def test_parse_config_errors(text, match):
    with pytest.raises(ex.ConfigError, match=match):
        ex.parse_config_text(text, "cfg.txt")


def test_config_bad_values():
    with pytest.raises(ex.ConfigError):
        ex.make_config({"dataset.subjects": "many"})
    with pytest.raises(ex.ConfigError):
        ex.make_config({"run.policies": "fedmedian"})


@pytest.mark.parametrize("kw", [dict(levels=()), dict(repeats=0), dict(height=0), dict(levels=(-1.0,)),
                                dict(policies=()), dict(subjects=1)])
def test_config_validation(kw):
    with pytest.raises(ex.ConfigError):
        small_config(**kw).validate()


def test_load_config_file(tmp_path):
    (tmp_path / "c.cfg").write_text("[federation]\nrounds = 3\n")
    assert ex.load_config(tmp_path / "c.cfg").rounds == 3


# --- sweep --------------------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_rows(tmp_path_factory):
    path = tmp_path_factory.mktemp("sweep") / "results.csv"
    return ex.run_sweep(small_config(), path), path


def test_sweep_row_count(sweep_rows):
    rows, _ = sweep_rows
    assert len(rows) == 2 * 2 * 2
    assert all(r.status == "ok" for r in rows)


def test_sweep_noise_zero_rows_match(sweep_rows):
    rows, _ = sweep_rows
    for seed in (0, 1):
        pair = [r for r in rows if r.noise_level == 0.0 and r.seed == seed]
        assert len(pair) == 2 and pair[0].mae_bpm == pair[1].mae_bpm and pair[0].snr_db == pair[1].snr_db


def test_sweep_failed_cell_recorded(tmp_path, monkeypatch):
    real = fed.run_federation

    def flaky(clients, config, init=None):
        if config.policy == fed.Policy.FEDWEIGHT and config.seed == 1:
            raise fed.AggregationError("zero participants")
        return real(clients, config, init)

    monkeypatch.setattr(fed, "run_federation", flaky)
    rows = ex.run_sweep(small_config(levels=(0.5,)), tmp_path / "r.csv")
    assert len(rows) == 4
    failed = [r for r in rows if r.status != "ok"]
    assert len(failed) == 1 and failed[0].policy == "fedweight" and "AggregationError" in failed[0].status
    ok, bad = ex.read_metrics_csv(tmp_path / "r.csv")
    assert len(ok) == 3 and len(bad) == 1


def test_sweep_parallel_matches_serial(tmp_path, sweep_rows):
    rows, path = sweep_rows
    ex.run_sweep(small_config(workers=2), tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_bytes() == path.read_bytes()


# --- report -------------------------------------------------------------------

def test_report_single_row(tmp_path):
    from fedphys.evaluation import write_metrics_csv
    write_metrics_csv([MetricsRow("video", 0.5, "fedavg", 0, 3.0, 2.0, 0.5, 10)], tmp_path / "one.csv")
    md, svg = ex.write_report(tmp_path / "one.csv")
    table = md.read_text().splitlines()
    assert len([l for l in table if l.startswith("| video")]) == 1
    assert svg.read_text().count("<circle") == 1


def test_report_footnotes_failed(tmp_path):
    from fedphys.evaluation import write_metrics_csv
    write_metrics_csv([MetricsRow("video", 0.5, "fedavg", 0, 3.0, 2.0, 0.5, 10),
                       MetricsRow("video", 0.5, "fedavg", 1, 5.0, 2.0, 0.5, 10),
                       MetricsRow("video", 0.5, "fedweight", 0, math.nan, math.nan, None, 0, "failed: X")],
                      tmp_path / "r.csv")
    summary_md = ex.write_report(tmp_path / "r.csv")[0].read_text()
    assert "| video | 0.5 | fedavg | 2 | 4.000 | 1.000 |" in summary_md
    assert "fedweight" not in summary_md.split("\n\n")[0]
    assert "1 failed cell(s)" in summary_md and "seed 0" in summary_md


def test_report_malformed_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("noise_target,noise_level,policy,seed,mae_bpm,snr_db,pearson_r,n_windows,status\n"
                 "video,0.5,fedavg,0,1.0,2.0,,4,ok\n"
                 "video,zero,fedavg,0,1.0,2.0,,4,ok\n")
    with pytest.raises(ex.ReportError, match=":3:"):
        ex.read_metrics_csv(p)


def test_svg_series_per_policy(sweep_rows):
    _, path = sweep_rows
    ok, _ = ex.read_metrics_csv(path)
    svg = ex.svg_chart(ex.summarize(ok))
    assert svg.startswith("<svg") and svg.count("<polyline") == 2


# --- CLI ----------------------------------------------------------------------

def test_cli_run_is_byte_identical(tmp_path, capsys):
    args = ["run", "--levels", "0,0.5", "--repeats", "1", "--seed", "3"] + SMALL
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert len(a.decode().splitlines()) == 1 + 2 * 2
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 3 and "created" in manifest


def test_cli_report(tmp_path):
    assert cli.main(["run", "--levels", "0.5", "--policies", "fedweight", "--quality-map", "literal",
                     "--out", str(tmp_path)] + SMALL) == 0
    assert cli.main(["report", str(tmp_path / "results.csv")]) == 0
    assert (tmp_path / "report.md").exists() and (tmp_path / "mae_vs_noise.svg").exists()


def test_cli_history(tmp_path):
    assert cli.main(["run", "--levels", "0.5", "--history", "--out", str(tmp_path)] + SMALL) == 0
    files = sorted(p.name for p in (tmp_path / "history").iterdir())
    assert files == ["fedavg_level0.5_seed0.jsonl", "fedweight_level0.5_seed0.jsonl"]


def test_cli_generate_default(tmp_path):
    out = tmp_path / "ds"
    assert cli.main(["generate", "--out", str(out), "--set", "dataset.duration_s=14"]) == 0
    subjects = sorted(p for p in out.iterdir() if p.is_dir())
    assert len(subjects) == 25 and (out / "manifest.json").exists()
    again = tmp_path / "ds2"
    assert cli.main(["generate", "--out", str(again), "--set", "dataset.duration_s=14"]) == 0
    for d in subjects:
        for name in ("header.json", "frames.f32", "label.f32"):
            assert (d / name).read_bytes() == (again / d.name / name).read_bytes()
    assert len(synth.read_dataset(out)) == 25


def test_cli_generate_invalid_frame_size(tmp_path, capsys):
    out = tmp_path / "nothing"
    code = cli.main(["generate", "--out", str(out), "--dataset.width", "0"])
    assert code != 0 and not out.exists()
    err = json.loads(capsys.readouterr().err.strip())
    assert err["status"] == "error" and err["kind"] == "config"


def test_cli_errors_are_json(tmp_path, capsys):
    assert cli.main(["report", str(tmp_path / "missing.csv")]) != 0
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["kind"] == "not_found"
    assert cli.main(["run", "--out", str(tmp_path), "--noise-target", "audio"]) != 0
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["kind"] == "usage"
    assert cli.main(["run", "--out", str(tmp_path), "--set", "nope=1"]) != 0
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["kind"] == "config"


def test_cli_noise_target_selects_grid(tmp_path):
    args = cli.build_parser().parse_args(["run", "--out", str(tmp_path), "--noise-target", "label"])
    cfg = cli.resolve_config(args)
    assert cfg.levels == synth.LABEL_LEVELS and cfg.noise_target == NoiseTarget.LABEL


def test_cli_config_file_and_flag_override(tmp_path):
    (tmp_path / "c.cfg").write_text("[federation]\nrounds = 3\n[noise]\nlevels = 0.25\n")
    args = cli.build_parser().parse_args(["run", "--out", str(tmp_path), "--config", str(tmp_path / "c.cfg"),
                                          "--federation.rounds", "5"])
    cfg = cli.resolve_config(args)
    assert cfg.rounds == 5 and cfg.levels == (0.25,)

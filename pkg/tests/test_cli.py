import json

import numpy as np
import pytest

from ksi.cli import main
from ksi.io import file_sha256, read_csv_samples, read_table
from ksi.presets import series1d

GAUSS = {
    "target": {"gaussian": {"mean": [1, -1], "cov": [[1, 0.3], [0.3, 0.5]]}},
    "features": {"type": "concat", "maps": ["linear", "monomials", "radial_quadratic"]},
    "schedule": "trig",
    "steps": 100,
    "n_pairs": 4000,
    "generate": {"num_samples": 1000},
    "metrics": ["moments", "mmd"],
}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def work(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


def test_fit_is_deterministic_and_prints_conditions(work, capsys):
    cfg = write(work / "c.json", GAUSS)
    assert main(["fit", "--config", cfg, "--out", "a.ksid"]) == 0
    assert "condition numbers over 100 nodes: min" in capsys.readouterr().out
    assert main(["fit", "--config", cfg, "--out", "b.ksid", "--threads", "3"]) == 0
    assert (work / "a.ksid").read_bytes() == (work / "b.ksid").read_bytes()
    table = read_table(work / "a.ksid")
    assert table.etas.shape == (100, 6)
    manifest = json.loads((work / "a.ksid.manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["table_sha256"] == file_sha256(work / "a.ksid")
    assert manifest["inputs"][cfg] == file_sha256(cfg)
    assert main(["fit", "--config", cfg, "--out", "c.ksid", "--seed", "5"]) == 0
    assert (work / "c.ksid").read_bytes() != (work / "a.ksid").read_bytes()


def test_default_run_directory(work):
    cfg = write(work / "c.json", GAUSS)
    assert main(["fit", "--config", cfg]) == 0
    assert main(["generate", "--config", cfg]) == 0
    assert main(["eval", "--config", cfg]) == 0
    (run,) = (work / "runs").iterdir()
    assert {"table.ksid", "samples.csv", "report.json"} <= {p.name for p in run.iterdir()}


def test_rank_deficient_without_ridge_exits_3(work, capsys):
    cfg = write(work / "c.json", {**GAUSS, "features": {"type": "concat", "maps": ["linear", "linear"]}, "ridge": 0, "steps": 10})
    assert main(["fit", "--config", cfg, "--out", "t.ksid"]) == 3
    err = capsys.readouterr().err
    assert "node 0" in err and "t=0.0" in err
    assert not (work / "t.ksid").exists()


def test_generate_modes_and_schedule_mismatch(work, capsys):
    cfg = write(work / "c.json", GAUSS)
    assert main(["fit", "--config", cfg, "--out", "t.ksid"]) == 0
    assert main(["generate", "--config", cfg, "--table", "t.ksid", "--out", "s.csv"]) == 0
    X = read_csv_samples(work / "s.csv")
    assert X.shape == (1000, 2) and np.all(np.isfinite(X))
    zero = write(work / "z.json", {**GAUSS, "generate": {"num_samples": 50, "diffusion": "zero", "steps": 40}})
    assert main(["generate", "--config", zero, "--table", "t.ksid", "--out", "z.csv"]) == 0
    lin = write(work / "l.json", {**GAUSS, "schedule": "linear"})
    capsys.readouterr()
    assert main(["generate", "--config", lin, "--table", "t.ksid", "--out", "x.csv"]) == 2
    err = capsys.readouterr().err
    assert "table schedule id 1" in err and "config schedule id 0" in err


def test_generate_rejects_corrupt_table(work):
    cfg = write(work / "c.json", GAUSS)
    (work / "t.ksid").write_bytes(b"garbage")
    assert main(["generate", "--config", cfg, "--table", "t.ksid"]) == 2


def test_eval_reports_and_errors(work, capsys):
    cfg = write(work / "c.json", GAUSS)
    main(["fit", "--config", cfg, "--out", "t.ksid"])
    main(["generate", "--config", cfg, "--table", "t.ksid", "--out", "s.csv"])
    capsys.readouterr()
    assert main(["eval", "--config", cfg, "--samples", "s.csv", "--out", "r.json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert {"mean[0]", "cov[0,1]", "mmd2"} <= set(report["metrics"])
    assert max(abs(m["z"]) for m in report["metrics"].values()) < 5
    lev = write(work / "lev.json", {**GAUSS, "metrics": ["leverage"]})
    assert main(["eval", "--config", lev, "--samples", "s.csv"]) == 2
    assert "series" in capsys.readouterr().err
    empty = write(work / "e.json", {**GAUSS, "metrics": []})
    assert main(["eval", "--config", empty, "--samples", "s.csv"]) == 2


def test_series_config_pipeline(work):
    cfg = write(
        work / "s.json",
        {
            "target": {"cascade": {"length": 128}},
            "features": {
                "type": "concat",
                "maps": [{"type": "haar_scatter", "levels": 3}, {"type": "leverage", "max_lag": 2}, {"type": "marginal", "num_centers": 9, "span": 6}],
            },
            "schedule": "trig",
            "steps": 50,
            "n_pairs": 4,
            "generate": {"num_samples": 3},
            "metrics": ["moments", "mmd", "leverage", "density"],
            "max_lag": 2,
        },
    )
    assert main(["fit", "--config", cfg, "--out", "t.ksid"]) == 0
    assert main(["generate", "--config", cfg, "--table", "t.ksid", "--out", "x.csv"]) == 0
    assert main(["eval", "--config", cfg, "--samples", "x.csv", "--out", "out/r.json"]) == 0
    assert (work / "out" / "leverage.csv").exists() and (work / "out" / "density.csv").exists()


def test_csv_target_with_noise_file(work):
    rng = np.random.default_rng(0)
    np.savetxt(work / "a.csv", rng.standard_normal((300, 2)), delimiter=",")
    np.savetxt(work / "z.csv", rng.standard_normal((300, 2)), delimiter=",")
    cfg = write(work / "c.json", {**GAUSS, "target": {"csv": {"path": "a.csv", "z_path": "z.csv"}}, "steps": 5})
    assert main(["fit", "--config", cfg, "--out", "t.ksid"]) == 0
    manifest = json.loads((work / "t.ksid.manifest.json").read_text())
    assert set(manifest["inputs"]) == {cfg, "a.csv", "z.csv"}


def test_config_errors_exit_2(work, capsys):
    bad = write(work / "b.json", {**GAUSS, "steps": 0})
    assert main(["fit", "--config", bad]) == 2
    assert "/steps" in capsys.readouterr().err
    assert main(["fit", "--config", "missing.json"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["fit"])
    assert exc.value.code == 2


def test_unknown_preset_lists_names(work, capsys):
    assert main(["preset", "mnist"]) == 2
    err = capsys.readouterr().err
    assert "ensemble" in err and "gauss2d" in err and "series1d" in err


def test_ensemble_preset(work, capsys):
    assert main(["preset", "ensemble", "--out", "ens"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out
    assert (work / "ens" / "ensemble.csv").exists()
    assert json.loads((work / "ens" / "manifest.json").read_text())["passed"]


def test_series_preset_outputs_are_reproducible(tmp_path):
    kw = dict(length=256, steps=60, n_pairs=4, num_samples=2, mmd_samples=500, max_lag=3)
    series1d(tmp_path / "a", seed=3, **kw)
    series1d(tmp_path / "b", seed=3, **kw)
    for name in ("table.ksid", "samples.csv", "density.csv", "leverage.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

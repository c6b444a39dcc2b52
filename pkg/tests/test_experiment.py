import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from ldvice import experiment as ex
from ldvice.cli import main
from ldvice.errors import ConfigError
from ldvice.guidance import load_result, validate_result_dir


def tiny_config(root, n_eval=2):
    cfg = ex.default_run_config("classification", root=str(root))
    cfg["dataset"].update(n_train=16, n_val=4, n_test=8)
    for section in cfg["train"].values():
        section["steps"] = 5
    cfg["train"]["codec"]["n_videos"] = 16
    cfg["guidance"].update(N=2, T=2)
    cfg["n_eval"] = n_eval
    return cfg


def write(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1))
    return str(path)


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = tiny_config(root)
    path = write(root / "cfg.json", cfg)
    assert main(["--log-level", "WARNING", "train", "all", "--config", path]) == 0
    return root, path, cfg


# -- configuration ----------------------------------------------------------------------

def test_config_hash_is_canonical():
    a = {"b": 1, "a": [1, 2, {"y": 0.5, "x": None}]}
    b = {"a": [1, 2, {"x": None, "y": 0.5}], "b": 1}
    assert ex.config_hash(a) == ex.config_hash(b)
    assert ex.config_hash(a) != ex.config_hash(dict(a, b=2))
    assert ex.canonical_json(a) == b'{"a":[1,2,{"x":null,"y":0.5}],"b":1}'


def test_env_overrides():
    cfg = ex.default_run_config("classification")
    env = {"LDVICE__guidance__lambda_c": "12.5", "LDVICE__guidance__variant": "RG", "OTHER": "x",
           "LDVICE__refine__t_sup": "0.2"}
    out = ex.apply_env_overrides(cfg, env)
    assert out["guidance"]["lambda_c"] == 12.5 and out["guidance"]["variant"] == "RG"
    assert out["refine"]["t_sup"] == 0.2
    assert cfg["guidance"]["lambda_c"] != 12.5
    loaded = ex.load_run_config(task="classification", environ={"LDVICE__seed": "7"}, seed=None)
    assert loaded["seed"] == 7


def test_invalid_configs_rejected(tmp_path):
    cfg = ex.default_run_config("classification")
    with pytest.raises(ConfigError):
        ex.validate_run_config(dict(cfg, bogus=1))
    with pytest.raises(ConfigError):
        ex.load_run_config(task="classification", environ={"LDVICE__guidance__variant": "XX"})
    with pytest.raises(ConfigError):
        ex.load_run_config(task="classification", environ={"LDVICE__guidance__lambda_c": "-1"})
    (tmp_path / "bad.json").write_text("{nope")
    assert main(["generate", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["generate", "--config", str(tmp_path / "missing.json")]) == 2


def test_init_config_round_trips(tmp_path):
    assert main(["init-config", "--task", "regression", "--root", str(tmp_path), "--out", str(tmp_path / "c.json")]) == 0
    cfg = ex.load_run_config(tmp_path / "c.json", environ={})
    assert cfg == ex.default_run_config("regression", str(tmp_path))


def test_missing_dataset_path_exit_2(tmp_path, capsys):
    cfg = tiny_config(tmp_path)
    cfg["data_dir"] = str(tmp_path / "no-such-data")
    assert main(["train", "target", "--config", write(tmp_path / "c.json", cfg)]) == 2
    assert "no-such-data" in capsys.readouterr().err


def test_empty_eval_set_exit_2(tiny, tmp_path):
    _, _, cfg = tiny
    cfg = dict(cfg, n_eval=0, out=str(tmp_path / "run"))
    assert main(["generate", "--config", write(tmp_path / "c.json", cfg)]) == 2


def test_hash_mismatch_stops_before_generation(tiny, tmp_path):
    _, _, cfg = tiny
    cfg = json.loads(json.dumps(cfg))
    cfg["checkpoints"]["codec"]["sha256"] = "0" * 64
    cfg["out"] = str(tmp_path / "run")
    assert main(["generate", "--config", write(tmp_path / "c.json", cfg)]) == 2
    assert not (tmp_path / "run" / "runs").exists()


def test_data_command_writes_splits(tmp_path):
    cfg = tiny_config(tmp_path)
    assert main(["data", "--config", write(tmp_path / "c.json", cfg), "--out", str(tmp_path / "data")]) == 0
    cfg["data_dir"] = str(tmp_path / "data")
    split = ex.load_data_split(cfg, "test")
    assert len(split) == 8


# -- training and generation ------------------------------------------------------------

def test_retrain_gives_identical_hash(tiny, tmp_path):
    _, _, cfg = tiny
    info = json.loads(json.dumps(cfg))
    info["checkpoints"]["target"]["path"] = str(tmp_path / "t.ldvt")
    first = ex.train_component(info, "target")["sha256"]
    assert ex.train_component(info, "target")["sha256"] == first
    assert first == ex.train_component(cfg, "target")["sha256"]


def _strip_seconds(run_dir):
    out = {}
    for d in sorted((Path(run_dir) / "runs").iterdir()):
        r = load_result(d)
        out[d.name] = (r.x_cf.tobytes(), r.y_target, np.asarray(r.pred_cf).tobytes(), r.z_T.tobytes())
    return out


def test_rg_equals_degenerate_sg(tiny, tmp_path):
    _, _, cfg = tiny
    rg = json.loads(json.dumps(cfg))
    rg["guidance"].update(variant="RG")
    sg = json.loads(json.dumps(cfg))
    sg["guidance"].update(variant="SG", N=1, sigma=0.0)
    a = ex.cmd_generate(dict(rg, out=str(tmp_path / "rg")))
    b = ex.cmd_generate(dict(sg, out=str(tmp_path / "sg")))
    assert _strip_seconds(a) == _strip_seconds(b)


def test_eight_video_run_validates(tiny, tmp_path):
    _, _, cfg = tiny
    path = write(tmp_path / "c.json", dict(cfg, n_eval=8))
    assert main(["generate", "--config", path, "--out", str(tmp_path / "run")]) == 0
    runs = sorted((tmp_path / "run" / "runs").iterdir())
    assert len(runs) == 8
    for d in runs:
        validate_result_dir(d)
        assert load_result(d).x_mask_cf is not None
    summary = json.loads((tmp_path / "run" / "summary.json").read_text())
    assert summary["n"] == 8 and summary["median_seconds"] > 0
    assert main(["evaluate", str(tmp_path / "run")]) == 0
    metrics = json.loads((tmp_path / "run" / "metrics.json").read_text())
    assert metrics["n"] == 8


# -- sweeps -----------------------------------------------------------------------------

def test_single_point_sweep_and_resume(tiny, tmp_path, monkeypatch):
    _, path, _ = tiny
    spec = write(tmp_path / "sweep.json", {"base": path, "grid": {"lambda_c": [10.0]}})
    assert main(["sweep", "--config", spec, "--out", str(tmp_path / "s")]) == 0
    with open(tmp_path / "s" / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    before = (tmp_path / "s" / "sweep.csv").read_text()

    def boom(*a, **k):
        raise AssertionError("completed point recomputed")

    monkeypatch.setattr(ex, "_run_group", boom)
    assert main(["sweep", "--config", spec, "--out", str(tmp_path / "s")]) == 0
    assert (tmp_path / "s" / "sweep.csv").read_text() == before


def test_sweep_grid_size_and_tables(tiny, tmp_path):
    _, path, _ = tiny
    spec = ex.load_sweep_spec(spec={"base": path, "grid": {"lambda_c": [0.0, 5.0], "t_sup": [0.05, 0.5]}},
                              out=tmp_path / "s", environ={})
    out = ex.cmd_sweep(spec, workers=2)
    with open(out / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4 and [int(r["point"]) for r in rows] == [0, 1, 2, 3]
    assert (out / "table_lambda_c_t_sup.md").exists()
    for lam in ("0.0", "5.0"):
        dens = [float(r["mask_density"]) for r in rows if r["lambda_c"] == lam]
        assert dens[0] >= dens[1]


def test_failed_point_is_marked(tiny, tmp_path, monkeypatch):
    _, path, _ = tiny
    spec = ex.load_sweep_spec(spec={"base": path, "grid": {"lambda_c": [0.0, 5.0]}}, out=tmp_path / "s", environ={})
    real = ex._run_group

    def flaky(group, *a, **k):
        if group[0]["lambda_c"] == 5.0:
            raise RuntimeError("injected")
        return real(group, *a, **k)

    monkeypatch.setattr(ex, "_run_group", flaky)
    rows = {r["lambda_c"]: r for r in _rows(ex.cmd_sweep(spec))}
    assert rows["0.0"]["status"] == "ok" and rows["5.0"]["status"] == "failed"
    assert "injected" in rows["5.0"]["error"]
    monkeypatch.setattr(ex, "_run_group", real)
    rows = {r["lambda_c"]: r for r in _rows(ex.cmd_sweep(spec))}
    assert rows["5.0"]["status"] == "ok"


def _rows(out):
    with open(Path(out) / "sweep.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def test_bad_sweep_spec(tmp_path):
    assert main(["sweep", "--config", write(tmp_path / "s.json", {"base": {}, "grid": {"lambda_c": []}})]) == 2


# -- reports ----------------------------------------------------------------------------

def test_markdown_bolds_best():
    rows = [{"name": "a", "mae": 3.0, "fr": 0.5}, {"name": "b", "mae": 1.5, "fr": 0.9}, {"name": "c", "mae": 2.0,
                                                                                       "fr": 0.9}]
    text = ex.markdown_table(rows, ["name", "mae", "fr"])
    lines = text.splitlines()
    assert "**1.5**" in lines[3] and "**3**" not in text
    assert lines[3].count("**0.9**") == 1 and lines[4].count("**0.9**") == 1
    assert "**a**" not in text


def test_report_two_runs(tiny, tmp_path):
    _, _, cfg = tiny
    out = ex.cmd_generate(dict(cfg, out=str(tmp_path / "run")))
    assert main(["report", str(out)]) == 0
    grids = sorted((out / "grids").glob("*.png"))
    assert len(grids) == 2
    md = (out / "report.md").read_text()
    per_run = md.split("## Per run")[1].strip().splitlines()
    assert len(per_run) == 4
    first = {p.name: p.read_bytes() for p in [out / "report.md", out / "report.csv", *grids]}
    assert main(["report", str(out)]) == 0
    assert first == {p.name: p.read_bytes() for p in [out / "report.md", out / "report.csv", *grids]}


def test_report_skips_unreadable_run(tiny, tmp_path, capsys):
    _, _, cfg = tiny
    out = ex.cmd_generate(dict(cfg, out=str(tmp_path / "run")))
    broken = out / "runs" / "99999"
    shutil.copytree(next((out / "runs").iterdir()), broken)
    for f in broken.iterdir():
        if f.suffix == ".ldvt":
            f.write_bytes(b"garbage")
    info = ex.cmd_report(out)
    assert info["skipped"] == ["99999"] and info["rows"] == 2
    assert "99999" in (out / "report.md").read_text()


def test_report_sweep(tiny, tmp_path):
    _, path, _ = tiny
    spec = ex.load_sweep_spec(spec={"base": path, "grid": {"lambda_c": [0.0, 5.0]}}, out=tmp_path / "s", environ={})
    out = ex.cmd_sweep(spec)
    info = ex.cmd_report(out)
    assert info["rows"] == 2
    with pytest.raises(ConfigError):
        ex.cmd_report(tmp_path)
    assert main(["report", str(tmp_path / "nowhere")]) == 2

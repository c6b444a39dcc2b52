import json
import os
from pathlib import Path

import pytest
import torch

from ldvice import experiment as ex

CACHE = Path(os.environ.get("LDVICE_TEST_CACHE", Path(__file__).resolve().parent.parent / ".test-cache"))

CRITERIA = []


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def record(number, ok, detail=""):
    """Keep a one-line verdict for the terminal summary."""
    CRITERIA.append((number, bool(ok), detail))
    print(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(CRITERIA, key=lambda c: c[0]):
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if ok else 'FAIL'} {detail}")


def _trained(task):
    """Desk-scale components for ``task``, trained once and cached by config hash."""
    cfg = ex.default_run_config(task, root="unused")
    key = ex.config_hash({k: cfg[k] for k in ("task", "seed", "dataset", "train")})[:16]
    root = CACHE / f"{task}-{key}"
    for c in ex.COMPONENTS:
        cfg["checkpoints"][c]["path"] = str(root / f"{c}.ldvt")
    cfg["out"] = str(root / "run")
    done = root / "trained.json"
    if not done.exists():
        info = [ex.train_component(cfg, c) for c in ex.COMPONENTS]
        done.write_text(json.dumps(info, indent=1, sort_keys=True))
    cfg["trained"] = json.loads(done.read_text())
    return cfg


@pytest.fixture(scope="session")
def cls_setup():
    cfg = _trained("classification")
    info = cfg.pop("trained")
    return cfg, ex.load_components(cfg), info


@pytest.fixture(scope="session")
def reg_setup():
    cfg = _trained("regression")
    info = cfg.pop("trained")
    return cfg, ex.load_components(cfg), info


@pytest.fixture(scope="session")
def cls_lambda_sweep(cls_setup, tmp_path_factory):
    """SG over lambda_c in {0, c, 4c} at the desk T, 64 held-out videos."""
    cfg, components, _ = cls_setup
    c = cfg["guidance"]["lambda_c"]
    base = dict(cfg, guidance=dict(cfg["guidance"], variant="SG"))
    spec = ex.load_sweep_spec(spec={"base": base, "grid": {"lambda_c": [0.0, c, 4 * c]}, "n_eval": 64,
                                    "save_tensors": True}, out=tmp_path_factory.mktemp("lambda-sweep"), environ={})
    out = ex.cmd_sweep(spec, components=components)
    return spec, out, ex.sweep_points(spec)


@pytest.fixture(scope="session")
def cls_tsup_sweep(cls_setup, tmp_path_factory):
    """SGA at the desk preset over an ascending t_sup grid, 64 held-out videos."""
    cfg, components, _ = cls_setup
    spec = ex.load_sweep_spec(spec={"base": cfg, "grid": {"t_sup": [0.03, 0.10, 0.30], "variant": ["SGA"]},
                                    "n_eval": 64}, out=tmp_path_factory.mktemp("tsup-sweep"), environ={})
    out = ex.cmd_sweep(spec, components=components)
    return spec, out


def read_rows(sweep_dir):
    import csv

    with open(Path(sweep_dir) / "sweep.csv", newline="") as fh:
        return list(csv.DictReader(fh))

"""Config-driven orchestration: component training, counterfactual generation, sweeps, evaluation, reports."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import itertools
import json
import logging
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np
import torch

from .checkpoints import load_checkpoint
from .codec import train_codec, save_codec
from .datasets import DatasetConfig, load_split, make_split
from .diffusion import check_compatible, encode_all, make_schedule, noise_mse, save_denoiser, train_denoiser
from .errors import ConfigError, EmptyInputError, LdviceError
from .guidance import (DESK_PRESETS, T_SUP_PRESETS, GuidanceConfig, TargetSelectConfig, generate_counterfactual,
                       load_result, save_result, select_target)
from .metrics import evaluate_run_set
from .refinement import RefineConfig, refine
from .targets import save_target, train_target
from .tensors import SeedSpec
from .training import TrainConfig

log = logging.getLogger(__name__)

ENV_PREFIX = "LDVICE__"
COMPONENTS = ("target", "codec", "denoiser")
SWEEP_AXES = ("lambda_c", "T", "t_sup", "variant")

_TRAIN_SECTION = {
    "type": "object",
    "properties": {
        "steps": {"type": "integer", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "minimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
    },
}

RUN_SCHEMA = {
    "type": "object",
    "required": ["task", "seed", "dataset", "checkpoints", "guidance", "refine", "out"],
    "additionalProperties": False,
    "properties": {
        "task": {"enum": ["classification", "regression"]},
        "seed": {"type": "integer", "minimum": 0},
        "dataset": {"type": "object"},
        "data_dir": {"type": ["string", "null"]},
        "eval_split": {"type": "string"},
        "n_eval": {"type": "integer", "minimum": 0},
        "checkpoints": {
            "type": "object",
            "required": list(COMPONENTS),
            "additionalProperties": False,
            "properties": {c: {"type": "object", "required": ["path"],
                               "properties": {"path": {"type": "string"}, "sha256": {"type": ["string", "null"]}}}
                           for c in COMPONENTS},
        },
        "train": {"type": "object", "properties": {c: _TRAIN_SECTION for c in COMPONENTS}},
        "guidance": {"type": "object"},
        "refine": {"type": "object", "properties": {"t_sup": {"type": "number", "minimum": 0}}},
        "target_select": {"type": "object"},
        "out": {"type": "string"},
        "save_tensors": {"type": "boolean"},
    },
}

SWEEP_SCHEMA = {
    "type": "object",
    "required": ["base", "grid"],
    "additionalProperties": False,
    "properties": {
        "base": {"type": ["object", "string"]},
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_c": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                "T": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 1}},
                "t_sup": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
                "variant": {"type": "array", "minItems": 1, "items": {"enum": ["RG", "SG", "SGA"]}},
            },
        },
        "n_eval": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "save_tensors": {"type": "boolean"},
    },
}


# -- configuration ------------------------------------------------------------------

def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj)).hexdigest()


def default_run_config(task: str = "classification", root: str = "ldvice-work") -> dict:
    """Desk-scale settings that train in a few minutes on one CPU core."""
    if task not in ("classification", "regression"):
        raise ConfigError(f"unknown task {task!r}")
    g = DESK_PRESETS[task]
    cls = task == "classification"
    return {
        "task": task,
        "seed": 0,
        "dataset": DatasetConfig(task=task).to_dict(),
        "data_dir": None,
        "eval_split": "test",
        "n_eval": 64,
        "checkpoints": {c: {"path": f"{root}/{task}/{c}.ldvt", "sha256": None} for c in COMPONENTS},
        "train": {
            "target": {"steps": 400 if cls else 600, "batch_size": 16, "lr": 3e-3, "width": 16, "hidden": 32},
            "codec": {"steps": 1000 if cls else 600, "batch_size": 32, "lr": 3e-3, "hidden": 32 if cls else 16,
                      "latent_channels": 4, "n_videos": 96},
            "denoiser": {"steps": 1500, "batch_size": 8, "lr": 2e-3, "hidden": 64, "max_t": 600},
        },
        "guidance": {"lambda_c": g.lambda_c, "T": g.T, "N": g.N, "sigma": g.sigma, "variant": "SGA",
                     "noise_depth": g.noise_depth},
        "refine": {"t_sup": T_SUP_PRESETS[task], "channels": 3 if cls else 1},
        "target_select": {"offset": 20.0, "direction": "auto"},
        "out": f"{root}/{task}/run",
        "save_tensors": True,
    }


def _parse_env_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_env_overrides(cfg: dict, environ=None) -> dict:
    """``LDVICE__guidance__lambda_c=40`` sets ``cfg['guidance']['lambda_c'] = 40``."""
    environ = os.environ if environ is None else environ
    cfg = copy.deepcopy(cfg)
    for key in sorted(environ):
        if not key.startswith(ENV_PREFIX):
            continue
        path = [p for p in key[len(ENV_PREFIX):].split("__") if p]
        if not path:
            continue
        node = cfg
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[path[-1]] = _parse_env_value(environ[key])
    return cfg


def validate_run_config(cfg: dict) -> dict:
    try:
        jsonschema.validate(cfg, RUN_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"invalid run config: {e.message} at {'/'.join(map(str, e.absolute_path))}") from None
    # round-trip every typed section so errors surface before any work starts
    dataset_config(cfg)
    guidance_config(cfg, SeedSpec(cfg["seed"]))
    RefineConfig(**cfg["refine"])
    TargetSelectConfig(**cfg.get("target_select", {}))
    return cfg


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: not valid JSON ({e})") from None


def load_run_config(path=None, task: str | None = None, seed: int | None = None, out: str | None = None,
                    environ=None) -> dict:
    cfg = _read_json(path) if path is not None else default_run_config(task or "classification")
    cfg = apply_env_overrides(cfg, environ)
    if seed is not None:
        cfg["seed"] = int(seed)
    if out is not None:
        cfg["out"] = str(out)
    return validate_run_config(cfg)


def dataset_config(cfg: dict) -> DatasetConfig:
    try:
        d = DatasetConfig.from_dict(cfg["dataset"])
    except TypeError as e:
        raise ConfigError(f"bad dataset section: {e}") from None
    if d.task != cfg["task"]:
        raise ConfigError(f"dataset task {d.task!r} != run task {cfg['task']!r}")
    d.ranges()
    return d


def guidance_config(cfg: dict, seed: SeedSpec) -> GuidanceConfig:
    try:
        return GuidanceConfig(**cfg["guidance"], task=cfg["task"], seed=seed)
    except TypeError as e:
        raise ConfigError(f"bad guidance section: {e}") from None


def load_data_split(cfg: dict, name: str):
    data_dir = cfg.get("data_dir")
    if data_dir:
        if not Path(data_dir).is_dir():
            raise ConfigError(f"dataset directory not found: {data_dir}")
        try:
            return load_split(data_dir, name)
        except FileNotFoundError as e:
            raise ConfigError(f"dataset split not found: {e}") from None
    d = dataset_config(cfg)
    if name not in d.ranges():
        raise ConfigError(f"unknown split {name!r}")
    return make_split(d, name)


# -- training -------------------------------------------------------------------------

def _train_cfg(section: dict, seed: int) -> TrainConfig:
    keys = ("steps", "batch_size", "lr", "weight_decay", "log_every", "final_lr_frac")
    return TrainConfig(seed=seed, **{k: section[k] for k in keys if k in section})


def train_component(cfg: dict, component: str) -> dict:
    """Train one component, write its checkpoint, and return ``{path, sha256, metrics}``."""
    if component not in COMPONENTS:
        raise ConfigError(f"unknown component {component!r}; choose from {COMPONENTS}")
    section = cfg.get("train", {}).get(component, {})
    tcfg = _train_cfg(section, cfg["seed"])
    path = cfg["checkpoints"][component]["path"]
    train, val = load_data_split(cfg, "train"), load_data_split(cfg, "val")
    task = cfg["task"]
    num_classes = dataset_config(cfg).num_classes
    if component == "target":
        model = train_target(train.videos, train.labels, task, tcfg, num_classes,
                             val=(val.videos, val.labels) if len(val) else None,
                             width=section.get("width", 16), hidden=section.get("hidden", 32))
        digest = save_target(model, path)
        metrics = {k: v for k, v in model.meta.items() if k.startswith("val_")}
        if task == "classification" and metrics.get("val_accuracy", 1.0) < 0.95:
            log.warning("target val accuracy %.3f is below the 0.95 gate", metrics["val_accuracy"])
    elif component == "codec":
        n = section.get("n_videos", len(train))
        model = train_codec(train.videos[:n], val.videos[:16] if len(val) else None, tcfg,
                            hidden=section.get("hidden", 32), latent_channels=section.get("latent_channels", 4))
        digest = save_codec(model, path)
        metrics = {"val_psnr": model.meta["val_psnr"]}
    else:
        codec = load_component(cfg, "codec")
        schedule = make_schedule()
        model = train_denoiser(encode_all(codec, train.videos), train.labels, schedule, tcfg, task=task,
                               num_classes=num_classes, hidden=section.get("hidden", 64),
                               max_t=section.get("max_t"), codec_hash=codec.content_hash)
        digest = save_denoiser(model, path)
        metrics = {}
        if len(val):
            metrics["val_noise_mse"] = noise_mse(model, encode_all(codec, val.videos), val.labels, schedule,
                                                 SeedSpec(cfg["seed"], "val/noise-mse"), section.get("max_t"))
    return {"component": component, "path": str(path), "sha256": digest, "metrics": metrics}


def load_component(cfg: dict, component: str):
    entry = cfg["checkpoints"][component]
    path = Path(entry["path"])
    if not path.exists():
        raise ConfigError(f"{component} checkpoint not found: {path}")
    return load_checkpoint(path, entry.get("sha256"))


def load_components(cfg: dict):
    """``(codec, schedule, denoiser, target)`` with hash and compatibility checks."""
    codec, denoiser, target = (load_component(cfg, c) for c in ("codec", "denoiser", "target"))
    check_compatible(codec, denoiser)
    if target.task != cfg["task"]:
        raise ConfigError(f"target checkpoint is a {target.task} model, run task is {cfg['task']}")
    return codec, make_schedule(), denoiser, target


# -- generation -----------------------------------------------------------------------

def _predict(target, video):
    with torch.no_grad():
        return target.predict(video)


def video_seed(cfg: dict, index: int) -> SeedSpec:
    return SeedSpec(cfg["seed"], f"video/{int(index)}")


def eval_set(cfg: dict):
    split = load_data_split(cfg, cfg.get("eval_split", "test"))
    n = min(cfg.get("n_eval", len(split)), len(split))
    if n == 0:
        raise EmptyInputError("evaluation set is empty")
    return split.indices[:n], split.videos[:n]


def generate_one(cfg: dict, index: int, x_f, components, refine_tsups=None):
    """One counterfactual (plus refinements for SGA). Returns ``(result, refined list, seconds)``.

    ``refine_tsups`` defaults to the config's single t_sup; the unguided reference is computed once.
    """
    codec, schedule, denoiser, target = components
    seed = video_seed(cfg, index)
    t0 = time.perf_counter()
    y_target = select_target(_predict(target, x_f), cfg["task"], TargetSelectConfig(**cfg.get("target_select", {})),
                             seed.child("target-select"))
    gcfg = guidance_config(cfg, seed)
    result = generate_counterfactual(x_f, y_target, gcfg, codec, schedule, denoiser, target)
    refined = []
    if gcfg.variant == "SGA":
        x_den = None
        for t_sup in refine_tsups if refine_tsups is not None else [cfg["refine"]["t_sup"]]:
            rcfg = RefineConfig(t_sup=t_sup, channels=int(np.shape(x_f)[-1]))
            r = refine(x_f, result, rcfg, codec, schedule, denoiser, target, x_den=x_den)
            x_den = r.x_den
            refined.append(r)
    return result, refined, time.perf_counter() - t0


def cmd_generate(cfg: dict, components=None) -> Path:
    out = Path(cfg["out"])
    components = components or load_components(cfg)
    indices, videos = eval_set(cfg)
    (out / "runs").mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg, indent=1, sort_keys=True))
    seconds = []
    for j, (index, x_f) in enumerate(zip(indices, videos)):
        result, refined, dt = generate_one(cfg, index, x_f, components)
        final = refined[0] if refined else result
        final.seconds = dt
        save_result(final, out / "runs" / f"{int(index):05d}")
        seconds.append(dt)
        log.info("video %d/%d (index %d): %.2fs", j + 1, len(indices), index, dt)
    summary = {"config_hash": config_hash(cfg), "n": len(seconds), "median_seconds": statistics.median(seconds),
               "total_seconds": float(sum(seconds))}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return out


def load_run_dir(run_dir):
    """Results under ``run_dir/runs`` plus a list of ``(name, error)`` for unreadable ones."""
    run_dir = Path(run_dir)
    if not (run_dir / "runs").is_dir():
        raise ConfigError(f"not a run directory (no runs/): {run_dir}")
    results, skipped = [], []
    for d in sorted(p for p in (run_dir / "runs").iterdir() if p.is_dir()):
        try:
            results.append((d.name, load_result(d)))
        except (LdviceError, OSError, ValueError, KeyError, TypeError) as e:
            skipped.append((d.name, f"{type(e).__name__}: {e}"))
    return results, skipped


def cmd_evaluate(run_dir, target=None):
    run_dir = Path(run_dir)
    results, skipped = load_run_dir(run_dir)
    if not results:
        raise EmptyInputError(f"no readable results in {run_dir}")
    if target is None:
        target = load_component(_read_json(run_dir / "run_config.json"), "target")
    report = evaluate_run_set([r for _, r in results], target)
    for (name, _), row in zip(results, report.per_run):
        row["run"] = name
    (run_dir / "metrics.json").write_text(report.to_json())
    (run_dir / "per_run.csv").write_text(report.per_run_csv())
    return report, skipped


# -- sweeps ---------------------------------------------------------------------------

def load_sweep_spec(path=None, spec: dict | None = None, out=None, seed=None, environ=None) -> dict:
    spec = copy.deepcopy(spec) if spec is not None else _read_json(path)
    try:
        jsonschema.validate(spec, SWEEP_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"invalid sweep spec: {e.message}") from None
    base = spec["base"]
    if isinstance(base, str):
        base_path = Path(base)
        if path is not None and not base_path.is_absolute():
            base_path = Path(path).parent / base_path
        base = _read_json(base_path)
    base = apply_env_overrides(base, environ)
    if seed is not None:
        base["seed"] = int(seed)
    if "n_eval" in spec:
        base["n_eval"] = spec["n_eval"]
    spec["base"] = validate_run_config(base)
    if out is not None:
        spec["out"] = str(out)
    spec.setdefault("out", str(Path(base["out"]).parent / "sweep"))
    return spec


def sweep_points(spec: dict) -> list[dict]:
    """Grid points in row order; unspecified axes take the base config's value."""
    base = spec["base"]
    defaults = {"lambda_c": [base["guidance"]["lambda_c"]], "T": [base["guidance"]["T"]],
                "t_sup": [base["refine"]["t_sup"]], "variant": [base["guidance"].get("variant", "SG")]}
    grid = {a: spec["grid"].get(a, defaults[a]) for a in SWEEP_AXES}
    points = []
    for values in itertools.product(*(grid[a] for a in SWEEP_AXES)):
        p = dict(zip(SWEEP_AXES, values))
        cfg = copy.deepcopy(base)
        cfg["guidance"].update(lambda_c=p["lambda_c"], T=p["T"], variant=p["variant"])
        cfg["refine"]["t_sup"] = p["t_sup"]
        cfg.pop("out", None)
        p["config"] = cfg
        p["config_hash"] = config_hash(cfg)
        points.append(p)
    return points


def _digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float32).tobytes())
    return h.hexdigest()


def _run_group(group, indices, videos, components, target, out: Path, save_tensors: bool):
    """Generate once for a (lambda_c, T, variant) group and evaluate every t_sup point of it."""
    cfg = group[0]["config"]
    tsups = [p["t_sup"] for p in group]
    per_point = [[] for _ in group]
    seconds = []
    for index, x_f in zip(indices, videos):
        result, refined, dt = generate_one(cfg, index, x_f, components, tsups)
        seconds.append(dt)
        for k in range(len(group)):
            r = refined[k] if refined else result
            per_point[k].append(r)
            if save_tensors:
                save_result(r, out / "points" / group[k]["config_hash"] / "runs" / f"{int(index):05d}")
    rows = []
    for p, results in zip(group, per_point):
        report = evaluate_run_set(results, target)
        row = {a: p[a] for a in SWEEP_AXES}
        row.update(config_hash=p["config_hash"], status="ok", n=report.n, error="",
                   median_seconds=statistics.median(seconds), total_seconds=float(sum(seconds)),
                   digest=_digest([a for r in results for a in (r.x_cf, r.x_mask_cf) if a is not None]))
        row.update(report.aggregate)
        rows.append(row)
    return rows


CSV_LEAD = ("point", "config_hash", "status", "variant", "T", "lambda_c", "t_sup", "n")
CSV_TAIL = ("digest", "median_seconds", "total_seconds", "error")
TIMING_COLUMNS = ("median_seconds", "total_seconds")


def rows_to_csv(rows) -> str:
    metrics = sorted({k for r in rows for k in r} - set(CSV_LEAD) - set(CSV_TAIL))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=[*CSV_LEAD, *metrics, *CSV_TAIL], lineterminator="\n", restval="")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return buf.getvalue()


def cmd_sweep(spec: dict, workers: int = 1, components=None) -> Path:
    """Run a grid; completed points (by config hash) are loaded instead of recomputed."""
    out = Path(spec["out"])
    (out / "points").mkdir(parents=True, exist_ok=True)
    (out / "sweep_spec.json").write_text(json.dumps(spec, indent=1, sort_keys=True))
    points = sweep_points(spec)
    base = spec["base"]
    components = components or load_components(base)
    target = components[3]
    indices, videos = eval_set(base)

    done = {}
    for p in points:
        f = out / "points" / f"{p['config_hash']}.json"
        if f.exists():
            row = json.loads(f.read_text())
            if row.get("status") == "ok":
                done[p["config_hash"]] = row

    groups = {}
    for p in points:
        if p["config_hash"] not in done:
            groups.setdefault((p["lambda_c"], p["T"], p["variant"]), []).append(p)

    def run(group):
        try:
            rows = _run_group(group, indices, videos, components, target, out, spec.get("save_tensors", False))
        except Exception as e:  # a failed point must not stop the others
            log.error("sweep point %s failed: %s", group[0]["config_hash"][:12], e)
            rows = [dict({a: p[a] for a in SWEEP_AXES}, config_hash=p["config_hash"], status="failed",
                         error=f"{type(e).__name__}: {e}") for p in group]
        for row in rows:
            (out / "points" / f"{row['config_hash']}.json").write_text(json.dumps(row, indent=1, sort_keys=True))
        return rows

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for rows in pool.map(run, list(groups.values())):
            for row in rows:
                done[row["config_hash"]] = row

    ordered = []
    for i, p in enumerate(points):
        row = dict(done[p["config_hash"]], point=i)
        ordered.append(row)
    (out / "sweep.csv").write_text(rows_to_csv(ordered))
    write_axis_tables(ordered, base["task"], out)
    return out


def primary_metric(task: str) -> str:
    return "fr" if task == "classification" else "mae"


def write_axis_tables(rows, task: str, out: Path) -> list[Path]:
    """One markdown pivot of the primary metric per pair of swept axes (other axes averaged)."""
    metric = primary_metric(task)
    ok = [r for r in rows if r.get("status") == "ok" and r.get(metric) is not None]
    varying = [a for a in SWEEP_AXES if len({r[a] for r in rows}) > 1] or list(SWEEP_AXES[:2])
    written = []
    for a, b in itertools.combinations(varying, 2):
        av = sorted({r[a] for r in rows}, key=str)
        bv = sorted({r[b] for r in rows}, key=str)
        lines = [f"{metric} by {a} (rows) and {b} (columns)", "", f"| {a} \\ {b} | " + " | ".join(map(str, bv)) + " |",
                 "|" + "---|" * (len(bv) + 1)]
        for x in av:
            cells = []
            for y in bv:
                vals = [r[metric] for r in ok if r[a] == x and r[b] == y]
                cells.append(f"{np.mean(vals):.4f}" if vals else "-")
            lines.append(f"| {x} | " + " | ".join(cells) + " |")
        path = out / f"table_{a}_{b}.md"
        path.write_text("\n".join(lines) + "\n")
        written.append(path)
    return written


# -- reports --------------------------------------------------------------------------

HIGHER_IS_BETTER = ("fr", "r2", "ssim")
LOWER_IS_BETTER = ("mae", "rmse", "lpips", "l1", "fid", "fvd")


def _direction(column: str):
    base = column[5:] if column.startswith("mask_") else column
    if base in HIGHER_IS_BETTER:
        return max
    if base in LOWER_IS_BETTER:
        return min
    return None


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return "" if v is None else str(v)


def markdown_table(rows, columns) -> str:
    """Pipe table; the best value of each metric column is bolded."""
    best = {}
    for c in columns:
        pick = _direction(c)
        vals = [r[c] for r in rows if isinstance(r.get(c), (int, float)) and not isinstance(r.get(c), bool)]
        if pick and vals:
            best[c] = pick(vals)
    lines = ["| " + " | ".join(columns) + " |", "|" + "---|" * len(columns)]
    for r in rows:
        cells = []
        for c in columns:
            v = r.get(c)
            s = _fmt(v)
            if c in best and v == best[c]:
                s = f"**{s}**"
            cells.append(s)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def frame_grid(result, frame_step: int = 2, zoom: int = 2) -> np.ndarray:
    """uint8 RGB image: rows factual, counterfactual, refined (if any), difference map."""
    from .tensors import quantize

    def rgb(v):
        v = np.asarray(v, dtype=np.float32)
        return np.repeat(v, 3, axis=-1) if v.shape[-1] == 1 else v

    rows = [rgb(result.x_f), rgb(result.x_cf)]
    if result.x_mask_cf is not None:
        rows.append(rgb(result.x_mask_cf))
    delta = result.delta if result.delta is not None else np.abs(result.x_cf - result.x_f).sum(-1)
    heat = np.clip(np.asarray(delta, np.float32) / result.x_f.shape[-1], 0, 1)
    rows.append(np.stack([heat, heat**2, np.zeros_like(heat)], axis=-1))
    frames = range(0, result.x_f.shape[0], frame_step)
    img = np.concatenate([np.concatenate([r[f] for f in frames], axis=1) for r in rows], axis=0)
    img = quantize(np.clip(img, 0, 1))
    return img.repeat(zoom, axis=0).repeat(zoom, axis=1)


def _report_run(run_dir: Path) -> dict:
    from PIL import Image

    results, skipped = load_run_dir(run_dir)
    report, _ = cmd_evaluate(run_dir) if results else (None, None)
    (run_dir / "grids").mkdir(exist_ok=True)
    for name, r in results:
        Image.fromarray(frame_grid(r)).save(run_dir / "grids" / f"{name}.png")
    lines = ["# Counterfactual run", ""]
    if report is not None:
        cols = ["run", "target", "factual_prediction", "prediction", "ssim", "lpips", "l1"]
        if any("mask_prediction" in row for row in report.per_run):
            cols += ["mask_prediction", "mask_ssim", "mask_lpips", "mask_l1", "mask_density"]
        lines += ["## Aggregate", "", markdown_table([report.aggregate], sorted(report.aggregate)), "## Per run", "",
                  markdown_table(report.per_run, cols)]
        (run_dir / "report.csv").write_text(report.per_run_csv())
    if skipped:
        lines += ["## Skipped", ""] + [f"- {n}: {err}" for n, err in skipped] + [""]
    (run_dir / "report.md").write_text("\n".join(lines))
    return {"kind": "run", "rows": len(results), "skipped": [n for n, _ in skipped]}


def _report_sweep(sweep_dir: Path) -> dict:
    with open(sweep_dir / "sweep.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            try:
                r[k] = int(v) if k in ("point", "T", "n") else float(v)
            except (TypeError, ValueError):
                pass
    cols = [c for c in rows[0] if c not in ("config_hash", "digest", "error")] if rows else []
    text = "# Sweep\n\n" + markdown_table(rows, cols)
    (sweep_dir / "report.md").write_text(text)
    return {"kind": "sweep", "rows": len(rows), "skipped": []}


def cmd_report(directory) -> dict:
    d = Path(directory)
    if (d / "sweep.csv").exists():
        return _report_sweep(d)
    if (d / "runs").is_dir():
        return _report_run(d)
    raise ConfigError(f"{d} is neither a run nor a sweep directory")

"""Config-driven experiment harness: single runs, sweeps and grid search.

Configs are JSON with an explicit schema_version. normalize_config
materializes every default into an echo dict, so the echo (and the
hash over its canonical serialization) fully determines all outputs;
reruns of the same config are byte-identical. Runs for different
(method, seed, sweep value) tuples share no mutable state and can
execute in parallel worker processes; all file writing happens in the
parent in a fixed order.

Output layout per run directory: config.json echo, one training-log
CSV, report JSON and checkpoint per (method, seed), aggregate.json
with per-method mean and standard error over seeds, and rendered
training-curve figures. Sweeps emit curves.csv (sorted rows) plus one
figure per metric; grid search emits grid_results.csv and best.json.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from copy import deepcopy
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import metrics as E
from . import models as M
from . import objectives as O
from . import plots
from . import synth as S
from . import trainer as TR
from .data import DatasetBundle, InteractionLog, load_splits

SCHEMA_VERSION = 1

SWEEP_DEFAULTS = {
    "alpha": (0.0, 0.1, 0.3, 0.5, 0.7, 1.0),
    "beta": (0.0, 0.3, 0.5, 0.7, 1.0),
    "tau": (0.1, 0.3, 0.5, 0.7, 1.0),
    "K1": (5, 10, 15, 20, 25, 30),
    "K2": (5, 10, 15, 20, 25, 30),
    "gamma": (0.001, 0.01, 0.05, 0.1, 0.5),
}

METRIC_KEYS = ("acc", "auc", "ndcg_at_10", "recall_at_10")


class ConfigError(ValueError):
    """Invalid experiment config; message names the offending field."""


class DivergenceError(RuntimeError):
    """A training run hit a non-finite loss."""


def _require(cond, field, msg):
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def _check_keys(block, field, legal):
    _require(isinstance(block, dict), field, "must be an object")
    for key in block:
        _require(key in legal, f"{field}.{key}", "unknown key")


_MODEL_FIELDS = tuple(f.name for f in fields(M.ModelDims)
                      if f.name not in ("num_users", "num_items"))
_LOSS_FIELDS = tuple(f.name for f in fields(O.LossConfig) if f.name != "method")
_TRAIN_FIELDS = tuple(f.name for f in fields(TR.TrainConfig) if f.name != "seed")


def normalize_config(raw: dict) -> dict:
    """Validate a raw config dict and materialize every default.

    Returns the echo dict; raises ConfigError with a field-level message
    on the first problem found.
    """
    _require(isinstance(raw, dict), "config", "must be a JSON object")
    legal_top = {"schema_version", "data", "method", "methods", "base_model",
                 "model", "loss", "train", "seeds", "sweep", "grids"}
    for key in raw:
        _require(key in legal_top, key, "unknown key")
    _require(raw.get("schema_version") == SCHEMA_VERSION,
             "schema_version", f"must be {SCHEMA_VERSION}")

    data = raw.get("data")
    _require(isinstance(data, dict), "data", "must be an object")
    _require(("synth" in data) != ("paths" in data),
             "data", "needs exactly one of 'synth' or 'paths'")
    if "synth" in data:
        _check_keys(data["synth"], "data.synth",
                    {f.name for f in fields(S.SynthConfig)})
        try:
            data_echo = {"synth": asdict(S.SynthConfig(**data["synth"]))}
        except ValueError as e:
            raise ConfigError(f"data.synth: {e}") from e
    else:
        _check_keys(data["paths"], "data.paths", {"train", "val", "test"})
        for k in ("train", "val", "test"):
            _require(k in data["paths"], f"data.paths.{k}", "missing path")
        data_echo = {"paths": {k: str(data["paths"][k])
                               for k in ("train", "val", "test")}}

    _require(not ("method" in raw and "methods" in raw),
             "methods", "give either 'method' or 'methods', not both")
    methods = raw.get("methods", [raw["method"]] if "method" in raw else None)
    _require(isinstance(methods, list) and methods,
             "methods", "must be a nonempty list")
    for m in methods:
        _require(m in O.METHODS, "methods", f"unknown method {m!r}")
    _require(len(set(methods)) == len(methods), "methods", "duplicate entries")

    base_model = raw.get("base_model", "gmf")
    _require(base_model in ("gmf", "mlp"), "base_model", "must be 'gmf' or 'mlp'")

    _check_keys(raw.get("model", {}), "model", set(_MODEL_FIELDS))
    try:
        dims = M.ModelDims(num_users=1, num_items=1, **raw.get("model", {}))
    except ValueError as e:
        raise ConfigError(f"model: {e}") from e
    model_echo = {k: v for k, v in asdict(dims).items()
                  if k not in ("num_users", "num_items")}

    _check_keys(raw.get("loss", {}), "loss", set(_LOSS_FIELDS))
    try:
        loss_cfg = O.LossConfig(method=methods[0], **raw.get("loss", {}))
    except ValueError as e:
        raise ConfigError(f"loss: {e}") from e
    loss_echo = {k: v for k, v in asdict(loss_cfg).items() if k != "method"}

    _check_keys(raw.get("train", {}), "train", set(_TRAIN_FIELDS))
    try:
        train_cfg = TR.TrainConfig(**raw.get("train", {}))
    except ValueError as e:
        raise ConfigError(f"train: {e}") from e
    train_echo = {k: v for k, v in asdict(train_cfg).items() if k != "seed"}

    seeds = raw.get("seeds", [0])
    _require(isinstance(seeds, list) and seeds, "seeds", "must be a nonempty list")
    for s in seeds:
        _require(isinstance(s, int) and not isinstance(s, bool),
                 "seeds", "entries must be integers")
    _require(len(set(seeds)) == len(seeds), "seeds", "duplicate entries")

    sweep_echo = _normalize_sweep(raw.get("sweep"), data_echo)
    grids_echo = _normalize_grids(raw.get("grids"), methods)

    return {
        "schema_version": SCHEMA_VERSION,
        "data": data_echo,
        "methods": list(methods),
        "base_model": base_model,
        "model": model_echo,
        "loss": loss_echo,
        "train": train_echo,
        "seeds": list(seeds),
        "sweep": sweep_echo,
        "grids": grids_echo,
    }


def _normalize_sweep(sweep, data_echo):
    if sweep is None:
        return None
    _check_keys(sweep, "sweep", {"parameter", "values"})
    param = sweep.get("parameter")
    _require(param in SWEEP_DEFAULTS, "sweep.parameter",
             f"must be one of {sorted(SWEEP_DEFAULTS)}")
    values = sweep.get("values", list(SWEEP_DEFAULTS[param]))
    _require(isinstance(values, list) and values,
             "sweep.values", "must be a nonempty list")
    for v in values:
        _require(isinstance(v, (int, float)) and not isinstance(v, bool),
                 "sweep.values", "entries must be numbers")
    if param in ("alpha", "beta"):
        _require("synth" in data_echo, "sweep.parameter",
                 f"'{param}' sweeps need synthetic data")
        for v in values:
            _require(0.0 <= v <= 1.0, "sweep.values", f"{param} must be in [0, 1]")
    elif param == "tau":
        for v in values:
            _require(0.0 < v <= 1.0, "sweep.values", "tau must be in (0, 1]")
    elif param in ("K1", "K2"):
        for v in values:
            _require(isinstance(v, int) and v >= 1,
                     "sweep.values", f"{param} must be a positive integer")
    else:  # gamma
        for v in values:
            _require(v >= 0.0, "sweep.values", "gamma must be >= 0")
    return {"parameter": param, "values": list(values)}


def _normalize_grids(grids, methods):
    if grids is None:
        return None
    _require(isinstance(grids, dict) and grids, "grids", "must be a nonempty object")
    _require(len(methods) == 1, "grids", "grid search needs exactly one method")
    legal = {"loss": set(_LOSS_FIELDS), "train": set(_TRAIN_FIELDS),
             "model": set(_MODEL_FIELDS)}
    for key, vals in grids.items():
        parts = key.split(".", 1)
        _require(len(parts) == 2 and parts[0] in legal and parts[1] in legal[parts[0]],
                 f"grids.{key}", "use loss.<field>, train.<field> or model.<field>")
        _require(isinstance(vals, list) and vals,
                 f"grids.{key}", "must be a nonempty list")
    return {k: list(v) for k, v in grids.items()}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"config: cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON: {e}") from e
    return normalize_config(raw)


def config_hash(echo: dict) -> str:
    canon = json.dumps(echo, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


# -- run execution -------------------------------------------------------------


@dataclass
class RunArtifacts:
    method: str
    seed: int
    sweep_value: float | None
    report: E.MetricsReport | None
    log: list
    bundle: M.ModelBundle
    best_val: float
    jsd_init: float | None
    jsd_best: float | None
    diverged: bool


def _materialize_dataset(echo: dict, sweep_point=None) -> DatasetBundle:
    data = echo["data"]
    if "synth" in data:
        kwargs = dict(data["synth"])
        if sweep_point is not None and sweep_point[0] in ("alpha", "beta"):
            kwargs[sweep_point[0]] = sweep_point[1]
        dataset = S.generate(S.SynthConfig(**kwargs))
    else:
        dataset = load_splits(data["paths"]["train"], data["paths"]["val"],
                              data["paths"]["test"])
    if sweep_point is not None and sweep_point[0] == "tau" and sweep_point[1] < 1.0:
        tau, vidx = sweep_point[1], sweep_point[2]
        rng = np.random.default_rng([echo["seeds"][0], 5, vidx])
        n = len(dataset.train)
        keep = np.sort(rng.choice(n, size=max(1, int(round(tau * n))), replace=False))
        dataset.train = dataset.train.take(keep)
    return dataset


def _configs_for(echo: dict, method: str, seed: int, sweep_point=None):
    loss_kwargs = dict(echo["loss"])
    train_kwargs = dict(echo["train"])
    if sweep_point is not None:
        param, value = sweep_point[0], sweep_point[1]
        if param == "gamma":
            loss_kwargs["gamma"] = value
        elif param == "K1":
            loss_kwargs["k1"] = int(value)
        elif param == "K2":
            loss_kwargs["k2"] = int(value)
    return (O.LossConfig(method=method, **loss_kwargs),
            TR.TrainConfig(seed=seed, **train_kwargs))


def _run_point(echo: dict, method: str, seed: int, sweep_point=None) -> RunArtifacts:
    """One (method, seed, sweep value) training run; pure in (echo, args)."""
    dataset = _materialize_dataset(echo, sweep_point)
    loss_cfg, train_cfg = _configs_for(echo, method, seed, sweep_point)
    dims = M.ModelDims(num_users=dataset.num_users, num_items=dataset.num_items,
                       **echo["model"])
    bundle = M.init_bundle(echo["base_model"], dims, seed=seed)
    result = TR.fit(bundle, dataset, loss_cfg, train_cfg)
    report = None
    if not result.diverged:
        report = E.evaluate(result.bundle, dataset.train, dataset.test,
                            loss_cfg.uses_confounder, seed=seed,
                            config_hash=config_hash(echo))
    return RunArtifacts(method, seed,
                        None if sweep_point is None else sweep_point[1],
                        report, result.log, result.bundle, result.best_val,
                        result.jsd_init, result.jsd_best, result.diverged)


def _run_point_star(job):
    return _run_point(*job)


def _execute(jobs: list, n_jobs: int) -> list:
    if n_jobs <= 1:
        return [_run_point(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_point_star, jobs))


def _check_finite(artifacts):
    for a in artifacts:
        if a.diverged:
            raise DivergenceError(
                f"method {a.method} seed {a.seed}: non-finite training loss")


def _stderr(vals: np.ndarray) -> float:
    if len(vals) < 2:
        return 0.0
    return float(vals.std(ddof=1) / np.sqrt(len(vals)))


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def aggregate_metrics(echo: dict, artifacts: list) -> dict:
    out = {"schema_version": SCHEMA_VERSION, "config_hash": config_hash(echo),
           "num_seeds": len(echo["seeds"]), "metrics": {}}
    for method in echo["methods"]:
        reports = [a.report for a in artifacts if a.method == method]
        entry = {}
        for key in METRIC_KEYS:
            vals = np.array([getattr(r, key) for r in reports])
            entry[key] = {"mean": float(vals.mean()), "stderr": _stderr(vals)}
        out["metrics"][method] = entry
    return out


def run(echo: dict, out_dir, jobs: int = 1) -> dict:
    """Train every (method, seed), write artifacts, return the aggregate."""
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.json"), echo)
    job_list = [(echo, m, s, None) for m in echo["methods"] for s in echo["seeds"]]
    artifacts = _execute(job_list, jobs)
    _check_finite(artifacts)
    logs = {}
    for a in artifacts:
        stem = f"{a.method}_seed{a.seed}"
        TR.write_log_csv(a.log, os.path.join(out_dir, f"{stem}_log.csv"))
        with open(os.path.join(out_dir, f"{stem}_report.json"), "w") as fh:
            fh.write(a.report.to_json() + "\n")
        M.save_checkpoint(a.bundle, os.path.join(out_dir, f"{stem}_checkpoint.json"))
        logs[f"{a.method} seed {a.seed}"] = a.log
    agg = aggregate_metrics(echo, artifacts)
    _write_json(os.path.join(out_dir, "aggregate.json"), agg)
    plots.plot_training(logs, os.path.join(out_dir, "training_curves.png"),
                        val_metric=echo["train"]["val_metric"])
    return agg


def sweep(echo: dict, out_dir, jobs: int = 1) -> list:
    """One run per (sweep value, method, seed); emit sorted curves.csv."""
    _require(echo.get("sweep") is not None, "sweep", "missing sweep block")
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.json"), echo)
    param = echo["sweep"]["parameter"]
    values = echo["sweep"]["values"]
    job_list = [(echo, m, s, (param, v, vi))
                for vi, v in enumerate(values)
                for m in echo["methods"] for s in echo["seeds"]]
    artifacts = _execute(job_list, jobs)
    _check_finite(artifacts)
    rows = []
    for v in values:
        for method in echo["methods"]:
            reports = [a.report for a in artifacts
                       if a.method == method and a.sweep_value == v]
            for key in METRIC_KEYS:
                vals = np.array([getattr(r, key) for r in reports])
                rows.append((float(v), method, key, float(vals.mean()), _stderr(vals)))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    with open(os.path.join(out_dir, "curves.csv"), "w") as fh:
        fh.write("param_value,method,metric,mean,stderr\n")
        for r in rows:
            fh.write(f"{r[0]!r},{r[1]},{r[2]},{r[3]!r},{r[4]!r}\n")
    plots.plot_sweep(rows, param, os.path.join(out_dir, "curves"))
    return rows


def _apply_grid_point(echo: dict, keys: list, combo: tuple) -> dict:
    trial = deepcopy(echo)
    trial["grids"] = None
    for key, value in zip(keys, combo):
        block, field = key.split(".", 1)
        trial[block][field] = value
    return normalize_config(trial)


def gridsearch(echo: dict, out_dir, jobs: int = 1) -> dict:
    """Exhaustive search over the declared grids, selected on validation.

    Ties break toward the earlier grid point in enumeration order. Test
    metrics are reported only for the winner.
    """
    _require(echo.get("grids") is not None, "grids", "missing grids block")
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.json"), echo)
    method = echo["methods"][0]
    seeds = echo["seeds"]
    keys = list(echo["grids"])
    combos = list(itertools.product(*(echo["grids"][k] for k in keys)))
    trial_echos = [_apply_grid_point(echo, keys, combo) for combo in combos]
    job_list = [(trial, method, s, None)
                for trial in trial_echos for s in seeds]
    artifacts = _execute(job_list, jobs)
    _check_finite(artifacts)

    best_idx, best_score = -1, -np.inf
    val_scores = []
    for ci in range(len(combos)):
        chunk = artifacts[ci * len(seeds): (ci + 1) * len(seeds)]
        score = float(np.mean([a.best_val for a in chunk]))
        val_scores.append(score)
        if score > best_score:
            best_idx, best_score = ci, score

    with open(os.path.join(out_dir, "grid_results.csv"), "w") as fh:
        fh.write(",".join(keys) + ",val_score\n")
        for combo, score in zip(combos, val_scores):
            cells = [repr(v) if isinstance(v, float) else json.dumps(v)
                     for v in combo]
            fh.write(",".join(cells) + f",{score!r}\n")

    winner_chunk = artifacts[best_idx * len(seeds): (best_idx + 1) * len(seeds)]
    test_metrics = {}
    for key in METRIC_KEYS:
        vals = np.array([getattr(a.report, key) for a in winner_chunk])
        test_metrics[key] = {"mean": float(vals.mean()), "stderr": _stderr(vals)}
    best = {
        "schema_version": SCHEMA_VERSION,
        "grid_point": dict(zip(keys, combos[best_idx])),
        "config": trial_echos[best_idx],
        "val_metric": echo["train"]["val_metric"],
        "validation_score": best_score,
        "test_metrics": test_metrics,
    }
    _write_json(os.path.join(out_dir, "best.json"), best)
    return best

"""Grid-search tuning of the classical update rules.

Evaluates every grid point on the validation scenes with the task's primary
metric, treats non-finite scores as minus infinity (divergent settings lose),
and breaks ties toward the earlier grid point.  Emits a JSON-lines report:
one line per configuration plus a final line naming the winner.
"""

import itertools
import json

import numpy as np

from . import stream
from .tasks.base import OptimizerSpec

# which hyperparameters each rule exposes to the grid
GRID_FIELDS = {
    "lms": ("step_size",),
    "nlms": ("step_size", "forget"),
    "rmsprop": ("step_size", "forget"),
    "rls": ("forget", "init_scale"),
}

DEFAULT_GRIDS = {
    "lms": {"step_size": [0.01, 0.05, 0.1, 0.3, 0.5, 1.0]},
    "nlms": {"step_size": [0.1, 0.3, 0.5, 1.0, 1.5],
             "forget": [0.5, 0.9, 0.99]},
    "rmsprop": {"step_size": [0.003, 0.01, 0.03, 0.1],
                "forget": [0.9, 0.99]},
    "rls": {"forget": [0.99, 0.995, 0.999, 1.0],
            "init_scale": [1e-3, 1e-2, 1e-1]},
}


def grid_points(kind: str, grid: dict):
    fields = GRID_FIELDS[kind]
    unknown = set(grid) - set(fields)
    if unknown:
        raise ValueError(f"{kind} does not tune {sorted(unknown)}")
    axes = [grid.get(f, [getattr(OptimizerSpec, f)]) for f in fields]
    for combo in itertools.product(*axes):
        yield OptimizerSpec(kind, **dict(zip(fields, combo)))


def grid_search_tune(task, kind: str, scenes, grid: dict | None = None,
                     report_path=None):
    """Pick the grid point maximizing the mean task metric over ``scenes``.

    Returns ``(best_spec, report)`` where the report is the list of per-config
    records that were also written as JSON lines when a path was given.
    """
    if kind not in GRID_FIELDS:
        raise ValueError(f"unknown optimizer kind {kind!r}")
    grid = DEFAULT_GRIDS[kind] if grid is None else grid
    specs = list(grid_points(kind, grid))
    if not specs:
        raise ValueError("empty hyperparameter grid")

    prepared = [task.prepare(s) for s in scenes]
    report = []
    best_spec, best_score = None, -np.inf
    for spec in specs:
        per_scene = []
        for prep, scene in zip(prepared, scenes):
            result = stream.run_prepared(task, spec, prep)
            per_scene.append(float(task.metric(scene, result)))
        finite = [s for s in per_scene if np.isfinite(s)]
        mean = float(np.mean(per_scene)) if len(finite) == len(per_scene) \
            and per_scene else -np.inf
        record = {"config": _spec_dict(spec), "metric_per_scene": per_scene,
                  "mean_metric": None if mean == -np.inf else mean}
        report.append(record)
        if mean > best_score:  # strict: first-in-grid wins ties
            best_score, best_spec = mean, spec

    if best_spec is None:
        best_spec = specs[0]
    if report_path:
        with open(report_path, "w") as f:
            for record in report:
                f.write(json.dumps(record, sort_keys=True) + "\n")
            f.write(json.dumps({"best": _spec_dict(best_spec),
                                "mean_metric": None if best_score == -np.inf
                                else best_score}, sort_keys=True) + "\n")
    return best_spec, report


def _spec_dict(spec: OptimizerSpec) -> dict:
    return {"kind": spec.kind,
            **{f: getattr(spec, f) for f in GRID_FIELDS[spec.kind]}}

"""Single runs, ablation grids and method comparisons on top of :func:`dckd.trainer.train`.

Results CSV schema (version 1), one row per evaluated model::

    schema,run,config_digest,seed,model,psnr,ssim,channel_mode

Ablation results CSV schema (version 1), one row per grid cell::

    schema,cell,<axis keys...>,seeds,psnr,ssim,status,run_dirs
"""
from __future__ import annotations

import copy
import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import config_digest, dump_toml, get, set_key, validate
from .data import synth_pair
from .models import RestorationModel, param_count
from .trainer import (build_dataset, evaluate_model, runs_root, student_arch, teacher_arch, train)

log = logging.getLogger(__name__)

RESULTS_SCHEMA = 1
RESULT_FIELDS = ("schema", "run", "config_digest", "seed", "model", "psnr", "ssim", "channel_mode")
BASE = "base"  # grid value placeholder: keep the base config's value


def run_dir_for(cfg, root=None) -> Path:
    root = Path(root) if root is not None else runs_root()
    return root / f"{get(cfg, 'name')}-{config_digest(cfg)[:10]}"


def run_experiment(cfg, run_dir=None, root=None) -> dict:
    """Train, then score untrained student, trained student and teacher on the eval split."""
    run_dir = Path(run_dir) if run_dir is not None else run_dir_for(cfg, root)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.toml").write_text(dump_toml(cfg))
    eval_pairs = [synth_pair(img, get(cfg, "data.scale")) for img in build_dataset(cfg, "eval")]
    mode = get(cfg, "eval.channel_mode")
    untrained = RestorationModel(student_arch(cfg), seed=get(cfg, "seed") + 1)
    result = train(cfg, run_dir=run_dir)
    scores = {
        "student_init": evaluate_model(untrained, eval_pairs, mode),
        "student": evaluate_model(result.student, eval_pairs, mode),
        "teacher": evaluate_model(result.teacher, eval_pairs, mode),
    }
    digest = config_digest(cfg)
    with open(run_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_FIELDS)
        for name, s in scores.items():
            w.writerow([RESULTS_SCHEMA, run_dir.name, digest, get(cfg, "seed"), name, f"{s['psnr']:.6f}",
                        f"{s['ssim']:.6f}", mode])
    manifest = dict(result.manifest, metrics=scores)
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return {"run_dir": run_dir, "metrics": scores, "manifest": manifest, "result": result}


# ---------------------------------------------------------------------------
# grids

@dataclass
class ExperimentGrid:
    """Axes of config keys to vary.

    ``mode="product"`` runs the cartesian product of all axes; ``"sweep"``
    varies one axis at a time with the others at their base value.
    """

    name: str
    axes: list
    mode: str = "product"
    seeds: list = field(default_factory=lambda: [0])

    def expand(self, base_cfg) -> list:
        """Ordered list of override dicts, one per cell (seeds are not expanded here)."""
        def resolve(key, v):
            return get(base_cfg, key) if v == BASE else v

        cells = []
        if self.mode == "product":
            keys = [k for k, _ in self.axes]
            for combo in itertools.product(*[vals for _, vals in self.axes]):
                cells.append({k: resolve(k, v) for k, v in zip(keys, combo)})
        elif self.mode == "sweep":
            for key, vals in self.axes:
                cells.extend({key: resolve(key, v)} for v in vals)
        else:
            raise ValueError(f"unknown grid mode {self.mode!r}")
        return cells


NAMED_GRIDS = {
    "components": ExperimentGrid("components", [("loss.lambda_dcl", [0.0, BASE]), ("loss.lambda_ce", [0.0, BASE])]),
    "degradation": ExperimentGrid("degradation", [("dcr.degradation_policy", ["blur", "noise", "resize", "mix"])],
                                  mode="sweep"),
    "weights": ExperimentGrid("weights", [("loss.lambda_dcl", [0.01, 0.1, 1.0]),
                                          ("loss.lambda_ce", [0.0001, 0.001, 0.01])], mode="sweep"),
    "weights_product": ExperimentGrid("weights_product", [("loss.lambda_dcl", [0.01, 0.1, 1.0]),
                                                          ("loss.lambda_ce", [0.0001, 0.001, 0.01])]),
    "negatives": ExperimentGrid("negatives", [("dcr.num_negatives", [1, 3, 5, 7])], mode="sweep"),
    "initial_step": ExperimentGrid("initial_step", [("dcr.initial_step", [100, 1000, 10000])], mode="sweep"),
}


def apply_overrides(base_cfg, overrides: dict):
    cfg = copy.deepcopy(base_cfg)
    for k, v in overrides.items():
        set_key(cfg, k, v)
    return validate(cfg)


def ablate(grid: ExperimentGrid, base_cfg, out_dir=None, root=None) -> dict:
    """Run every cell of ``grid``; failures are recorded and the grid carries on."""
    cells = grid.expand(base_cfg)
    out_dir = Path(out_dir) if out_dir is not None else (Path(root) if root else runs_root()) / f"ablate-{grid.name}"
    out_dir.mkdir(parents=True, exist_ok=True)
    plan = [{"cell": i, "overrides": c, "seeds": list(grid.seeds)} for i, c in enumerate(cells)]
    (out_dir / "grid.json").write_text(json.dumps({"grid": grid.name, "mode": grid.mode, "cells": plan,
                                                   "base_config_digest": config_digest(base_cfg)}, indent=2))
    log.info("grid %s: %d cells x %d seeds", grid.name, len(cells), len(grid.seeds))
    rows = []
    for i, overrides in enumerate(cells):
        psnrs, ssims, dirs, status = [], [], [], "ok"
        for seed in grid.seeds:
            try:
                cfg = apply_overrides(base_cfg, dict(overrides, seed=seed))
                res = run_experiment(cfg, run_dir=out_dir / f"cell{i:02d}-seed{seed}")
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
                log.exception("cell %d failed", i)
                status = f"failed: {type(exc).__name__}: {exc}"
                continue
            psnrs.append(res["metrics"]["student"]["psnr"])
            ssims.append(res["metrics"]["student"]["ssim"])
            dirs.append(str(res["run_dir"]))
        rows.append({"cell": i, "overrides": overrides, "seeds": list(grid.seeds),
                     "psnr": float(np.mean(psnrs)) if psnrs else math.nan,
                     "ssim": float(np.mean(ssims)) if ssims else math.nan,
                     "status": status, "run_dirs": dirs})
    keys = list(dict.fromkeys(k for c in cells for k in c))
    with open(out_dir / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema", "cell", *keys, "seeds", "psnr", "ssim", "status", "run_dirs"])
        for r in rows:
            w.writerow([RESULTS_SCHEMA, r["cell"], *[r["overrides"].get(k, "") for k in keys],
                        " ".join(map(str, r["seeds"])), f"{r['psnr']:.6f}", f"{r['ssim']:.6f}", r["status"],
                        " ".join(r["run_dirs"])])
    table = render_table(grid, rows)
    (out_dir / "table.txt").write_text(table)
    plots = plot_grid(grid, rows, out_dir)
    return {"rows": rows, "table": table, "out_dir": out_dir, "plots": plots,
            "failed": sum(r["status"] != "ok" for r in rows)}


def _fmt_metric(r):
    return "failed" if r["status"] != "ok" else f"{r['psnr']:.2f}/{r['ssim']:.4f}"


def _text_table(header, body):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]
    line = lambda row: " | ".join(str(x).ljust(w) for x, w in zip(row, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in body]) + "\n"


def render_table(grid: ExperimentGrid, rows) -> str:
    """Text table laid out like the usual ablation table for that grid."""
    if grid.name == "components":
        mark = lambda v: "yes" if v else "no"  # noqa: E731
        body = [[mark(r["overrides"]["loss.lambda_dcl"]), mark(r["overrides"]["loss.lambda_ce"]), _fmt_metric(r)]
                for r in rows]
        return _text_table(["DCR", "DMM", "PSNR/SSIM"], body)
    if grid.name == "degradation":
        body = [[f"Random {r['overrides']['dcr.degradation_policy'].capitalize()}", _fmt_metric(r)] for r in rows]
        return _text_table(["Degradation Type", "PSNR/SSIM"], body)
    if grid.mode == "sweep":
        blocks = []
        for key, _ in grid.axes:
            sub = [r for r in rows if key in r["overrides"]]
            blocks.append(_text_table([key] + [str(r["overrides"][key]) for r in sub],
                                      [["PSNR/SSIM"] + [_fmt_metric(r) for r in sub]]))
        return "\n".join(blocks)
    keys = [k for k, _ in grid.axes]
    if len(keys) == 2:
        # row axis down, column axis across
        rk, ck = keys
        lookup = {(r["overrides"][rk], r["overrides"][ck]): r for r in rows}
        rvals = list(dict.fromkeys(r["overrides"][rk] for r in rows))
        cvals = list(dict.fromkeys(r["overrides"][ck] for r in rows))
        body = [[v] + [_fmt_metric(lookup[(v, c)]) for c in cvals] for v in rvals]
        return _text_table([f"{rk} \\ {ck}"] + [str(c) for c in cvals], body)
    return _text_table(keys + ["PSNR/SSIM"], [[r["overrides"][k] for k in keys] + [_fmt_metric(r)] for r in rows])


def plot_grid(grid: ExperimentGrid, rows, out_dir) -> list:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    axes = grid.axes if grid.mode == "sweep" else [(None, None)]
    for key, _ in axes:
        sub = [r for r in rows if key is None or key in r["overrides"]]
        labels = [", ".join(str(v) for v in r["overrides"].values()) for r in sub]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(range(len(sub)), [r["psnr"] for r in sub], marker="o")
        ax.set_xticks(range(len(sub)), labels, rotation=30 if key is None else 0, fontsize=7)
        ax.set_xlabel(key or "cell")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(grid.name)
        fig.tight_layout()
        path = Path(out_dir) / f"plot_{(key or grid.name).replace('.', '_')}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# method comparison

METHOD_PRESETS = {
    "scratch": {"loss.lambda_kd": 0.0, "loss.lambda_dcl": 0.0, "loss.lambda_ce": 0.0},
    "logits": {"loss.lambda_dcl": 0.0, "loss.lambda_ce": 0.0},
    "dckd": {},
}


def compare(named_cfgs, out_dir=None, root=None) -> dict:
    """Train each ``(label, cfg)`` pair and report PSNR/SSIM deltas against the first."""
    if len(named_cfgs) < 2:
        raise ValueError("compare needs at least two configs")
    out_dir = Path(out_dir) if out_dir is not None else (Path(root) if root else runs_root()) / "compare"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for label, cfg in named_cfgs:
        res = run_experiment(cfg, run_dir=out_dir / label)
        s = res["metrics"]["student"]
        rows.append({"method": label, "student_params": param_count(student_arch(cfg)),
                     "teacher_params": param_count(teacher_arch(cfg)), "psnr": s["psnr"], "ssim": s["ssim"],
                     "seed": get(cfg, "seed"), "config_digest": config_digest(cfg)})
    ref = rows[0]
    for r in rows:
        r["d_psnr"] = r["psnr"] - ref["psnr"]
        r["d_ssim"] = r["ssim"] - ref["ssim"]
    header = ["Method", "#Params (S/T)", "PSNR/SSIM", "dPSNR", "dSSIM"]
    body = [[r["method"], f"{r['student_params']}/{r['teacher_params']}", f"{r['psnr']:.2f}/{r['ssim']:.4f}",
             f"{r['d_psnr']:+.3f}", f"{r['d_ssim']:+.4f}"] for r in rows]
    table = _text_table(header, body)
    (out_dir / "report.txt").write_text(table)
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return {"rows": rows, "table": table, "out_dir": out_dir}

"""Command-line pipeline: simulate, clean, describe, fit, forecast, mixed models, residual update, report.

Every artifact goes to ``<output_root>/<config hash>/``; each command also
writes ``manifest_<command>.json`` listing the files it produced with their
SHA-256 digests, package versions and timings.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
import time
import warnings
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import scipy

from sparsefpca import __version__
from sparsefpca.config import RunConfig, default_toml, load_config, with_overrides
from sparsefpca.data import Dataset, apply_cleaning, describe_baseline, ingest_csv, provenance_json, rescale_time, write_csv
from sparsefpca.errors import ConfigError, DataError, NumericalError, SparseFpcaError
from sparsefpca.evaluation import read_forecast_csv, residual_update, subgroup_report, write_forecast_csv
from sparsefpca.fpca import ForecastConfig, fit_reml, fit_mean, forecast_last, select_model, trajectory_rows
from sparsefpca.lmm import LmmSpec, build_design, fit_ml, loo_cv, lrt_biomarker
from sparsefpca.simulate import generate_study, study_truths

log = logging.getLogger("sparsefpca")

COMMANDS = ("clean", "describe", "fpca-fit", "fpca-forecast", "lmm", "residual-update", "simulate", "report")


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Bookkeeping for one command invocation: run directory, produced files, timings."""

    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.command = command
        self.dir = cfg.run_dir()
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []
        self.timings: dict[str, float] = {}
        self.notes: dict = {}
        self._start = time.perf_counter()

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.dir / name

    def timed(self, label: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        out = fn(*args, **kwargs)
        self.timings[label] = round(time.perf_counter() - t0, 6)
        return out

    def finish(self) -> Path:
        (self.dir / "config.toml").write_text(self.cfg.to_toml())
        if "config.toml" not in self.files:
            self.files.append("config.toml")
        self.timings["total"] = round(time.perf_counter() - self._start, 6)
        manifest = {
            "command": self.command,
            "config_hash": self.cfg.hash(),
            "seed": self.cfg.seed,
            "threads": self.cfg.threads,
            "versions": {
                "sparsefpca": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "pandas": pd.__version__,
            },
            "timings_seconds": self.timings,
            "files": [
                {"path": name, "sha256": _sha256(self.dir / name), "bytes": (self.dir / name).stat().st_size}
                for name in self.files
            ],
            "notes": self.notes,
        }
        out = self.dir / f"manifest_{self.command}.json"
        _dump_json(manifest, out)
        return out


# --- inputs ----------------------------------------------------------------


def _raw_input(cfg: RunConfig, run_dir: Path) -> Path:
    if cfg.paths.input:
        path = Path(cfg.paths.input)
        if not path.is_file():
            raise DataError(f"input file not found: {path}")
        return path
    path = run_dir / "simulated.csv"
    if not path.is_file():
        raise DataError(f"no input: set paths.input or run 'simulate' first (looked for {path})")
    return path


def _read(cfg: RunConfig, path: Path) -> Dataset:
    try:
        return ingest_csv(path, schema=cfg.columns, horizon=cfg.cleaning.horizon)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _analysis_data(cfg: RunConfig, run_dir: Path) -> Dataset:
    """Cleaned data when ``clean`` has run, otherwise the raw input."""
    cleaned = run_dir / "cleaned.csv"
    return _read(cfg, cleaned if cleaned.is_file() else _raw_input(cfg, run_dir))


# --- commands --------------------------------------------------------------


def cmd_simulate(run: Run) -> None:
    cfg = run.cfg
    if cfg.seed is None:
        raise ConfigError("simulate needs a seed (--seed N or 'seed' in the config)")
    sim = cfg.simulate
    truths = study_truths(sim.n_subjects, cfg.seed, attendance=sim.attendance, eigen_kind=sim.eigen_kind)
    ds, scores = run.timed("generate", generate_study, truths, seed=cfg.seed)
    write_csv(ds, run.path("simulated.csv"), cfg.columns)
    _dump_json({
        "seed": cfg.seed,
        "truths": {name: tr.to_dict() for name, tr in truths.items()},
        "scores": {name: {s.id: row.tolist() for s, row in zip(ds.subjects, sc)} for name, sc in scores.items()},
    }, run.path("truth.json"))


def cmd_clean(run: Run) -> None:
    cfg = run.cfg
    raw = _read(cfg, _raw_input(cfg, run.dir))
    modeled = tuple(cfg.outcomes) + tuple(cfg.biomarkers)
    cleaned = run.timed("clean", apply_cleaning, raw, cfg.rules, cfg.cleaning.horizon,
                        cfg.cleaning.min_observations, modeled, cfg.cleaning.until_stable)
    write_csv(cleaned, run.path("cleaned.csv"), cfg.columns)
    run.path("provenance.json").write_text(provenance_json(cleaned) + "\n")


def cmd_describe(run: Run) -> None:
    cfg = run.cfg
    ds = _analysis_data(cfg, run.dir)
    table = describe_baseline(ds, tuple(cfg.biomarkers) + tuple(cfg.outcomes))
    table.to_csv(run.path("baseline.csv"), index_label="variable")


def _fpca_data(cfg: RunConfig, run_dir: Path) -> Dataset:
    return rescale_time(_analysis_data(cfg, run_dir), cfg.cleaning.horizon)


def _candidates(cfg: RunConfig):
    return tuple(cfg.fpca.bandwidths) or None


def cmd_fpca_fit(run: Run) -> None:
    cfg, f = run.cfg, run.cfg.fpca
    ds = _fpca_data(cfg, run.dir)
    for outcome in cfg.outcomes:
        if f.rank > 0:
            L, M, bandwidth = f.rank, f.n_basis, None
        else:
            sel = run.timed(f"select_{outcome}", select_model, ds, outcome, f.L_grid, f.M_grid,
                            folds=f.cv_folds or None, candidates=_candidates(cfg))
            L, M, bandwidth = sel.rank, sel.n_basis, sel.bandwidth
            with open(run.path(f"selection_{outcome}.csv"), "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["L", "M", "cv_score", "chosen"])
                for row in sel.table():
                    chosen = (row["L"], row["M"]) == sel.chosen
                    writer.writerow([row["L"], row["M"], repr(float(row["cv_score"])), int(chosen)])
        mean = fit_mean(ds, outcome, bandwidth, candidates=_candidates(cfg))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            model = run.timed(f"fit_{outcome}", fit_reml, ds, outcome, L, M, mean=mean)
        run.path(f"model_{outcome}.json").write_text(model.to_json() + "\n")
        mean_csv = run.path(f"mean_{outcome}.csv")
        mean.write_csv(mean_csv)
        with open(run.path(f"trajectories_{outcome}.csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["subject", "month", "value"])
            for sid, month, value in trajectory_rows(model, ds, outcome, f.trajectory_points):
                writer.writerow([sid, repr(month), repr(value)])


def cmd_fpca_forecast(run: Run) -> None:
    cfg, f = run.cfg, run.cfg.fpca
    ds = _fpca_data(cfg, run.dir)
    fc = ForecastConfig(
        L_grid=tuple(f.L_grid), M_grid=tuple(f.M_grid),
        rank=f.rank or None, n_basis=f.n_basis or None, reselect=f.reselect,
        cv_folds=f.cv_folds or None, bandwidth_candidates=_candidates(cfg),
        min_observations=f.min_observations, threads=cfg.threads,
    )
    for outcome in cfg.outcomes:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            results, selection, failures = run.timed(f"forecast_{outcome}", forecast_last, ds, outcome, fc)
        if not results:
            raise NumericalError(f"{outcome}: every leave-last-out fit failed")
        write_forecast_csv(results, run.path(f"forecast_{outcome}.csv"))
        report = subgroup_report(results, f.null_leave_one_out).to_dict()
        report["outcome"] = outcome
        report["failures"] = failures
        report["rank"], report["n_basis"] = (
            (f.rank, f.n_basis) if selection is None else selection.chosen
        )
        _dump_json(report, run.path(f"eval_{outcome}.json"))


def _lmm_pair(ds: Dataset, spec: LmmSpec) -> dict:
    full_design = build_design(ds, spec)
    null_design = build_design(ds, spec.null())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        full = fit_ml(full_design)
        null = fit_ml(null_design)
        stat, p = lrt_biomarker(full, null)
        cv_full = loo_cv(full_design)
        cv_null = loo_cv(null_design)
    return {
        "outcome": spec.outcome,
        "biomarker": spec.biomarker,
        "transform": spec.transform,
        "n_subjects": full.n_subjects,
        "n_rows": full.n_rows,
        "full": full.to_dict(),
        "null": null.to_dict(),
        "lrt_statistic": stat,
        "p_value": p,
        "cv_mse_full": cv_full.mse,
        "cv_mse_null": cv_null.mse,
        "cv_skipped": {"full": cv_full.skipped, "null": cv_null.skipped},
    }


def cmd_lmm(run: Run) -> None:
    cfg = run.cfg
    ds = _analysis_data(cfg, run.dir)
    pairs, errors = [], []
    for outcome in cfg.outcomes:
        for biomarker in cfg.biomarkers:
            spec = LmmSpec(outcome, biomarker, cfg.lmm.transform, tuple(cfg.lmm.grid_months), cfg.lmm.snap_tol)
            try:
                pairs.append(run.timed(f"{outcome}_{biomarker}", _lmm_pair, ds, spec))
            except (DataError, NumericalError) as exc:
                errors.append({"outcome": outcome, "biomarker": biomarker, "error": str(exc)})
    if not pairs:
        raise DataError("no outcome/biomarker pair could be fitted: " + "; ".join(e["error"] for e in errors))
    _dump_json({"pairs": pairs, "errors": errors}, run.path("lmm_report.json"))


def _biomarker_at(ds: Dataset, subject_id: str, month: float, biomarker: str) -> Optional[float]:
    s = ds.subject(subject_id)
    for o in s.observations:
        if abs(ds.to_months(o.time) - month) <= 1e-9 * max(1.0, abs(month)):
            return o.value(biomarker)
    return None


def cmd_residual_update(run: Run) -> None:
    cfg = run.cfg
    ds = _analysis_data(cfg, run.dir)
    out = {}
    for outcome in cfg.outcomes:
        path = run.dir / f"forecast_{outcome}.csv"
        if not path.is_file():
            raise DataError(f"missing {path.name}: run 'fpca-forecast' first")
        results = read_forecast_csv(path)
        out[outcome] = {}
        for biomarker in cfg.biomarkers:
            values = {r.subject_id: _biomarker_at(ds, r.subject_id, r.t_last, biomarker) for r in results}
            transform = "log" if biomarker in cfg.residual.log_biomarkers else "identity"
            out[outcome][biomarker] = residual_update(results, values, biomarker, transform).to_dict()
    _dump_json(out, run.path("residual_update.json"))


def _write_table(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in row])


def cmd_report(run: Run) -> None:
    cfg = run.cfg
    report: dict = {"config_hash": cfg.hash(), "forecast": {}, "lmm": None, "residual_update": None}
    found = False

    forecast_rows = []
    for outcome in cfg.outcomes:
        path = run.dir / f"eval_{outcome}.json"
        if not path.is_file():
            continue
        found = True
        ev = json.loads(path.read_text())
        g = ev["subgroups"]
        entry = {
            "n": ev["n"], "MSE_null": ev["mse_null"], "MSE_model": ev["mse_model"], "R2": ev["r2"],
            "subgroups": g, "rank": ev["rank"], "n_basis": ev["n_basis"],
        }
        report["forecast"][outcome] = entry
        forecast_rows.append([
            outcome, ev["n"], ev["mse_null"], ev["mse_model"],
            g["near"]["mse"], g["near"]["count"], g["far"]["mse"], g["far"]["count"],
            g["early"]["mse"], g["early"]["count"], g["late"]["mse"], g["late"]["count"], ev["r2"],
        ])
    if forecast_rows:
        _write_table(run.path("table4_forecast.csv"), [
            "outcome", "n", "MSE_null", "MSE_model", "MSE_near", "n_near", "MSE_far", "n_far",
            "MSE_early", "n_early", "MSE_late", "n_late", "R2",
        ], forecast_rows)

    lmm_path = run.dir / "lmm_report.json"
    if lmm_path.is_file():
        found = True
        pairs = json.loads(lmm_path.read_text())["pairs"]
        report["lmm"] = [
            {k: p[k] for k in ("outcome", "biomarker", "lrt_statistic", "p_value", "cv_mse_full", "cv_mse_null")}
            for p in pairs
        ]
        biomarkers = [b for b in cfg.biomarkers if any(p["biomarker"] == b for p in pairs)]
        lookup = {(p["outcome"], p["biomarker"]): p for p in pairs}
        outcomes = [o for o in cfg.outcomes if any(p["outcome"] == o for p in pairs)]
        _write_table(run.path("table2_pvalues.csv"), ["outcome"] + biomarkers, [
            [o] + [lookup[(o, b)]["p_value"] if (o, b) in lookup else None for b in biomarkers] for o in outcomes
        ])
        rows = []
        for o in outcomes:
            for b in biomarkers:
                p = lookup.get((o, b))
                if p is not None:
                    rows.append([o, b, p["n_subjects"], p["cv_mse_null"], p["cv_mse_full"]])
        _write_table(run.path("table3_cv_mse.csv"), ["outcome", "biomarker", "n", "MSE_null", "MSE_biomarker"], rows)

    upd_path = run.dir / "residual_update.json"
    if upd_path.is_file():
        found = True
        upd = json.loads(upd_path.read_text())
        report["residual_update"] = {
            o: {b: {k: v[k] for k in ("n", "slope", "p_value", "mse_original", "mse_updated", "mse_cv", "r2")}
                for b, v in per.items()}
            for o, per in upd.items()
        }
        rows = []
        for o, per in upd.items():
            for b, v in per.items():
                rows.append([o, b, v["n"], v["intercept"], v["slope"], v["p_value"],
                             v["mse_original"], v["mse_updated"], v["mse_cv"], v["r2"]])
        _write_table(run.path("table5_residual_update.csv"), [
            "outcome", "biomarker", "n", "alpha", "beta", "p_value", "MSE_original", "MSE_updated", "MSE_cv", "R2",
        ], rows)

    if (run.dir / "baseline.csv").is_file():
        found = True
        report["baseline_table"] = "baseline.csv"
    if not found:
        raise DataError(f"nothing to report in {run.dir}; run the analysis commands first")
    _dump_json(report, run.path("report.json"))


HANDLERS = {
    "simulate": cmd_simulate,
    "clean": cmd_clean,
    "describe": cmd_describe,
    "fpca-fit": cmd_fpca_fit,
    "fpca-forecast": cmd_fpca_forecast,
    "lmm": cmd_lmm,
    "residual-update": cmd_residual_update,
    "report": cmd_report,
}


def run_command(command: str, cfg: RunConfig) -> Path:
    """Execute one command and return the run directory."""
    if command not in HANDLERS:
        raise ConfigError(f"unknown command {command!r}")
    run = Run(cfg, command)
    HANDLERS[command](run)
    run.finish()
    return run.dir


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsefpca", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="TOML run configuration")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--threads", type=int, help="worker processes (results do not depend on it)")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(exc: SparseFpcaError) -> int:
    err = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
    print(json.dumps(err), file=sys.stderr)
    return exc.exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = with_overrides(cfg, args.seed, args.threads)
        if args.print_config:
            print(default_toml() if args.config is None and args.seed is None and args.threads is None
                  else cfg.to_toml(), end="")
            return 0
        if args.command is None:
            raise ConfigError("no command given")
        run_dir = run_command(args.command, cfg)
    except SparseFpcaError as exc:
        return _fail(exc)
    print(json.dumps({"command": args.command, "run_dir": str(run_dir)}))
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: reproducible runs, flat-file artifacts.

Commands: fit, simulate, bootstrap, vpc, covariate-search, exposures, gof,
compare-groups.  Every run is driven by a JSON config file; randomized
commands demand an explicit seed (config key ``seed`` or ``--seed``).
Artifacts are deterministic: a rerun with the same resolved config is
byte-identical regardless of ``--threads``.

Exit status: 0 success, 1 analysis failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import DEFAULT_LLOQ, load_dataset, write_dataset
from .diagnostics import gof_table, predictions
from .estimate import (
    EvaluationFailure,
    FitSettings,
    ModelSpec,
    ParameterSet,
    covariate_search,
    fit,
    subject_individual_params,
)
from .exposures import exposure_table, subject_exposures
from .model import (
    CovariateEffect,
    DEFAULT_UNBOUND_FRACTION,
    OmegaMatrix,
    SigmaParams,
    ThetaVector,
)
from .simulate import DEFAULT_TIMES, StudyDesign, simulate_dataset
from .stats import compare_groups, report_table
from .validate import bootstrap, bootstrap_table, vpc, vpc_table

EXIT_OK = 0
EXIT_ANALYSIS = 1
EXIT_USAGE = 2

RANDOMIZED_COMMANDS = {"simulate", "bootstrap", "vpc"}


class UsageError(Exception):
    pass


class AnalysisError(Exception):
    pass


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------

def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        with open(p, "r", encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    return cfg


def _model_spec(cfg: dict) -> ModelSpec:
    m = cfg.get("model", {})
    effects = tuple(
        CovariateEffect(e["parameter"], e["covariate"], e["form"], float(e["reference"]))
        for e in m.get("covariates", [])
    )
    try:
        return ModelSpec(
            structural=m.get("structural", "one_compartment_first_order"),
            error_model=m.get("error_model", "proportional"),
            covariate_map=effects,
            etas=tuple(m.get("random_effects", ("cl", "v", "ka"))),
            fixed=frozenset(m.get("fixed", ())),
        )
    except (KeyError, ValueError) as exc:
        raise UsageError(f"bad model spec: {exc}") from None


def _params(cfg: dict, ms: ModelSpec) -> ParameterSet:
    init = cfg.get("init")
    if init is None:
        raise UsageError("config lacks the 'init' parameter block")
    t = init.get("theta", {})
    o = init.get("omega", {})
    s = init.get("sigma", {})
    try:
        theta = ThetaVector(
            cl_f=float(t["cl_f"]),
            v_f=float(t["v_f"]),
            ka=float(t["ka"]),
            wt_exp=float(t.get("wt_exp", 0.0)),
            f_large=float(t.get("f_large", 1.0)),
            extra=tuple(sorted((str(k), float(v)) for k, v in t.get("effects", {}).items())),
        )
        omega = OmegaMatrix(cl=float(o.get("cl", 0.0)), v=float(o.get("v", 0.0)),
                            ka=float(o.get("ka", 0.0)))
        sigma = SigmaParams(model=ms.error_model, prop=float(s.get("proportional", 0.0)),
                            add=float(s.get("additive", 0.0)))
    except KeyError as exc:
        raise UsageError(f"init block lacks {exc}") from None
    except ValueError as exc:
        raise UsageError(f"bad init block: {exc}") from None
    return ParameterSet(theta=theta, omega=omega, sigma=sigma)


def _settings(cfg: dict, compute_se: bool = True) -> FitSettings:
    e = cfg.get("estimation", {})
    return FitSettings(
        ofv_rel_tol=float(e.get("ofv_rel_tol", 1e-6)),
        grad_tol=float(e.get("grad_tol", 1e-3)),
        max_evals=int(e.get("max_evals", 5000)),
        compute_se=bool(e.get("compute_se", compute_se)),
    )


def _dataset(cfg: dict):
    path = cfg.get("dataset")
    if not path:
        raise UsageError("config lacks the 'dataset' path")
    if not Path(path).is_file():
        raise UsageError(f"dataset file not found: {path}")
    return load_dataset(path, lloq=float(cfg.get("lloq", DEFAULT_LLOQ)))


def _require_seed(cfg: dict) -> int:
    seed = cfg.get("seed")
    if seed is None:
        raise UsageError("this command is randomized and requires an explicit seed "
                         "(config key 'seed' or --seed)")
    return int(seed)


def _outdir(cfg: dict) -> Path:
    out = cfg.get("output")
    if not out:
        raise UsageError("config lacks the 'output' directory")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2)


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_manifest(outdir: Path, command: str, cfg: dict) -> None:
    canonical = _canonical(cfg)
    manifest = {
        "command": command,
        "engine_version": __version__,
        "config": cfg,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "seed": cfg.get("seed"),
    }
    _write(outdir / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _fmt(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "" if not np.isfinite(x) else repr(x)


# ---------------------------------------------------------------------------
# Artifact writers
# ---------------------------------------------------------------------------

def _write_fit_artifacts(outdir: Path, ds, ms: ModelSpec, result) -> None:
    shr = result.shrinkage_percent()
    lines = ["PARAM,ESTIMATE,SE,RSE_PCT,CI95_LO,CI95_HI,SHRINKAGE_PCT"]
    for name in result.param_names:
        est = result.estimates[name]
        unc = result.se.get(name)
        if name.startswith("OMEGA_"):
            shrink = shr.get(f"eta_{name[len('OMEGA_'):].lower()}")
        elif name.startswith("SIGMA_"):
            shrink = shr.get("eps")
        else:
            shrink = None
        lines.append(",".join((
            name, _fmt(est),
            _fmt(unc.se) if unc else "",
            _fmt(unc.rse_percent) if unc else "",
            _fmt(unc.ci95[0]) if unc else "",
            _fmt(unc.ci95[1]) if unc else "",
            _fmt(shrink),
        )))
    _write(outdir / "params.csv", "\n".join(lines) + "\n")

    eta_cols = ",".join(f"ETA_{n.upper()}" for n in result.eta_names)
    lines = [f"ID,{eta_cols}"]
    for sid in sorted(result.ebes):
        eta = result.ebes[sid]
        lines.append(",".join([str(sid)] + [repr(float(v)) for v in eta]))
    _write(outdir / "ebes.csv", "\n".join(lines) + "\n")

    _write(outdir / "gof.csv", gof_table(predictions(ds, ms, result)))

    report = {
        "ofv": result.ofv,
        "converged": result.converged,
        "n_function_evals": result.n_function_evals,
        "message": result.message,
        "flagged_subjects": list(result.flagged_subjects),
        "eta_shrinkage_raw": result.eta_shrinkage,
        "eps_shrinkage_raw": result.eps_shrinkage,
    }
    _write(outdir / "fit.json", json.dumps(report, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_fit(cfg: dict) -> int:
    ds = _dataset(cfg)
    ms = _model_spec(cfg)
    init = _params(cfg, ms)
    outdir = _outdir(cfg)
    try:
        result = fit(ds, ms, init, _settings(cfg))
    except (ValueError, EvaluationFailure) as exc:
        raise AnalysisError(str(exc)) from None
    _write_fit_artifacts(outdir, ds, ms, result)
    _write_manifest(outdir, "fit", cfg)
    if not result.converged:
        print(f"WARNING: fit did not converge: {result.message}", file=sys.stderr)
        return EXIT_ANALYSIS
    print(f"fit converged: OFV = {result.ofv:.4f} "
          f"({result.n_function_evals} objective evaluations)")
    return EXIT_OK


def _cmd_simulate(cfg: dict) -> int:
    seed = _require_seed(cfg)
    ms = _model_spec(cfg)
    params = _params(cfg, ms)
    sim_cfg = cfg.get("simulate", {})
    source = sim_cfg.get("covariates_from")
    if isinstance(source, str):
        if not Path(source).is_file():
            raise UsageError(f"covariate source dataset not found: {source}")
        covariates = load_dataset(source, lloq=float(cfg.get("lloq", DEFAULT_LLOQ)))
    elif isinstance(source, list):
        covariates = source
    else:
        raise UsageError("simulate.covariates_from must be a dataset path or an "
                         "explicit list of per-subject covariate objects")
    try:
        design = StudyDesign(
            n_subjects=int(sim_cfg.get("n_subjects", 40)),
            covariates=covariates,
            times=tuple(float(t) for t in sim_cfg.get("times", DEFAULT_TIMES)),
            dose_mg_per_kg=float(sim_cfg.get("dose_mg_per_kg", 0.4)),
            high_volume_fraction=float(sim_cfg.get("high_volume_fraction", 0.5)),
            lloq=float(cfg.get("lloq", DEFAULT_LLOQ)),
        )
    except ValueError as exc:
        raise UsageError(f"bad simulate block: {exc}") from None
    outdir = _outdir(cfg)
    ds = simulate_dataset(design, ms, params, seed)
    write_dataset(ds, outdir / "simulated.csv")
    _write_manifest(outdir, "simulate", cfg)
    print(f"simulated {ds.n_subjects} subjects, {ds.n_observations} observations "
          f"({ds.n_observations - ds.n_usable_observations} below LLOQ)")
    return EXIT_OK


def _cmd_bootstrap(cfg: dict, threads: int) -> int:
    seed = _require_seed(cfg)
    ds = _dataset(cfg)
    ms = _model_spec(cfg)
    init = _params(cfg, ms)
    n = int(cfg.get("bootstrap", {}).get("n", 1000))
    if n <= 0:
        raise UsageError("bootstrap.n must be >= 1")
    outdir = _outdir(cfg)
    try:
        summary = bootstrap(ds, ms, init, n=n, seed=seed, threads=threads,
                            settings=_settings(cfg, compute_se=False))
    except (ValueError, EvaluationFailure) as exc:
        raise AnalysisError(str(exc)) from None
    _write(outdir / "bootstrap.csv", bootstrap_table(summary))
    meta = {
        "n_requested": summary.n_requested,
        "n_converged": summary.n_converged,
        "failure_rate": summary.failure_rate,
        "warning": summary.warning,
    }
    _write(outdir / "bootstrap_meta.json", json.dumps(meta, sort_keys=True, indent=2) + "\n")
    _write_manifest(outdir, "bootstrap", cfg)
    if summary.warning:
        print(f"WARNING: {summary.warning}", file=sys.stderr)
    print(f"bootstrap: {summary.n_converged}/{summary.n_requested} replicates converged")
    return EXIT_OK


def _cmd_vpc(cfg: dict, threads: int) -> int:
    seed = _require_seed(cfg)
    ds = _dataset(cfg)
    ms = _model_spec(cfg)
    params = _params(cfg, ms)
    vpc_cfg = cfg.get("vpc", {})
    n = int(vpc_cfg.get("n", 1000))
    if n <= 0:
        raise UsageError("vpc.n must be >= 1")
    bins = vpc_cfg.get("bins")
    outdir = _outdir(cfg)
    try:
        summary = vpc(ds, ms, params, n=n, seed=seed,
                      bins=int(bins) if bins is not None else None, threads=threads)
    except (ValueError, EvaluationFailure) as exc:
        raise AnalysisError(str(exc)) from None
    _write(outdir / "vpc.csv", vpc_table(summary))
    _write_manifest(outdir, "vpc", cfg)
    print(f"vpc: {summary.n_simulations} simulations, {len(summary.bins)} bins "
          f"({summary.bin_definition})")
    return EXIT_OK


def _cmd_covariate_search(cfg: dict) -> int:
    ds = _dataset(cfg)
    ms = _model_spec(cfg)
    init = _params(cfg, ms)
    sc = cfg.get("covariate_search", {})
    candidates = [tuple(pair) for pair in sc.get("candidates", [])]
    if not all(len(pair) == 2 for pair in candidates):
        raise UsageError("covariate_search.candidates must be [parameter, covariate] pairs")
    outdir = _outdir(cfg)
    try:
        result = covariate_search(
            ds, ms, init, candidates,
            forward_threshold=float(sc.get("forward_threshold", 3.84)),
            backward_threshold=float(sc.get("backward_threshold", 3.84)),
            settings=_settings(cfg, compute_se=False),
        )
    except (ValueError, EvaluationFailure) as exc:
        raise AnalysisError(str(exc)) from None

    lines = ["PHASE,ROUND,EFFECT,DELTA_OFV,THRESHOLD,ACCEPTED,CONVERGED,NOTE"]
    for s in result.trace:
        lines.append(",".join((
            s.phase, str(s.round), s.effect, _fmt(s.delta_ofv), _fmt(s.threshold),
            str(int(s.accepted)), str(int(s.converged)), s.note.replace(",", ";"),
        )))
    _write(outdir / "search_trace.csv", "\n".join(lines) + "\n")
    final = {
        "covariates": [
            {"parameter": e.parameter, "covariate": e.covariate, "form": e.form,
             "reference": e.reference}
            for e in result.model.covariate_map
        ],
        "added_by_search": [e.name for e in result.added],
        "estimates": result.fit.estimates,
        "ofv": result.fit.ofv,
    }
    _write(outdir / "final_model.json", json.dumps(final, sort_keys=True, indent=2) + "\n")
    _write_manifest(outdir, "covariate-search", cfg)
    print(f"covariate search: {len(result.added)} relationship(s) retained, "
          f"final OFV = {result.fit.ofv:.4f}")
    return EXIT_OK


def _cmd_exposures(cfg: dict) -> int:
    ds = _dataset(cfg)
    ms = _model_spec(cfg)
    params = _params(cfg, ms)
    fu = float(cfg.get("exposures", {}).get("unbound_fraction", DEFAULT_UNBOUND_FRACTION))
    outdir = _outdir(cfg)
    try:
        rows = subject_exposures(ds, ms, params, fu=fu)
    except (ValueError, EvaluationFailure) as exc:
        raise AnalysisError(str(exc)) from None
    lines = ["ID,AUC,CMAX,TMAX,CUMAX"]
    for r in rows:
        lines.append(",".join((str(r.subject_id), repr(r.auc), repr(r.cmax),
                               repr(r.tmax), repr(r.cu_max))))
    _write(outdir / "exposures.csv", "\n".join(lines) + "\n")

    table = exposure_table(rows)
    lines = ["METRIC,MEDIAN,Q1,Q3,SUMMARY"]
    for metric, row in table.items():
        lines.append(",".join((metric, _fmt(row["median"]), _fmt(row["q1"]),
                               _fmt(row["q3"]), str(row["summary"]))))
    _write(outdir / "exposures_summary.csv", "\n".join(lines) + "\n")
    _write_manifest(outdir, "exposures", cfg)
    print(f"exposures computed for {len(rows)} subjects")
    return EXIT_OK


def _cmd_gof(cfg: dict) -> int:
    ds = _dataset(cfg)
    ms = _model_spec(cfg)
    params = _params(cfg, ms)
    outdir = _outdir(cfg)
    try:
        rows = predictions(ds, ms, params)
    except (ValueError, EvaluationFailure) as exc:
        raise AnalysisError(str(exc)) from None
    _write(outdir / "gof.csv", gof_table(rows))
    _write_manifest(outdir, "gof", cfg)
    print(f"gof table with {len(rows)} rows written")
    return EXIT_OK


def _load_labels(path: str) -> dict[int, str]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"labels file not found: {path}")
    labels = {}
    with open(p, "r", encoding="utf-8") as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if not lines or lines[0].upper().replace(" ", "") != "ID,LABEL":
        raise UsageError("labels file must be a CSV with header ID,LABEL")
    for line in lines[1:]:
        sid, label = line.split(",", 1)
        labels[int(sid)] = label.strip()
    return labels


def _cmd_compare_groups(cfg: dict) -> int:
    ds = _dataset(cfg)
    ms = _model_spec(cfg)
    params = _params(cfg, ms)
    labels_path = cfg.get("labels")
    if not labels_path:
        raise UsageError("config lacks the 'labels' CSV path (ID,LABEL)")
    labels = _load_labels(labels_path)
    fu = float(cfg.get("exposures", {}).get("unbound_fraction", DEFAULT_UNBOUND_FRACTION))
    outdir = _outdir(cfg)
    try:
        exposures = subject_exposures(ds, ms, params, fu=fu)
        from .estimate import _ebe_core, _omega_diag, compile_subject

        omega_diag = _omega_diag(ms, params.omega)
        values: dict[str, dict[int, float]] = {
            k: {} for k in ("cl", "v", "ka", "auc", "cmax", "tmax", "cu_max")
        }
        for subject, exp_row in zip(ds.subjects, exposures):
            eta, _ = _ebe_core(compile_subject(subject, ms, params), omega_diag)
            p = subject_individual_params(subject, ms, params, eta)
            values["cl"][subject.subject_id] = p.cl
            values["v"][subject.subject_id] = p.v
            values["ka"][subject.subject_id] = p.ka
            values["auc"][subject.subject_id] = exp_row.auc
            values["cmax"][subject.subject_id] = exp_row.cmax
            values["tmax"][subject.subject_id] = exp_row.tmax
            values["cu_max"][subject.subject_id] = exp_row.cu_max
        categories = {
            "sex": {s.subject_id: s.sex for s in ds.subjects},
            "volgrp": {s.subject_id: s.volgrp for s in ds.subjects},
        }
        rows = compare_groups(values, categories, labels)
    except (ValueError, EvaluationFailure) as exc:
        raise AnalysisError(str(exc)) from None
    _write(outdir / "group_report.csv", report_table(rows))
    _write_manifest(outdir, "compare-groups", cfg)
    print(f"group comparison report with {len(rows)} rows written")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poppk",
        description="Population PK engine: estimation, simulation, validation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("fit", "simulate", "bootstrap", "vpc", "covariate-search",
                 "exposures", "gof", "compare-groups"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--output", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="seed (overrides config)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker processes for bootstrap/vpc replicates")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK

    try:
        cfg = _load_config(args.config)
        if args.output is not None:
            cfg["output"] = args.output
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be >= 1")

        if args.command == "fit":
            return _cmd_fit(cfg)
        if args.command == "simulate":
            return _cmd_simulate(cfg)
        if args.command == "bootstrap":
            return _cmd_bootstrap(cfg, args.threads)
        if args.command == "vpc":
            return _cmd_vpc(cfg, args.threads)
        if args.command == "covariate-search":
            return _cmd_covariate_search(cfg)
        if args.command == "exposures":
            return _cmd_exposures(cfg)
        if args.command == "gof":
            return _cmd_gof(cfg)
        if args.command == "compare-groups":
            return _cmd_compare_groups(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AnalysisError as exc:
        print(f"analysis failure: {exc}", file=sys.stderr)
        return EXIT_ANALYSIS


if __name__ == "__main__":
    sys.exit(main())

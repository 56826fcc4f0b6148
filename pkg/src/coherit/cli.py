"""Command-line surface for reproducible batch runs.

Every command resolves its configuration from an optional JSON file plus
flag overrides, writes its artifacts into ``--out``, and finishes with a
``run_manifest.json`` recording the resolved configuration, master seed, and
sha256 checksum of every artifact.  Outputs contain no timestamps and all
parallelism is replicate-level with deterministic reduction, so a rerun with
the same config and seed is byte-identical at any ``--threads`` value.

Exit codes: 0 success, 2 configuration/schema error, 3 unreadable or
unwritable files, 4 non-convergence, 5 unreliable inference, 1 unexpected.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (
    CoheritError,
    ConvergenceError,
    DomainError,
    InferenceUnreliableError,
    PedigreeError,
)
from .estimate import fit as fit_cohort
from .inference import (
    coverage_experiment,
    parametric_bootstrap,
    save_bootstrap_csv,
    save_coverage_csv,
)
from .model import ModelSpec, binary_spec, continuous_spec, mixed_spec
from .pedigree import ReportingErrorMode, load_cohort_csv, save_cohort_csv
from .simulate import (
    SETTINGS,
    apply_reporting_error,
    gen_phenotypes,
    make_cohort,
    param_rng,
    percent_difference,
    run_replicates,
    single_phenotype_truth,
    single_phenotype_view,
    rmse_table,
    target_setting,
    truth_params,
)
from .weights import (
    MissingnessKind,
    assign_family_weights,
    fit_missingness,
    load_weights_csv,
    save_weights_csv,
)

log = logging.getLogger("coherit")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONCONVERGENCE = 4
EXIT_INFERENCE = 5

MODEL_SPECS = {
    "continuous": continuous_spec,
    "binary": binary_spec,
    "mixed": mixed_spec,
}


def _spec_for(model: str) -> ModelSpec:
    try:
        return MODEL_SPECS[model]()
    except KeyError:
        raise DomainError(
            f"unknown model {model!r}; choose from {sorted(MODEL_SPECS)}"
        ) from None


# ---------------------------------------------------------------------------
# config & manifest plumbing
# ---------------------------------------------------------------------------

def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DomainError(f"{path}: invalid JSON config: {exc}") from None
    if not isinstance(cfg, dict):
        raise DomainError(f"{path}: config must be a JSON object")
    return cfg


def _resolve(ns, cfg: dict, keys: dict) -> dict:
    """Merge config-file values and CLI overrides; CLI wins when given."""
    out = {}
    for key, default in keys.items():
        val = getattr(ns, key, None)
        if val is None:
            val = cfg.get(key, default)
        if val is None:
            raise DomainError(f"missing required option --{key.replace('_', '-')}")
        out[key] = val
    unknown = set(cfg) - set(keys) - {"threads", "out"}
    if unknown:
        raise DomainError(f"unknown config keys: {sorted(unknown)}")
    return out


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()


def _json_dump(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _finish(outdir: Path, command: str, config: dict, seed: int, artifacts: list[Path]):
    manifest = {
        "tool": {"name": "coherit", "version": __version__},
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": {p.name: _sha256(p) for p in sorted(artifacts)},
    }
    _json_dump(manifest, outdir / "run_manifest.json")


def _outdir(ns) -> Path:
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_estimates_csv(path: Path, estimates: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("replicate,parameter,value\n")
        for i, est in enumerate(estimates):
            for name in sorted(est):
                fh.write(f"{i},{name},{float(est[name])!r}\n")


def _write_rmse_csv(path: Path, report) -> None:
    from .simulate import param_block

    rmse = report.rmse()
    with open(path, "w", newline="") as fh:
        fh.write("parameter,block,truth,rmse,n_replicates\n")
        for name in sorted(rmse):
            fh.write(
                f"{name},{param_block(name)},{report.truth[name]!r},"
                f"{rmse[name]!r},{len(report.estimates)}\n"
            )


def _write_pct_csv(path: Path, rows: dict, label_a: str, label_b: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"parameter,pct_diff\n")
        fh.write(f"# 100*(RMSE[{label_a}]-RMSE[{label_b}])/RMSE[{label_a}]\n")
        for name in sorted(rows):
            fh.write(f"{name},{rows[name]!r}\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(ns) -> int:
    cfg = _resolve(
        ns,
        _load_config_file(ns.config),
        {
            "model": "continuous",
            "setting": "high,high,low",
            "families": 1000,
            "seed": 0,
            "missing_parent_rate": 0.0,
            "reporting_error_rate": 0.0,
            "reporting_error_mode": "unrelated_children",
        },
    )
    out = _outdir(ns)
    spec = _spec_for(cfg["model"])
    seed = int(cfg["seed"])
    beta, theta = target_setting(cfg["setting"], spec, param_rng(seed))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    template = make_cohort(
        spec, int(cfg["families"]), rng,
        missing_parent_rate=float(cfg["missing_parent_rate"]),
    )
    if float(cfg["reporting_error_rate"]) > 0:
        template = apply_reporting_error(
            template,
            float(cfg["reporting_error_rate"]),
            ReportingErrorMode(cfg["reporting_error_mode"]),
            rng,
        )
    cohort = gen_phenotypes(template, beta, theta, rng)
    data_path = out / "cohort.csv"
    save_cohort_csv(cohort, data_path)
    truth_path = out / "truth.json"
    _json_dump(truth_params(spec, beta, theta), truth_path)
    _finish(out, "simulate", cfg, seed, [data_path, truth_path])
    return EXIT_OK


def _load_data(ns, cfg) -> tuple:
    spec = None if cfg["model"] == "auto" else _spec_for(cfg["model"])
    cohort = load_cohort_csv(cfg["data"], spec=spec)
    if getattr(ns, "weights", None):
        cohort = load_weights_csv(cohort, ns.weights)
    return cohort


def cmd_fit(ns) -> int:
    cfg = _resolve(
        ns, _load_config_file(ns.config), {"data": None, "model": "auto", "seed": 0}
    )
    out = _outdir(ns)
    cohort = _load_data(ns, cfg)
    result = fit_cohort(cohort)
    est_path = out / "estimate.json"
    _json_dump(result.to_json_dict(), est_path)
    _finish(out, "fit", cfg, int(cfg["seed"]), [est_path])
    return EXIT_OK


def cmd_bootstrap(ns) -> int:
    cfg = _resolve(
        ns,
        _load_config_file(ns.config),
        {"data": None, "model": "auto", "boot": 100, "seed": 0},
    )
    out = _outdir(ns)
    cohort = _load_data(ns, cfg)
    result = fit_cohort(cohort)
    est_path = out / "estimate.json"
    _json_dump(result.to_json_dict(), est_path)
    try:
        report = parametric_bootstrap(
            cohort, result, N=int(cfg["boot"]), seed=int(cfg["seed"]),
            threads=ns.threads,
        )
    except InferenceUnreliableError as exc:
        if exc.report is not None:
            save_bootstrap_csv(exc.report, out / "bootstrap_partial.csv")
        raise
    boot_path = out / "bootstrap.csv"
    save_bootstrap_csv(report, boot_path)
    _finish(out, "bootstrap", cfg, int(cfg["seed"]), [est_path, boot_path])
    return EXIT_OK


def cmd_coverage(ns) -> int:
    cfg = _resolve(
        ns,
        _load_config_file(ns.config),
        {
            "model": "continuous",
            "setting": "high,high,low",
            "families": 1000,
            "reps": 100,
            "boot": 100,
            "seed": 0,
        },
    )
    out = _outdir(ns)
    result = coverage_experiment(
        cfg["setting"],
        _spec_for(cfg["model"]),
        int(cfg["families"]),
        M=int(cfg["reps"]),
        N=int(cfg["boot"]),
        seed=int(cfg["seed"]),
        threads=ns.threads,
    )
    cov_path = out / "coverage.csv"
    save_coverage_csv(result, cov_path)
    _finish(out, "coverage", cfg, int(cfg["seed"]), [cov_path])
    return EXIT_OK


def cmd_sensitivity(ns) -> int:
    cfg = _resolve(
        ns,
        _load_config_file(ns.config),
        {
            "model": "continuous",
            "setting": "high,high,low",
            "families": 1000,
            "reps": 100,
            "rate": 0.05,
            "mode": "unrelated_children",
            "seed": 0,
        },
    )
    out = _outdir(ns)
    spec = _spec_for(cfg["model"])
    seed = int(cfg["seed"])
    clean = run_replicates(
        spec, cfg["setting"], int(cfg["families"]), int(cfg["reps"]), seed,
        threads=ns.threads,
    )
    perturbed = run_replicates(
        spec, cfg["setting"], int(cfg["families"]), int(cfg["reps"]), seed,
        threads=ns.threads,
        reporting_error_rate=float(cfg["rate"]),
        reporting_error_mode=ReportingErrorMode(cfg["mode"]),
    )
    artifacts = []
    for name, report in (("clean", clean), ("perturbed", perturbed)):
        p_est = out / f"estimates_{name}.csv"
        _write_estimates_csv(p_est, report.estimates)
        p_rmse = out / f"rmse_{name}.csv"
        _write_rmse_csv(p_rmse, report)
        artifacts += [p_est, p_rmse]
    pct = percent_difference(clean, perturbed)
    pct_path = out / "percent_difference.csv"
    _write_pct_csv(pct_path, pct, "clean", "perturbed")
    artifacts.append(pct_path)
    _finish(out, "sensitivity", cfg, seed, artifacts)
    return EXIT_OK


def cmd_report(ns) -> int:
    """Table-style aggregation: RMSE by cohort size, 500-vs-1000 percent
    differences, and (optionally) integrated-vs-separated comparisons."""
    cfg = _resolve(
        ns,
        _load_config_file(ns.config),
        {
            "model": "continuous",
            "setting": "high,high,low",
            "families": "500,1000",
            "reps": 100,
            "seed": 0,
            "separated": False,
        },
    )
    out = _outdir(ns)
    spec = _spec_for(cfg["model"])
    seed = int(cfg["seed"])
    sizes = [int(s) for s in str(cfg["families"]).split(",") if s]
    artifacts = []
    reports = {}
    for n in sizes:
        rep = run_replicates(spec, cfg["setting"], n, int(cfg["reps"]), seed,
                             threads=ns.threads)
        reports[n] = rep
        p_est = out / f"estimates_n{n}.csv"
        _write_estimates_csv(p_est, rep.estimates)
        p_rmse = out / f"rmse_n{n}.csv"
        _write_rmse_csv(p_rmse, rep)
        artifacts += [p_est, p_rmse]
    if len(sizes) >= 2:
        a, b = sizes[0], sizes[-1]
        pct = percent_difference(reports[a], reports[b])
        p = out / f"percent_difference_n{a}_vs_n{b}.csv"
        _write_pct_csv(p, pct, f"n{a}", f"n{b}")
        artifacts.append(p)
    if cfg["separated"]:
        n = sizes[-1]
        joint = reports[n]
        beta, theta = target_setting(cfg["setting"], spec, param_rng(seed))
        sep_truth = {}
        sep_estimates = [dict() for _ in joint.estimates]
        for k in range(1, spec.K + 1):
            sub_spec, sub_beta, sub_theta = single_phenotype_truth(spec, beta, theta, k)
            t = truth_params(sub_spec, sub_beta, sub_theta)
            remap = _single_param_names(k)
            for key, val in t.items():
                if key in remap:
                    sep_truth[remap[key]] = val
            sep = _separated_estimates(spec, cfg["setting"], n, int(cfg["reps"]),
                                       seed, k, ns.threads)
            for i, est in enumerate(sep):
                if est is None or i >= len(sep_estimates):
                    continue
                for key, val in est.items():
                    if key in remap:
                        sep_estimates[i][remap[key]] = val
        sep_report = rmse_table(sep_truth, [e for e in sep_estimates if e])
        p_sep = out / f"rmse_separated_n{n}.csv"
        _write_rmse_csv(p_sep, sep_report)
        joint_common = rmse_table(
            {k: v for k, v in joint.truth.items() if k in sep_truth},
            [{k: v for k, v in e.items() if k in sep_truth} for e in joint.estimates],
        )
        pct = percent_difference(sep_report, joint_common)
        p_pct = out / f"percent_difference_separated_vs_integrated_n{n}.csv"
        _write_pct_csv(p_pct, pct, "separated", "integrated")
        artifacts += [p_sep, p_pct]
    _finish(out, "report", cfg, seed, artifacts)
    return EXIT_OK


def _single_param_names(k: int) -> dict:
    """Map single-phenotype parameter names onto the joint-model names."""
    return {
        "alpha1": f"alpha{k}",
        **{f"beta1_{j}": f"beta{k}_{j}" for j in range(1, 5)},
        "sigma1": f"sigma{k}",
        "sigma_b1": f"sigma_b{k}",
        "sigma_eps1": f"sigma_eps{k}",
        "h2_1": f"h2_{k}",
    }


def _separated_estimates(spec, setting, n_families, reps, seed, k, threads):
    """Refit each joint replicate cohort restricted to phenotype k."""
    from ._parallel import ordered_map_shared

    beta, theta = target_setting(setting, spec, param_rng(seed))
    shared = (spec, setting, n_families, seed, beta, theta, k)
    return ordered_map_shared(_separated_replicate, shared, range(reps), threads)


def _separated_replicate(shared, r):
    spec, setting, n_families, seed, beta, theta, k = shared
    rng = np.random.default_rng(np.random.SeedSequence((seed, r)))
    template = make_cohort(spec, n_families, rng)
    cohort = gen_phenotypes(template, beta, theta, rng)
    try:
        return fit_cohort(single_phenotype_view(cohort, k)).params()
    except CoheritError:
        return None


def cmd_weights(ns) -> int:
    """Fit a missingness model on a cohort CSV and emit family weights."""
    cfg = _resolve(
        ns,
        _load_config_file(ns.config),
        {"data": None, "kind": "multinomial3", "seed": 0, "clip": 50.0},
    )
    out = _outdir(ns)
    cohort = load_cohort_csv(cfg["data"])
    from .weights import observed_category

    rows, outcome = [], []
    for fam in cohort.families:
        for m in range(fam.n_members):
            rows.append(fam.covariates[0][m])
            outcome.append(observed_category(fam.phenotypes[m]))
    kind = MissingnessKind(cfg["kind"])
    if kind is MissingnessKind.LOGISTIC:
        labels = [1 if c == 0 else 0 for c in outcome]
    else:
        labels = outcome
    model = fit_missingness(np.array(rows), labels, kind)
    rng = np.random.default_rng(np.random.SeedSequence((int(cfg["seed"]), 0)))
    weighted = assign_family_weights(
        cohort, model, rng, clip=(1.0, float(cfg["clip"]))
    )
    w_path = out / "weights.csv"
    save_weights_csv(weighted, w_path)
    _finish(out, "weights", cfg, int(cfg["seed"]), [w_path])
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coherit",
        description="Heritability and coheritability estimation for family cohorts",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--threads", type=int, default=1,
                       help="replicate-level workers (outputs are independent of this)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="generate a synthetic cohort CSV")
    common(p)
    p.add_argument("--model", choices=sorted(MODEL_SPECS))
    p.add_argument("--setting", choices=sorted(SETTINGS))
    p.add_argument("--families", type=int)
    p.add_argument("--missing-parent-rate", dest="missing_parent_rate", type=float)
    p.add_argument("--reporting-error-rate", dest="reporting_error_rate", type=float)
    p.add_argument("--reporting-error-mode", dest="reporting_error_mode",
                   choices=[m.value for m in ReportingErrorMode])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a cohort CSV")
    common(p)
    p.add_argument("--data", help="cohort CSV path")
    p.add_argument("--model", choices=["auto", *sorted(MODEL_SPECS)])
    p.add_argument("--weights", help="family weights CSV")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("bootstrap", help="fit plus parametric-bootstrap CIs")
    common(p)
    p.add_argument("--data")
    p.add_argument("--model", choices=["auto", *sorted(MODEL_SPECS)])
    p.add_argument("--weights")
    p.add_argument("--boot", type=int, help="bootstrap replicates")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("coverage", help="CI coverage experiment")
    common(p)
    p.add_argument("--model", choices=sorted(MODEL_SPECS))
    p.add_argument("--setting", choices=sorted(SETTINGS))
    p.add_argument("--families", type=int)
    p.add_argument("--reps", type=int, help="outer replicates M")
    p.add_argument("--boot", type=int, help="bootstrap replicates N")
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("sensitivity", help="reporting-error RMSE comparison")
    common(p)
    p.add_argument("--model", choices=sorted(MODEL_SPECS))
    p.add_argument("--setting", choices=sorted(SETTINGS))
    p.add_argument("--families", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--rate", type=float, help="reporting-error rate")
    p.add_argument("--mode", choices=[m.value for m in ReportingErrorMode])
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("report", help="RMSE tables across cohort sizes")
    common(p)
    p.add_argument("--model", choices=sorted(MODEL_SPECS))
    p.add_argument("--setting", choices=sorted(SETTINGS))
    p.add_argument("--families", help="comma-separated sizes, e.g. 500,1000")
    p.add_argument("--reps", type=int)
    p.add_argument("--separated", action="store_true", default=None,
                   help="add single-phenotype comparison fits")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("weights", help="fit a missingness model, emit IPW weights")
    common(p)
    p.add_argument("--data")
    p.add_argument("--kind", choices=[k.value for k in MissingnessKind])
    p.add_argument("--clip", type=float)
    p.set_defaults(func=cmd_weights)

    return parser


def _error_payload(kind: str, exc: Exception) -> dict:
    return {"error": kind, "message": str(exc)}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("COHERIT_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    ns = parser.parse_args(argv)
    outdir = Path(ns.out)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        return ns.func(ns)
    except (DomainError, PedigreeError, ValueError) as exc:
        payload = _error_payload("config", exc)
        code = EXIT_CONFIG
    except InferenceUnreliableError as exc:
        payload = _error_payload("inference_unreliable", exc)
        code = EXIT_INFERENCE
    except ConvergenceError as exc:
        payload = _error_payload("non_convergence", exc)
        code = EXIT_NONCONVERGENCE
    except OSError as exc:
        payload = _error_payload("io", exc)
        code = EXIT_IO
    except CoheritError as exc:
        payload = _error_payload("internal", exc)
        code = EXIT_UNEXPECTED
    except Exception as exc:  # pragma: no cover - last resort
        payload = _error_payload("unexpected", exc)
        code = EXIT_UNEXPECTED
    log.error("%s", payload["message"])
    try:
        _json_dump(payload, outdir / "error.json")
    except OSError:
        print(json.dumps(payload), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())

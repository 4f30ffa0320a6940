"""Command-line entry point.

Subcommands map one-to-one onto the pipelines: generate-data writes the
filtered observation dataset, assimilate produces a state estimate for
fixed hyperparameters, select runs one selection method, ensemble
produces the statistics tables, report recomputes the RMSE table, and
validate runs the oracle-equivalence suite. Configs are JSON; dotted
--set overrides are applied on top. Every output embeds the config hash
and master seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_CFL = 3
EXIT_SELECTION = 4


def _config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _provenance(cfg) -> dict:
    return {"config_sha256": _config_hash(cfg.to_dict()),
            "master_seed": cfg.master_seed}


def _prov_comment(prov: dict) -> str:
    return f"config_sha256={prov['config_sha256']} master_seed={prov['master_seed']}"


def _parse_set(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key.strip()] = value
    return out


def _apply_overrides(payload: dict, overrides: dict) -> dict:
    for dotted, value in overrides.items():
        node = payload
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return payload


def _load_config(args) -> "ExperimentConfig":
    from .experiment import ExperimentConfig

    payload: dict = {}
    if args.config:
        with open(args.config) as fh:
            payload = json.load(fh)
    if getattr(args, "experiment", None):
        payload.setdefault("experiment", args.experiment)
    if getattr(args, "covariance", None):
        payload["covariance_kind"] = args.covariance
    if getattr(args, "seed", None) is not None:
        payload["master_seed"] = args.seed
    payload = _apply_overrides(payload, _parse_set(args.set))
    cov_spec = payload.pop("covariance", None)
    cfg = ExperimentConfig.from_dict(payload)
    cfg._cov_spec_payload = cov_spec  # carried for `assimilate`
    return cfg


def _output_dir(args) -> Path:
    out = args.output or os.environ.get("REPVAR_OUTPUT_DIR") or "."
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _emit_error(code: int, kind: str, message: str, **extra) -> int:
    payload = {"error": {"kind": kind, "message": message, **extra}}
    print(json.dumps(payload), file=sys.stderr)
    return code


def _cmd_generate_data(args) -> int:
    from .experiment import build_experiment
    from .observation import ObservationSet, observations_to_csv

    cfg = _load_config(args)
    prov = _provenance(cfg)
    out = _output_dir(args)
    data = build_experiment(cfg)
    xs, ts = data.locations
    obs = ObservationSet(cfg.grid, xs, ts, data.columns[:, 0],
                         data.calibration.sigma, seed=cfg.master_seed)
    observations_to_csv(obs, out / "observations.csv", _prov_comment(prov))
    np.savetxt(out / "dataset.csv", data.columns, delimiter=",",
               header=_prov_comment(prov))
    meta = {
        "rmse_mean": data.calibration.rmse_mean,
        "rmse_std": data.calibration.rmse_std,
        "accept_fraction": data.calibration.accept_fraction,
        "n_scanned": data.calibration.n_scanned,
        "provenance": prov,
    }
    with open(out / "dataset.json", "w") as fh:
        json.dump(meta, fh, indent=1)
    print(f"wrote observations.csv, dataset.csv, dataset.json to {out}")
    return EXIT_OK


def _first_column_problem(cfg, data):
    from .observation import ObservationSet
    from .representer import AssimilationProblem
    from .transport import solve_forward

    xs, ts = data.locations
    obs = ObservationSet(cfg.grid, xs, ts, data.columns[:, 0],
                         data.calibration.sigma, seed=cfg.master_seed)
    q_f = solve_forward(cfg.grid, 1.0, cfg.boundary,
                        source=data.first_guess_sources[0])
    return AssimilationProblem(cfg.model, obs, q_f)


def _cmd_assimilate(args) -> int:
    from .covariance import Isotropic, spec_from_dict
    from .experiment import build_experiment
    from .representer import optimal_estimate, summary_to_json

    cfg = _load_config(args)
    prov = _provenance(cfg)
    out = _output_dir(args)
    spec_payload = getattr(cfg, "_cov_spec_payload", None)
    if spec_payload is None:
        spec = Isotropic(0.5)
    else:
        spec = spec_from_dict(spec_payload)
    data = build_experiment(cfg)
    problem = _first_column_problem(cfg, data)
    system = problem.system(spec)
    est = optimal_estimate(system)
    np.savetxt(out / "qhat.csv", est.values, delimiter=",",
               header=_prov_comment(prov))
    np.savetxt(out / "first_guess.csv", problem.q_F.values, delimiter=",",
               header=_prov_comment(prov))
    summary_to_json(system, out / "summary.json", provenance=prov)
    print(f"wrote qhat.csv, first_guess.csv, summary.json to {out}")
    return EXIT_OK


def _cmd_select(args) -> int:
    from . import param_select as sel
    from .experiment import build_experiment

    cfg = _load_config(args)
    prov = _provenance(cfg)
    out = _output_dir(args)
    data = build_experiment(cfg)
    problem = _first_column_problem(cfg, data)
    method = args.method
    if cfg.covariance_kind == "non_isotropic":
        if method == "gcv":
            result = sel.gcv_select_multi(problem, form=cfg.gcv_form)
        elif method == "chi2":
            result = sel.chi2_select_multi(problem)
        else:
            return _emit_error(EXIT_CONFIG, "config",
                               "the L-curve is not available for the "
                               "non-isotropic covariance", key="method")
    else:
        if method == "lcurve":
            grid_vals = np.geomspace(*cfg.sigma_bounds, cfg.lcurve_points)
            result = sel.lcurve_select(problem, grid_vals)
        elif method == "gcv":
            result = sel.gcv_select_1d(problem, cfg.sigma_bounds, form=cfg.gcv_form)
        else:
            result = sel.chi2_select_1d(problem, cfg.sigma_bounds)

    payload = result.to_dict()
    payload["provenance"] = prov
    with open(out / "selection.json", "w") as fh:
        json.dump(payload, fh, indent=1)
    if method == "lcurve":
        diag = result.diagnostics
        curve = np.column_stack([diag["sigma_grid"], diag["j_data"],
                                 diag["j_mod"], diag["curvature"]])
        np.savetxt(out / "curve.csv", curve, delimiter=",",
                   header=_prov_comment(prov) + "\nsigma_f2,j_data,j_mod,curvature")
    else:
        evals = result.diagnostics.get("evaluations")
        if evals is not None and len(evals):
            np.savetxt(out / "curve.csv", np.asarray(evals), delimiter=",",
                       header=_prov_comment(prov) + "\nsigma_f2,value")
    print(json.dumps({"method": method, "params": result.params,
                      "n_runs": result.n_runs, "flags": result.flags}))
    return EXIT_OK


def _cmd_ensemble(args) -> int:
    from .experiment import report_to_csv, report_to_json, run_ensemble, samples_to_csv

    cfg = _load_config(args)
    prov = _provenance(cfg)
    out = _output_dir(args)
    methods = tuple(args.methods.split(",")) if args.methods else None
    if methods:
        report = run_ensemble(cfg, methods)
    else:
        report = run_ensemble(cfg) if cfg.covariance_kind == "isotropic" \
            else run_ensemble(cfg, ("gcv", "chi2"))
    comment = _prov_comment(prov)
    report_to_csv(report, out / "table2.csv", out / "table3.csv", comment)
    samples_to_csv(report, out / "samples.csv", comment)
    report_to_json(report, out / "ensemble.json", provenance=prov)
    print(f"wrote table2.csv, table3.csv, samples.csv, ensemble.json to {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .experiment import build_experiment, rmse_report
    from .transport import solve_forward

    cfg = _load_config(args)
    prov = _provenance(cfg)
    out = _output_dir(args)
    data = build_experiment(cfg)
    q_f = solve_forward(cfg.grid, 1.0, cfg.boundary,
                        source=data.first_guess_sources[0])
    table = rmse_report(
        data.truth,
        {"first_guess": q_f},
        {"data": (data.columns, data.calibration.truth_values)},
    )
    with open(out / "rmse.csv", "w") as fh:
        fh.write(f"# {_prov_comment(prov)}\n")
        fh.write("name,rmse_mean,rmse_std\n")
        for name, value in table.items():
            if isinstance(value, tuple):
                fh.write(f"{name},{value[0]!r},{value[1]!r}\n")
            else:
                fh.write(f"{name},{value!r},\n")
    print(f"wrote rmse.csv to {out}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    from .validation import run_validation

    checks = run_validation(size=args.size)
    failed = [c for c in checks if not c.passed]
    for check in checks:
        status = "PASS" if check.passed else "FAIL"
        print(f"[{status}] {check.name}: {check.detail}")
    if failed:
        return _emit_error(EXIT_ERROR, "validation",
                           f"{len(failed)} of {len(checks)} checks failed")
    print(f"all {len(checks)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repvar",
        description="Weak-constraint 4D-Var with representers: data "
                    "generation, assimilation, hyperparameter selection, "
                    "twin-experiment ensembles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=False):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--output", help="output directory "
                       "(default $REPVAR_OUTPUT_DIR or cwd)")
        p.add_argument("--experiment", type=int, choices=(1, 2, 3, 4),
                       help="Table-1 experiment id")
        p.add_argument("--covariance", choices=("isotropic", "non_isotropic"))
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--threads", type=int, default=1,
                       help="worker bound for ensemble members")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted-path config override")
        if method:
            p.add_argument("--method", choices=("lcurve", "gcv", "chi2"),
                           default="gcv")

    common(sub.add_parser("generate-data", help="observation dataset CSVs"))
    common(sub.add_parser("assimilate", help="state estimate for fixed "
                                             "hyperparameters"))
    common(sub.add_parser("select", help="hyperparameter selection"), method=True)
    p_ens = sub.add_parser("ensemble", help="Tables 2-5 style statistics")
    common(p_ens)
    p_ens.add_argument("--methods", help="comma-separated method subset")
    common(sub.add_parser("report", help="RMSE table"))
    p_val = sub.add_parser("validate", help="oracle equivalence and invariants")
    p_val.add_argument("--size", choices=("tiny",), default="tiny")
    return parser


_COMMANDS = {
    "generate-data": _cmd_generate_data,
    "assimilate": _cmd_assimilate,
    "select": _cmd_select,
    "ensemble": _cmd_ensemble,
    "report": _cmd_report,
    "validate": _cmd_validate,
}


def main(argv=None) -> int:
    from .experiment import ConfigError
    from .param_select import SelectionError
    from .representer import DegenerateSystemError
    from .transport import CFLError, DomainError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        return _emit_error(EXIT_CONFIG, "config", str(exc), key=exc.key)
    except CFLError as exc:
        return _emit_error(EXIT_CFL, "cfl", str(exc))
    except (SelectionError, DegenerateSystemError) as exc:
        return _emit_error(EXIT_SELECTION, "selection", str(exc))
    except DomainError as exc:
        return _emit_error(EXIT_ERROR, "domain", str(exc))
    except (json.JSONDecodeError, FileNotFoundError, ValueError) as exc:
        return _emit_error(EXIT_CONFIG, "config", str(exc))


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

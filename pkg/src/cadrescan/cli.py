"""Command-line interface for the association-study pipeline.

Subcommands mirror the pipeline stages: validate, train, select, glm, fdr,
ewas, synth, report. Configuration comes from a single JSON study file with
flag overrides for the common knobs; CADRESCAN_OUT sets the default output
directory. On failure the process exits nonzero after printing a
machine-readable error JSON to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from . import __version__
from .associations import GlmOutcome, association_frame, build_association_table
from .dataset import read_survey_csv, validate_dataset, VariableRoles, write_survey_csv
from .glm import GlmSpec, fit_weighted_glm
from .model import harden, memberships, params_from_dict, params_to_dict
from .pipeline import StudyConfig, emit_report, prepare_category, run_ewas
from .selection import select_model
from .synth import SyntheticSpec, generate_synthetic
from .training import TrainConfig, fit_scm


def _default_out() -> str:
    return os.environ.get("CADRESCAN_OUT", "cadrescan-out")


def _load_config(path: str, args: argparse.Namespace) -> StudyConfig:
    config = StudyConfig.from_json(path)
    if getattr(args, "alpha", None) is not None:
        config.alpha = args.alpha
    if getattr(args, "parallelism", None) is not None:
        config.parallelism = args.parallelism
    if getattr(args, "seed", None) is not None:
        config.train = dataclasses.replace(config.train, seed=args.seed)
    if getattr(args, "out_dir", None) is not None:
        config.output_dir = args.out_dir
    return config


def _load_data(args: argparse.Namespace, config: StudyConfig):
    return read_survey_csv(args.data, config.response_cols, config.response)


def _emit(payload, path: str | None) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


def _cmd_validate(args) -> int:
    config = _load_config(args.config, args)
    data = _load_data(args, config)
    violations = validate_dataset(data)
    _emit({"valid": not violations, "violations": violations}, args.out)
    return 0 if not violations else 1


def _train_config_from_args(base: TrainConfig, args) -> TrainConfig:
    overrides = {f.name: getattr(args, f.name)
                 for f in dataclasses.fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    return dataclasses.replace(base, **overrides)


def _prepped_factor_data(config: StudyConfig, data, factor: str):
    for category in sorted(config.category_map):
        factors = config.category_map[category]
        if factor in factors:
            prepped, _ = prepare_category(data, config, factors)
            return prepped
    raise ValueError(f"risk factor {factor!r} is not in any category")


def _cmd_train(args) -> int:
    config = _load_config(args.config, args)
    data = _load_data(args, config)
    prepped = _prepped_factor_data(config, data, args.risk_factor)
    roles = VariableRoles.from_names(prepped, config.control_cols, args.risk_factor)
    result = fit_scm(prepped, roles, _train_config_from_args(config.train, args))
    _emit({
        "params": params_to_dict(result.params),
        "final_objective": result.final_objective,
        "converged": result.converged,
        "objective_trace": [[s, v] for s, v in result.objective_trace],
    }, args.out)
    return 0


def _cmd_select(args) -> int:
    config = _load_config(args.config, args)
    data = _load_data(args, config)
    prepped = _prepped_factor_data(config, data, args.risk_factor)
    roles = VariableRoles.from_names(prepped, config.control_cols, args.risk_factor)
    selected = select_model(prepped, roles, config.selection, config.train)
    report = {}
    for m, sel in sorted(selected.items()):
        entry = {"admissible": sel.admissible, "bic": sel.bic,
                 "rejected_reason": sel.rejected_reason,
                 "candidates": [vars(c).copy() for c in sel.candidates]}
        if sel.fitted is not None:
            entry["params"] = params_to_dict(sel.fitted.params)
            entry["entropies"] = sel.fitted.entropies.tolist()
        report[str(m)] = entry
    _emit(report, args.out)
    return 0


def _cmd_glm(args) -> int:
    config = _load_config(args.config, args)
    data = _load_data(args, config)
    prepped = _prepped_factor_data(config, data, args.risk_factor)
    labels = None
    if args.model:
        payload = json.loads(Path(args.model).read_text())
        params = params_from_dict(payload.get("params", payload))
        roles = VariableRoles.from_names(prepped, config.control_cols,
                                         args.risk_factor)
        labels = harden(memberships(prepped.features[:, roles.cadre_idx], params))
    family = "logistic" if config.response == "hyp" else "linear"
    cadre = "all" if args.cadre == "all" else int(args.cadre)
    fits = {}
    for response_col in config.response_cols:
        spec = GlmSpec(family, response_col,
                       (args.risk_factor, *config.control_cols),
                       cadre_filter=cadre)
        fit = fit_weighted_glm(prepped, spec, labels)
        fits[response_col] = {
            "coefficients": dict(zip(fit.coef_names, fit.coefficients.tolist())),
            "std_errors": dict(zip(fit.coef_names, fit.std_errors.tolist())),
            "p_values": dict(zip(fit.coef_names, fit.p_values.tolist())),
            "n_obs": fit.n_obs, "n_strata": fit.n_strata,
            "n_varunits": fit.n_varunits, "converged": fit.converged,
        }
    _emit(fits, args.out)
    return 0


def _cmd_fdr(args) -> int:
    rows = json.loads(Path(args.outcomes).read_text())
    outcomes = [GlmOutcome(**row) for row in rows]
    records = build_association_table(outcomes, args.alpha, args.family)
    frame = association_frame(records)
    if args.out:
        frame.to_csv(args.out, index=False)
    else:
        print(frame.to_csv(index=False), end="")
    return 0


def _cmd_ewas(args) -> int:
    config = _load_config(args.config, args)
    data = _load_data(args, config)
    result = run_ewas(config, data)
    paths = emit_report(result.run, config.output_dir)
    n_sig = sum(1 for r in result.records if r.significant)
    _emit({"records": len(result.records), "significant": n_sig,
           "output_dir": str(config.output_dir),
           "files": {k: str(v) for k, v in paths.items()}}, None)
    return 0


def _cmd_synth(args) -> int:
    spec_payload = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if args.seed is not None:
        spec_payload["seed"] = args.seed
    if "slopes" in spec_payload:
        spec_payload["slopes"] = tuple(spec_payload["slopes"])
    spec = SyntheticSpec(**spec_payload)
    data, truth = generate_synthetic(spec)
    write_survey_csv(data, args.out)
    if args.truth:
        Path(args.truth).write_text(json.dumps({
            "labels": truth.labels.tolist(),
            "slopes": truth.slopes.tolist(),
            "control_effects": truth.control_effects.tolist(),
            "centers": truth.centers.tolist(),
        }, indent=2))
    return 0


def _cmd_report(args) -> int:
    run = json.loads(Path(args.run).read_text())
    out_dir = args.out_dir or _default_out()
    paths = emit_report(run, out_dir)
    _emit({k: str(v) for k, v in paths.items()}, None)
    return 0


def _add_data_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="subject-per-row CSV")
    p.add_argument("--config", required=True, help="study config JSON")
    p.add_argument("--seed", type=int, help="override the base seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cadrescan",
        description="Subpopulation-aware survey-weighted association studies.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a dataset against its config")
    _add_data_config(p)
    p.add_argument("--out", help="write the validation report JSON here")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("train", help="fit one cadre model for one risk factor")
    _add_data_config(p)
    p.add_argument("--risk-factor", required=True)
    p.add_argument("--out", help="write the fit JSON here")
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue  # shared --seed flag already covers it
        flag = "--" + f.name.replace("_", "-")
        kind = float if f.type == "float" else int
        p.add_argument(flag, type=kind, default=None,
                       help=f"TrainConfig.{f.name} (default {f.default})")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("select", help="BIC grid search for one risk factor")
    _add_data_config(p)
    p.add_argument("--risk-factor", required=True)
    p.add_argument("--out", help="write the selection report JSON here")
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("glm", help="survey-weighted GLM for one risk factor")
    _add_data_config(p)
    p.add_argument("--risk-factor", required=True)
    p.add_argument("--model", help="cadre model JSON for per-cadre fits")
    p.add_argument("--cadre", default="all", help="cadre index or 'all'")
    p.add_argument("--out", help="write the fit JSON here")
    p.set_defaults(func=_cmd_glm)

    p = sub.add_parser("fdr", help="BH-adjust saved GLM outcomes")
    p.add_argument("--outcomes", required=True, help="JSON list of outcome rows")
    p.add_argument("--alpha", type=float, default=0.02)
    p.add_argument("--family", default="pooled", choices=["pooled", "per-response"])
    p.add_argument("--out", help="write the association CSV here")
    p.set_defaults(func=_cmd_fdr)

    p = sub.add_parser("ewas", help="run the full two-stage study")
    _add_data_config(p)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--out-dir", default=None,
                   help=f"output directory (default {_default_out()!r})")
    p.set_defaults(func=_cmd_ewas)

    p = sub.add_parser("synth", help="generate a synthetic survey dataset")
    p.add_argument("--spec", help="SyntheticSpec JSON (defaults used if omitted)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="CSV path to write")
    p.add_argument("--truth", help="write generating ground truth JSON here")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("report", help="re-emit report files from a saved run")
    p.add_argument("--run", required=True, help="run.json from a previous study")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_report)
    return parser


def _fail(message: str, kind: str = "error") -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        raise
    except Exception as exc:
        return _fail(str(exc), kind=type(exc).__name__)


if __name__ == "__main__":
    sys.exit(main())

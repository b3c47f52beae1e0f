"""End-to-end association study: preprocess, select, per-cadre GLMs, FDR.

For every category of risk factors the pipeline log-transforms the
configured exposure columns, standardizes the continuous covariates (plus
the response for the regression study), and then scans each factor: an
entropy-constrained BIC grid search picks a cadre model per cadre count,
each hardened cadre gets survey-weighted GLMs, and all raw p-values are
pooled into one Benjamini-Hochberg family. Factor-level failures are
recorded and skipped; the run is deterministic for a fixed base seed, with
per-factor seeds derived from factor names so workers and ordering cannot
change results.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from .associations import (AssociationRecord, GlmOutcome, association_frame,
                           build_association_table)
from .dataset import (SurveyDataset, VariableRoles, log_transform_exposures,
                      standardize_fit_apply, validate_dataset)
from .glm import GlmSpec, RankDeficientError, fit_weighted_glm
from .model import params_to_dict
from .selection import SelectionConfig, SelectedModel, derive_seed, select_model
from .training import TrainConfig

#: half-width multiplier for the forest-plot confidence intervals
CI_MULTIPLIER = 1.96


class StudyError(RuntimeError):
    """Raised when a study cannot start (bad config or invalid dataset)."""


@dataclass
class StudyConfig:
    """Everything needed to run one association study."""

    response: str  # "hyp" | "cbp"
    response_cols: tuple[str, ...]
    control_cols: tuple[str, ...]
    category_map: dict[str, tuple[str, ...]]
    log_exposure_cols: tuple[str, ...] = ()
    standardize_response: bool | None = None
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    alpha: float = 0.02
    family: str = "pooled"
    output_dir: str | None = None
    parallelism: int = 1

    def __post_init__(self):
        if self.output_dir is None:
            self.output_dir = os.environ.get("CADRESCAN_OUT", "cadrescan-out")
        if self.response not in ("hyp", "cbp"):
            raise StudyError(f"unknown response {self.response!r}")
        if not 0 < self.alpha < 1:
            raise StudyError("alpha must lie in (0, 1)")
        if self.parallelism < 1:
            raise StudyError("parallelism must be at least 1")
        self.response_cols = tuple(self.response_cols)
        self.control_cols = tuple(self.control_cols)
        self.category_map = {k: tuple(v) for k, v in self.category_map.items()}
        controls = set(self.control_cols)
        for category, factors in self.category_map.items():
            overlap = controls & set(factors)
            if overlap:
                raise StudyError(
                    f"category {category!r} overlaps controls: {sorted(overlap)}")
        self.log_exposure_cols = tuple(self.log_exposure_cols)
        if self.standardize_response is None:
            self.standardize_response = self.response == "cbp"

    @classmethod
    def from_dict(cls, payload: dict) -> "StudyConfig":
        payload = dict(payload)
        if "selection" in payload:
            sel = dict(payload["selection"])
            if "lambda_grid" in sel:
                sel["lambda_grid"] = tuple(tuple(p) for p in sel["lambda_grid"])
            payload["selection"] = SelectionConfig(**sel)
        if "train" in payload:
            payload["train"] = TrainConfig(**payload["train"])
        return cls(**payload)

    @classmethod
    def from_json(cls, path) -> "StudyConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        # JSON round trip canonicalizes tuples to lists at every depth
        return json.loads(json.dumps(asdict(self)))


def _binary_columns(data: SurveyDataset, cols) -> set[int]:
    binary = set()
    for c in cols:
        vals = np.unique(data.features[:, c])
        if np.isin(vals, (0.0, 1.0)).all():
            binary.add(c)
    return binary


def prepare_category(data: SurveyDataset, config: StudyConfig,
                     factors) -> tuple[SurveyDataset, dict[str, float]]:
    """Per-category preprocessing: exposure log transform, standardization."""
    log_cols = [data.col_index(f) for f in factors if f in config.log_exposure_cols]
    epsilons: dict[str, float] = {}
    prepped = data
    if log_cols:
        prepped, epsilons = log_transform_exposures(prepped, log_cols)
    cols = [data.col_index(c) for c in (*config.control_cols, *factors)]
    cols = [c for c in cols if c not in _binary_columns(data, cols)]
    include_response = config.standardize_response and data.task == "cbp"
    prepped, _ = standardize_fit_apply(prepped, cols, include_response)
    return prepped, epsilons


def _response_specs(config: StudyConfig, factor: str) -> list[tuple[str, GlmSpec]]:
    covariates = (factor, *config.control_cols)
    if config.response == "hyp":
        name = config.response_cols[0]
        return [(name, GlmSpec("logistic", name, covariates))]
    return [(name, GlmSpec("linear", name, covariates))
            for name in config.response_cols]


def _selection_summary(selected: dict[int, SelectedModel]) -> dict:
    summary = {}
    for m, sel in sorted(selected.items()):
        entry = {
            "admissible": sel.admissible,
            "bic": sel.bic,
            "rejected_reason": sel.rejected_reason,
            "candidates": [vars(c).copy() for c in sel.candidates],
        }
        if sel.fitted is not None:
            entry.update({
                "lambda_d": sel.fitted.lambda_d,
                "lambda_w": sel.fitted.lambda_w,
                "entropies": sel.fitted.entropies.tolist(),
                "final_objective": sel.fitted.train.final_objective,
                "converged": sel.fitted.train.converged,
            })
        summary[str(m)] = entry
    return summary


def _scan_factor(args) -> dict:
    """Worker: full scan of one risk factor. Must stay picklable."""
    data, config, category, factor = args
    result = {"factor": factor, "category": category, "outcomes": [],
              "selection": {}, "models": {}, "summaries": [], "errors": []}
    try:
        roles = VariableRoles.from_names(data, config.control_cols, factor)
        base = replace(config.train, seed=derive_seed(config.train.seed,
                                                      "factor", factor))
        selected = select_model(data, roles, config.selection, base)
        result["selection"] = _selection_summary(selected)
        control_names = [data.column_names[c] for c in roles.controls]
        for m, sel in sorted(selected.items()):
            if not sel.admissible or sel.fitted is None:
                continue
            labels = sel.fitted.assignment.hard_labels
            result["models"][f"{factor}::m{m}"] = {
                "params": params_to_dict(sel.fitted.params),
                "bic": sel.bic,
                "entropies": sel.fitted.entropies.tolist(),
                "lambda_d": sel.fitted.lambda_d,
                "lambda_w": sel.fitted.lambda_w,
            }
            for cadre in range(1, m + 1):
                members = labels == cadre
                w = data.weights[members]
                summary = {"factor": factor, "m": m, "cadre": cadre,
                           "n_members": int(members.sum())}
                for name, c in zip(control_names, roles.controls):
                    summary[name] = float(
                        w @ data.features[members, c] / w.sum())
                result["summaries"].append(summary)
                for response_name, spec in _response_specs(config, factor):
                    spec = replace(spec, cadre_filter=cadre)
                    try:
                        fit = fit_weighted_glm(data, spec, labels)
                    except (RankDeficientError, ValueError) as exc:
                        result["errors"].append(
                            f"glm {response_name} m={m} cadre={cadre}: {exc}")
                        continue
                    j = fit.coef_names.index(factor)
                    result["outcomes"].append(GlmOutcome(
                        risk_factor=factor, response=response_name, m=m,
                        cadre=cadre, coefficient=float(fit.coefficients[j]),
                        std_error=float(fit.std_errors[j]),
                        p_value=float(fit.p_values[j])))
    except Exception as exc:  # factor isolation: record, never abort the run
        result["errors"].append(f"{type(exc).__name__}: {exc}")
    return result


@dataclass
class StudyResult:
    records: list[AssociationRecord]
    run: dict

    @property
    def significant(self) -> list[AssociationRecord]:
        return [r for r in self.records if r.significant]


def run_ewas(config: StudyConfig, data: SurveyDataset) -> StudyResult:
    """Execute the full two-stage study over every configured risk factor."""
    missing = [c for c in (*config.control_cols, *config.response_cols)
               if c not in data.column_names + data.response_names]
    for factors in config.category_map.values():
        missing += [f for f in factors if f not in data.column_names]
    if missing:
        raise StudyError(f"dataset lacks configured columns: {sorted(set(missing))}")
    violations = validate_dataset(data)
    if violations:
        raise StudyError("invalid dataset: " + "; ".join(violations[:5]))

    work: list[tuple] = []
    log_records: dict[str, dict[str, float]] = {}
    for category in sorted(config.category_map):
        factors = config.category_map[category]
        prepped, epsilons = prepare_category(data, config, factors)
        if epsilons:
            log_records[category] = epsilons
        for factor in sorted(factors):
            work.append((prepped, config, category, factor))

    if config.parallelism > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=config.parallelism) as pool:
            raw_results = list(pool.map(_scan_factor, work))
    else:
        raw_results = [_scan_factor(item) for item in work]
    by_factor = {r["factor"]: r for r in raw_results}

    outcomes, reports, models, summaries = [], {}, {}, []
    for factor in sorted(by_factor):
        r = by_factor[factor]
        outcomes.extend(r["outcomes"])
        models.update(r["models"])
        summaries.extend(r["summaries"])
        reports[factor] = {"category": r["category"],
                           "selection": r["selection"], "errors": r["errors"]}
    outcomes.sort(key=lambda o: (o.risk_factor, o.response, o.m, o.cadre))
    records = build_association_table(outcomes, config.alpha, config.family)

    # cadre-weight vectors are aligned to controls in dataset column order
    control_order = [data.column_names[c] for c in
                     sorted(data.col_index(c) for c in config.control_cols)]
    run = {
        "config": config.to_dict(),
        "task": data.task,
        "control_cols": control_order,
        "records": [vars(r).copy() for r in records],
        "factor_reports": reports,
        "models": models,
        "cadre_summaries": summaries,
        "log_transforms": log_records,
    }
    return StudyResult(records=records, run=run)


def emit_report(run: dict, output_dir) -> dict[str, Path]:
    """Write the association table and companion report files.

    Emits CSV/JSON association tables, forest-plot data (coefficient and
    1.96-standard-error interval per significant record), the
    cadre-assignment weight matrix of models backing significant records,
    per-cadre weighted control summaries, selection reports, and the
    serialized models.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}

    frame = association_frame(
        [AssociationRecord(**r) for r in run["records"]])
    paths["associations_csv"] = out / "associations.csv"
    frame.to_csv(paths["associations_csv"], index=False)
    paths["associations_json"] = out / "associations.json"
    paths["associations_json"].write_text(
        json.dumps(run["records"], indent=2, sort_keys=True))

    signif = frame[frame["significant"]]
    forest = pd.DataFrame({
        "risk_factor": signif["risk_factor"], "response": signif["response"],
        "m": signif["m"], "cadre": signif["cadre"],
        "coefficient": signif["coefficient"],
        "ci_low": signif["coefficient"] - CI_MULTIPLIER * signif["std_error"],
        "ci_high": signif["coefficient"] + CI_MULTIPLIER * signif["std_error"],
    })
    paths["forest_csv"] = out / "forest.csv"
    forest.to_csv(paths["forest_csv"], index=False)

    task = run.get("task", "cbp")
    signif_models = sorted({
        f"{r['risk_factor']}::m{r['m']}" for r in run["records"] if r["significant"]})
    weight_cols = {}
    for key in signif_models:
        model = run["models"].get(key)
        if model is None:
            continue
        factor, m = key.split("::m")
        weight_cols[f"{factor}-{task}-{m}"] = model["params"]["d"]
    weights_frame = pd.DataFrame(weight_cols, index=run.get("control_cols", []))
    paths["cadre_weights_csv"] = out / "cadre_weights.csv"
    weights_frame.to_csv(paths["cadre_weights_csv"], index_label="control")

    paths["cadre_summaries_csv"] = out / "cadre_summaries.csv"
    pd.DataFrame(run["cadre_summaries"]).to_csv(paths["cadre_summaries_csv"],
                                                index=False)

    paths["selection_reports_json"] = out / "selection_reports.json"
    paths["selection_reports_json"].write_text(
        json.dumps(run["factor_reports"], indent=2, sort_keys=True))

    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    for key in sorted(run["models"]):
        factor, m = key.split("::m")
        path = models_dir / f"{factor}__m{m}.json"
        path.write_text(json.dumps(run["models"][key], indent=2, sort_keys=True))
    paths["models_dir"] = models_dir

    paths["run_json"] = out / "run.json"
    paths["run_json"].write_text(json.dumps(run, indent=2, sort_keys=True))
    return paths

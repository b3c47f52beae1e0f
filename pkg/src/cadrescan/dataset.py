"""Survey dataset container, variable roles, and deterministic preprocessing.

A dataset is one row per subject: a numeric feature matrix, one response
column (binary, coded -1/+1) or two (continuous), and the three survey-design
columns (weight, stratum, variance unit). Preprocessing is limited to the two
transforms the modeling stages expect: a per-column log transform for
exposure variables and unweighted mean/sd standardization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

#: Reserved CSV column names for the survey design.
WEIGHT_COL = "weight"
STRATUM_COL = "stratum"
VARUNIT_COL = "varunit"


class DatasetError(ValueError):
    """Raised when a dataset or transform request is structurally invalid."""


@dataclass
class SurveyDataset:
    """Feature matrix plus responses and complex-survey design columns.

    features: (n, p) float matrix, column order matches ``column_names``.
    responses: (n, p_y) float matrix; p_y=1 with values in {-1,+1} for the
        classification task, p_y=2 continuous for the regression task.
    weights: (n,) strictly positive survey weights.
    strata / varunits: (n,) categorical ids (any hashable dtype).
    task: "hyp" (classification) or "cbp" (regression).
    """

    features: np.ndarray
    responses: np.ndarray
    weights: np.ndarray
    strata: np.ndarray
    varunits: np.ndarray
    column_names: list[str]
    response_names: list[str]
    task: str = "cbp"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.responses = np.asarray(self.responses, dtype=float)
        if self.responses.ndim == 1:
            self.responses = self.responses[:, None]
        self.weights = np.asarray(self.weights, dtype=float)
        self.strata = np.asarray(self.strata)
        self.varunits = np.asarray(self.varunits)
        n = self.features.shape[0]
        for name, arr in (("responses", self.responses), ("weights", self.weights),
                          ("strata", self.strata), ("varunits", self.varunits)):
            if arr.shape[0] != n:
                raise DatasetError(f"{name} has {arr.shape[0]} rows, expected {n}")
        if self.features.shape[1] != len(self.column_names):
            raise DatasetError("column_names length does not match feature matrix")
        if self.responses.shape[1] != len(self.response_names):
            raise DatasetError("response_names length does not match response matrix")
        if self.task not in ("hyp", "cbp"):
            raise DatasetError(f"unknown task {self.task!r}")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]

    @property
    def p_y(self) -> int:
        return self.responses.shape[1]

    def col_index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise DatasetError(f"no such column: {name!r}") from None

    def subset(self, mask: np.ndarray) -> "SurveyDataset":
        """Row subset (boolean mask or index array); shares column metadata."""
        return replace(
            self,
            features=self.features[mask],
            responses=self.responses[mask],
            weights=self.weights[mask],
            strata=self.strata[mask],
            varunits=self.varunits[mask],
        )


@dataclass(frozen=True)
class VariableRoles:
    """Index sets steering the cadre-assignment and prediction stages.

    The study convention: cadre assignment uses exactly the control columns,
    prediction uses the controls plus the single risk factor.
    """

    cadre_idx: np.ndarray
    target_idx: np.ndarray
    risk_factor: int
    controls: np.ndarray

    @classmethod
    def from_controls(cls, controls, risk_factor: int) -> "VariableRoles":
        controls = np.asarray(sorted(int(c) for c in controls), dtype=int)
        risk_factor = int(risk_factor)
        if risk_factor in controls:
            raise DatasetError("risk factor must not be one of the controls")
        target = np.append(controls, risk_factor)
        return cls(cadre_idx=controls, target_idx=target,
                   risk_factor=risk_factor, controls=controls)

    @classmethod
    def from_names(cls, data: SurveyDataset, control_names, risk_name: str) -> "VariableRoles":
        return cls.from_controls(
            [data.col_index(c) for c in control_names], data.col_index(risk_name)
        )

    @property
    def p_cadre(self) -> int:
        return len(self.cadre_idx)

    @property
    def p_target(self) -> int:
        return len(self.target_idx)

    @property
    def risk_pos_in_target(self) -> int:
        """Position of the risk factor within the target index set."""
        return int(np.where(self.target_idx == self.risk_factor)[0][0])


@dataclass
class StandardizerState:
    """Per-column centering/scaling state; invertible to 1e-10 relative."""

    mean: np.ndarray
    scale: np.ndarray
    cols: np.ndarray
    response_mean: np.ndarray | None = None
    response_scale: np.ndarray | None = None

    @property
    def standardized_response(self) -> bool:
        return self.response_mean is not None

    def apply(self, data: SurveyDataset) -> SurveyDataset:
        feats = data.features.copy()
        feats[:, self.cols] = (feats[:, self.cols] - self.mean) / self.scale
        resp = data.responses
        if self.standardized_response:
            resp = (resp - self.response_mean) / self.response_scale
        return replace(data, features=feats, responses=resp)

    def invert(self, data: SurveyDataset) -> SurveyDataset:
        feats = data.features.copy()
        feats[:, self.cols] = feats[:, self.cols] * self.scale + self.mean
        resp = data.responses
        if self.standardized_response:
            resp = resp * self.response_scale + self.response_mean
        return replace(data, features=feats, responses=resp)


def _column_scale(values: np.ndarray) -> float:
    # Constant columns get scale 1 so the transform stays invertible.
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
    return sd if sd > 0 else 1.0


def standardize_fit_apply(
    data: SurveyDataset, cols, include_response: bool = False
) -> tuple[SurveyDataset, StandardizerState]:
    """Center selected columns to mean 0 and sample sd 1 (unweighted).

    Binary indicator columns are the caller's responsibility to exclude.
    With ``include_response`` the response matrix is standardized too
    (regression studies standardize the response alongside the features).
    """
    cols = np.asarray(sorted(int(c) for c in cols), dtype=int)
    mean = data.features[:, cols].mean(axis=0)
    scale = np.array([_column_scale(data.features[:, c]) for c in cols])
    state = StandardizerState(mean=mean, scale=scale, cols=cols)
    if include_response:
        state.response_mean = data.responses.mean(axis=0)
        state.response_scale = np.array(
            [_column_scale(data.responses[:, k]) for k in range(data.p_y)]
        )
    return state.apply(data), state


def log_transform_exposures(
    data: SurveyDataset, exposure_cols
) -> tuple[SurveyDataset, dict[str, float]]:
    """Replace each exposure value x with ln(x + eps).

    eps is 0 when the column is strictly positive, otherwise half the
    smallest positive value in that column (limit-of-detection convention).
    Returns the transformed dataset and the eps used per column, for
    report traceability.
    """
    feats = data.features.copy()
    epsilons: dict[str, float] = {}
    for c in exposure_cols:
        c = int(c)
        name = data.column_names[c]
        col = feats[:, c]
        if np.any(col < 0):
            bad = int(np.argmax(col < 0))
            raise DatasetError(
                f"column {name!r} has a negative exposure value at row {bad}"
            )
        positive = col[col > 0]
        if positive.size == 0:
            raise DatasetError(f"column {name!r} is all zero; cannot log transform")
        eps = 0.0 if np.all(col > 0) else float(positive.min()) / 2.0
        feats[:, c] = np.log(col + eps)
        epsilons[name] = eps
    return replace(data, features=feats), epsilons


def validate_dataset(data: SurveyDataset, roles: VariableRoles | None = None) -> list[str]:
    """Collect structural violations; an empty list means the dataset is valid.

    Never raises: callers decide what to do with the report.
    """
    violations: list[str] = []
    bad_cells = np.argwhere(~np.isfinite(data.features))
    for row, col in bad_cells[:20]:
        violations.append(f"non-finite feature {data.column_names[col]!r} @{row}")
    if len(bad_cells) > 20:
        violations.append(f"... {len(bad_cells) - 20} more non-finite feature cells")
    for row in np.nonzero(~np.isfinite(data.responses).all(axis=1))[0]:
        violations.append(f"non-finite response @{row}")
    nonpos = np.nonzero(~(np.isfinite(data.weights) & (data.weights > 0)))[0]
    for row in nonpos:
        violations.append(f"nonpositive weight @{row}")
    if data.task == "hyp":
        if data.p_y != 1:
            violations.append(f"classification task expects 1 response column, got {data.p_y}")
        bad = np.nonzero(~np.isin(data.responses[:, 0], (-1.0, 1.0)))[0]
        for row in bad[:20]:
            violations.append(f"label not in {{-1,+1}} @{row}")
    elif data.p_y != 2:
        violations.append(f"regression task expects 2 response columns, got {data.p_y}")
    for label, arr in (("stratum", data.strata), ("varunit", data.varunits)):
        for row in np.nonzero(pd.isna(arr))[0]:
            violations.append(f"missing {label} id @{row}")
    if roles is not None:
        for idx in np.append(roles.target_idx, roles.cadre_idx):
            if not 0 <= idx < data.p:
                violations.append(f"role index {idx} out of range")
        if roles.risk_factor in roles.controls:
            violations.append("risk factor listed among controls")
    return violations


def read_survey_csv(path, response_cols, task: str) -> SurveyDataset:
    """Load a subject-per-row CSV with weight/stratum/varunit columns.

    Every column that is not a design column or a named response is a
    covariate; covariate order follows the file.
    """
    frame = pd.read_csv(path)
    required = [WEIGHT_COL, STRATUM_COL, VARUNIT_COL, *response_cols]
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise DatasetError(f"CSV is missing required columns: {missing}")
    special = set(required)
    feature_cols = [c for c in frame.columns if c not in special]
    return SurveyDataset(
        features=frame[feature_cols].to_numpy(dtype=float),
        responses=frame[list(response_cols)].to_numpy(dtype=float),
        weights=frame[WEIGHT_COL].to_numpy(dtype=float),
        strata=frame[STRATUM_COL].to_numpy(),
        varunits=frame[VARUNIT_COL].to_numpy(),
        column_names=feature_cols,
        response_names=list(response_cols),
        task=task,
    )


def write_survey_csv(data: SurveyDataset, path) -> None:
    """Inverse of :func:`read_survey_csv` for the same column conventions."""
    frame = pd.DataFrame(data.features, columns=data.column_names)
    for k, name in enumerate(data.response_names):
        frame[name] = data.responses[:, k]
    frame[WEIGHT_COL] = data.weights
    frame[STRATUM_COL] = data.strata
    frame[VARUNIT_COL] = data.varunits
    frame.to_csv(path, index=False)

"""Survey-weighted GLMs with design-based (Taylor linearization) variance.

Point estimates use the survey weights: weighted least squares for the
linear family, weighted Bernoulli likelihood via iteratively reweighted
least squares for the logistic family. Standard errors come from the
stratified-cluster sandwich estimator: score totals are aggregated per
variance unit, centered within stratum, and combined through the inverse
weighted information matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.special import expit
from scipy.stats import norm, t as student_t

from .dataset import SurveyDataset

IRLS_TOL = 1e-8
IRLS_MAX_ITER = 100
#: coefficient magnitude treated as logistic separation / divergence
IRLS_DIVERGE = 1e6


class RankDeficientError(ValueError):
    """Design matrix is rank deficient; names the offending columns."""


@dataclass(frozen=True)
class GlmSpec:
    """One GLM to fit: family, response, covariates, and cadre restriction."""

    family: str  # "linear" | "logistic"
    response_col: str
    covariate_cols: tuple[str, ...]
    cadre_filter: int | str = "all"

    def __post_init__(self):
        if self.family not in ("linear", "logistic"):
            raise ValueError(f"unknown GLM family {self.family!r}")
        object.__setattr__(self, "covariate_cols", tuple(self.covariate_cols))


@dataclass
class GlmFit:
    """Coefficients and design-based inference for one fitted GLM.

    coefficient order is intercept first, then ``covariate_cols``.
    """

    coefficients: np.ndarray
    covariance: np.ndarray
    std_errors: np.ndarray
    wald_z: np.ndarray
    p_values: np.ndarray
    coef_names: list[str]
    n_obs: int
    n_strata: int
    n_varunits: int
    converged: bool = True
    family: str = "linear"
    fitted_mean: np.ndarray = field(default=None, repr=False)

    def coef_table(self) -> pd.DataFrame:
        return pd.DataFrame({
            "coef": self.coefficients, "std_error": self.std_errors,
            "wald_z": self.wald_z, "p_value": self.p_values,
        }, index=self.coef_names)


def _design(data: SurveyDataset, spec: GlmSpec,
            hard_labels: np.ndarray | None):
    if spec.cadre_filter != "all":
        if hard_labels is None:
            raise ValueError("cadre_filter requires hard cadre labels")
        sub = data.subset(np.asarray(hard_labels) == int(spec.cadre_filter))
    else:
        sub = data
    if sub.n == 0:
        raise ValueError(f"cadre filter {spec.cadre_filter!r} selects no subjects")
    cols = [sub.col_index(c) for c in spec.covariate_cols]
    x = np.column_stack([np.ones(sub.n), sub.features[:, cols]])
    names = ["(intercept)", *spec.covariate_cols]
    if spec.response_col in sub.response_names:
        y = sub.responses[:, sub.response_names.index(spec.response_col)]
    else:
        y = sub.features[:, sub.col_index(spec.response_col)]
    return sub, x, y.astype(float), names


def _check_rank(x: np.ndarray, names: list[str]) -> None:
    rank = np.linalg.matrix_rank(x)
    if rank == x.shape[1]:
        return
    # pivoted QR: columns pivoted past the numerical rank are the culprits
    _, r, piv = scipy.linalg.qr(x, mode="economic", pivoting=True)
    tol = np.abs(r[0, 0]) * max(x.shape) * np.finfo(float).eps
    bad = sorted(names[j] for j in piv[np.sum(np.abs(np.diag(r)) > tol):])
    raise RankDeficientError(f"design matrix is rank deficient; collinear columns: {bad}")


def _fit_linear(x, y, s):
    beta = np.linalg.solve(x.T @ (s[:, None] * x), x.T @ (s * y))
    return beta, x @ beta, True


def _fit_logistic(x, y01, s):
    beta = np.zeros(x.shape[1])
    converged = False
    for _ in range(IRLS_MAX_ITER):
        p = expit(x @ beta)
        irls_w = s * p * (1.0 - p)
        info = x.T @ (irls_w[:, None] * x)
        score = x.T @ (s * (y01 - p))
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if np.max(np.abs(beta)) > IRLS_DIVERGE:
            break
        if np.max(np.abs(step)) < IRLS_TOL:
            converged = True
            break
    return beta, expit(x @ beta), converged


def fit_weighted_glm(data: SurveyDataset, spec: GlmSpec,
                     hard_labels: np.ndarray | None = None) -> GlmFit:
    """Fit one survey-weighted GLM with linearized standard errors.

    Logistic responses are recoded from {-1,+1} to {0,1} at this boundary.
    A logistic fit that fails to converge in IRLS_MAX_ITER iterations (e.g.
    separation) is returned with converged=False rather than raised.
    """
    sub, x, y, names = _design(data, spec, hard_labels)
    _check_rank(x, names)
    s = sub.weights
    if spec.family == "linear":
        beta, mean, converged = _fit_linear(x, y, s)
    else:
        y01 = np.where(y > 0, 1.0, 0.0)
        beta, mean, converged = _fit_logistic(x, y01, s)
        y = y01

    fit = GlmFit(
        coefficients=beta, covariance=np.zeros((len(beta), len(beta))),
        std_errors=np.zeros(len(beta)), wald_z=np.zeros(len(beta)),
        p_values=np.ones(len(beta)), coef_names=names, n_obs=sub.n,
        n_strata=len(pd.unique(sub.strata)),
        n_varunits=len(set(zip(sub.strata.tolist(), sub.varunits.tolist()))),
        converged=converged, family=spec.family, fitted_mean=mean,
    )
    fit.covariance = linearized_covariance(data, spec, fit, hard_labels)
    fit.std_errors = np.sqrt(np.clip(np.diag(fit.covariance), 0.0, None))
    fit.wald_z, fit.p_values = wald_pvalues(fit)
    return fit


def linearized_covariance(data: SurveyDataset, spec: GlmSpec, fit: GlmFit,
                          hard_labels: np.ndarray | None = None) -> np.ndarray:
    """Stratified-cluster sandwich covariance of the coefficients.

    Score contributions s_n * (y_n - mean_n) * x_n are totaled per variance
    unit; each stratum with n_h >= 2 units contributes
    (n_h / (n_h - 1)) * sum_i (z_hi - zbar_h)(z_hi - zbar_h)'. A lonely
    stratum (single unit) contributes its deviation from the grand mean of
    all unit totals instead of being dropped.
    """
    sub, x, y, _ = _design(data, spec, hard_labels)
    s = sub.weights
    if spec.family == "logistic":
        y = np.where(y > 0, 1.0, 0.0)
        p = fit.fitted_mean
        info = x.T @ ((s * p * (1.0 - p))[:, None] * x)
        scores = (s * (y - p))[:, None] * x
    else:
        resid = y - x @ fit.coefficients
        info = x.T @ (s[:, None] * x)
        scores = (s * resid)[:, None] * x

    frame = pd.DataFrame(scores)
    frame["_stratum"] = sub.strata
    frame["_unit"] = sub.varunits
    unit_totals = frame.groupby(["_stratum", "_unit"], sort=True).sum()
    k = scores.shape[1]
    grand_mean = unit_totals.to_numpy().mean(axis=0)

    between = np.zeros((k, k))
    for _, group in unit_totals.groupby(level="_stratum", sort=True):
        z = group.to_numpy()
        n_h = z.shape[0]
        if n_h == 1:
            dev = z[0] - grand_mean
            between += np.outer(dev, dev)
        else:
            dev = z - z.mean(axis=0)
            between += (n_h / (n_h - 1)) * dev.T @ dev

    try:
        info_inv = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        # degenerate information (e.g. logistic separation): fits are already
        # flagged converged=False, report the pseudo-inverse sandwich
        info_inv = np.linalg.pinv(info)
    cov = info_inv @ between @ info_inv
    return (cov + cov.T) / 2.0


def wald_pvalues(fit: GlmFit, df_correction: bool = False
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Two-sided Wald z statistics and p-values per coefficient.

    With ``df_correction`` the reference distribution is Student t with
    (n_varunits - n_strata) degrees of freedom, the usual survey-design df.
    A zero standard error yields p = 0 with a degenerate-variance warning.
    """
    se = fit.std_errors
    z = np.zeros_like(fit.coefficients)
    p = np.zeros_like(fit.coefficients)
    degenerate = se <= 0
    if degenerate.any():
        warnings.warn("degenerate variance: zero standard error; p reported as 0",
                      RuntimeWarning, stacklevel=2)
        coef = fit.coefficients[degenerate]
        z[degenerate] = np.where(coef == 0, 0.0, np.sign(coef) * np.inf)
        p[degenerate] = 0.0
    ok = ~degenerate
    z[ok] = fit.coefficients[ok] / se[ok]
    if df_correction:
        df = max(fit.n_varunits - fit.n_strata, 1)
        p[ok] = 2.0 * student_t.sf(np.abs(z[ok]), df)
    else:
        p[ok] = 2.0 * norm.sf(np.abs(z[ok]))
    return z, p

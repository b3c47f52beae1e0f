"""Per-risk-factor model selection: BIC grid search under an entropy cap.

For each cadre count M, every (lambda_d, lambda_w) grid point is trained
(optionally with restarts, keeping the best objective), scored by BIC, and
screened by the cadre-assignment entropy cap. The admissible model with the
smallest BIC wins; ties break toward the lexicographically smaller
(lambda_d, lambda_w) so the outcome is independent of grid order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import SurveyDataset, VariableRoles
from .model import CadreAssignment, assign
from .training import (TrainConfig, TrainResult, TrainingDiverged, data_loglik,
                       fit_scm)

#: parameters with magnitude at or below this count as zeroed-out for BIC
SPARSITY_EPS = 1e-6
#: slack when enforcing the entropy cap, absorbing float rounding only
ENTROPY_SLACK = 1e-12

DEFAULT_LAMBDA_GRID = tuple(
    (ld, lw)
    for ld in (10.0**-2, 10.0**-1.5, 10.0**-1, 10.0**-0.5, 1.0)
    for lw in (10.0**-2, 10.0**-1.5, 10.0**-1, 10.0**-0.5, 1.0)
)


@dataclass
class SelectionConfig:
    """Grid-search settings shared across risk factors."""

    m_values: tuple[int, ...] = (1, 2, 3)
    lambda_grid: tuple[tuple[float, float], ...] = DEFAULT_LAMBDA_GRID
    entropy_cap: float = 0.2
    gamma: float = 75.0
    alpha: float = 0.9
    restarts: int = 1

    def __post_init__(self):
        self.m_values = tuple(int(m) for m in self.m_values)
        self.lambda_grid = tuple((float(a), float(b)) for a, b in self.lambda_grid)
        if not self.m_values or not self.lambda_grid:
            raise ValueError("m_values and lambda_grid must be nonempty")
        if self.entropy_cap < 0:
            raise ValueError("entropy_cap must be nonnegative")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


@dataclass
class FittedScm:
    """A trained model with its diagnostics for one grid point."""

    train: TrainResult
    bic: float
    assignment: CadreAssignment
    lambda_d: float
    lambda_w: float

    @property
    def entropies(self) -> np.ndarray:
        return self.assignment.per_cadre_entropy

    @property
    def params(self):
        return self.train.params


@dataclass
class Candidate:
    """Grid-point summary kept for selection reports."""

    lambda_d: float
    lambda_w: float
    bic: float | None
    entropies: list[float] | None
    admissible: bool
    reason: str | None = None


@dataclass
class SelectedModel:
    """Outcome of the grid search for one cadre count."""

    m: int
    fitted: FittedScm | None
    bic: float | None
    admissible: bool
    rejected_reason: str | None = None
    candidates: list[Candidate] = field(default_factory=list)


def effective_param_count(fit: TrainResult) -> int:
    """Parameters with magnitude above SPARSITY_EPS; L1 zeroes don't count."""
    p = fit.params
    k = sum(int((np.abs(block) > SPARSITY_EPS).sum())
            for block in (p.centers, p.d, p.w, p.w0))
    if p.sigma2 is not None:
        k += p.sigma2.shape[0]
    return k


def bic(fit: TrainResult, data: SurveyDataset, roles: VariableRoles,
        task: str) -> float:
    """k_eff * ln N - 2 * (unpenalized survey-weighted data log-likelihood)."""
    loglik = data_loglik(fit.params, data, roles, task)
    return effective_param_count(fit) * float(np.log(data.n)) - 2.0 * loglik


def derive_seed(base_seed: int, *parts) -> int:
    """Stable per-work-item seed from a base seed and identifying values.

    Hashes the value tuple (not enumeration order), so permuting a grid or
    running factors in parallel cannot change any item's seed.
    """
    text = "|".join([str(int(base_seed))] + [repr(p) for p in parts])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def _evaluate_grid_point(data, roles, task, train_cfg: TrainConfig,
                         entropy_cap: float, restarts: int,
                         base_seed: int) -> tuple[FittedScm | None, Candidate]:
    best: TrainResult | None = None
    for r in range(restarts):
        seed = derive_seed(base_seed, train_cfg.m, train_cfg.lambda_d,
                           train_cfg.lambda_w, r)
        try:
            result = fit_scm(data, roles, train_cfg, init_seed=seed)
        except TrainingDiverged as exc:
            if restarts == 1:
                return None, Candidate(train_cfg.lambda_d, train_cfg.lambda_w,
                                       None, None, False, f"diverged: {exc}")
            continue
        if best is None or result.final_objective > best.final_objective:
            best = result
    if best is None:
        return None, Candidate(train_cfg.lambda_d, train_cfg.lambda_w,
                               None, None, False, "diverged on every restart")

    assignment = assign(data.features[:, roles.cadre_idx], best.params,
                        data.weights)
    value = bic(best, data, roles, task)
    fitted = FittedScm(train=best, bic=value, assignment=assignment,
                       lambda_d=train_cfg.lambda_d, lambda_w=train_cfg.lambda_w)
    entropies = assignment.per_cadre_entropy
    if assignment.empty_cadres:
        reason = f"empty cadre {assignment.empty_cadres[0]}"
        return fitted, Candidate(train_cfg.lambda_d, train_cfg.lambda_w, value,
                                 entropies.tolist(), False, reason)
    if np.nanmax(entropies) > entropy_cap + ENTROPY_SLACK:
        return fitted, Candidate(train_cfg.lambda_d, train_cfg.lambda_w, value,
                                 entropies.tolist(), False, "entropy cap")
    return fitted, Candidate(train_cfg.lambda_d, train_cfg.lambda_w, value,
                             entropies.tolist(), True)


def select_model(data: SurveyDataset, roles: VariableRoles,
                 cfg: SelectionConfig, train_cfg_base: TrainConfig,
                 ) -> dict[int, SelectedModel]:
    """Grid-search each cadre count; return the admissible BIC minimizer per M.

    Training failures at individual grid points are recorded as inadmissible
    candidates without aborting the rest of the grid.
    """
    task = data.task
    out: dict[int, SelectedModel] = {}
    for m in cfg.m_values:
        candidates: list[Candidate] = []
        best_fit: FittedScm | None = None
        best_key: tuple[float, float, float] | None = None
        for lambda_d, lambda_w in cfg.lambda_grid:
            train_cfg = replace(train_cfg_base, m=m, lambda_d=lambda_d,
                                lambda_w=lambda_w, gamma=cfg.gamma,
                                alpha_d=cfg.alpha, alpha_w=cfg.alpha)
            fitted, cand = _evaluate_grid_point(
                data, roles, task, train_cfg, cfg.entropy_cap, cfg.restarts,
                train_cfg_base.seed)
            candidates.append(cand)
            if not cand.admissible or fitted is None:
                continue
            key = (fitted.bic, lambda_d, lambda_w)
            if best_key is None or key < best_key:
                best_key = key
                best_fit = fitted
        if best_fit is not None:
            out[m] = SelectedModel(m=m, fitted=best_fit, bic=best_fit.bic,
                                   admissible=True, candidates=candidates)
        else:
            reasons = sorted({c.reason for c in candidates if c.reason})
            out[m] = SelectedModel(
                m=m, fitted=None, bic=None, admissible=False,
                rejected_reason="; ".join(reasons) or "no admissible grid point",
                candidates=candidates)
    return out


def best_overall(selected: dict[int, SelectedModel]) -> SelectedModel | None:
    """Admissible model with the smallest BIC across cadre counts (ties: smaller M)."""
    admissible = [s for s in selected.values() if s.admissible]
    if not admissible:
        return None
    return min(admissible, key=lambda s: (s.bic, s.m))

"""Survey-weighted training of cadre models.

Two maximization objectives, one per task:

  hyp:  -sum_n s_n * max(0, 1 - y_n f(x_n))  - elastic-net penalties on d, W
  cbp:  -sum_n s_n/2 * (y_n - f(x_n))' Sigma^-1 (y_n - f(x_n))
        - elastic-net penalties on d, W scaled by 1/|Sigma|
        - (1 + N) * log|Sigma|

with s_n the survey weight, Sigma diagonal, and |Sigma| its determinant.
Centers and intercepts are unpenalized. Both objectives are maximized by
adaptive-moment stochastic gradient ascent over minibatches; Sigma is
optimized through log sigma^2 so it stays positive.

The hinge kink and |.| at zero use subgradient 0, so coordinates that reach
zero stay there between data-driven updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import SurveyDataset, VariableRoles
from .model import ScmParams

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
#: evaluations of the full objective forming the early-stop moving average
STOP_WINDOW = 10


class TrainingDiverged(RuntimeError):
    """Objective became non-finite; carries the objective trace so far."""

    def __init__(self, message: str, trace: list[tuple[int, float]]):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    """Hyperparameters and optimizer settings for one model fit."""

    lambda_d: float = 0.0
    lambda_w: float = 0.0
    alpha_d: float = 0.9
    alpha_w: float = 0.9
    gamma: float = 75.0
    m: int = 1
    batch_size: int = 256
    max_steps: int = 10_000
    learning_rate: float = 1e-2
    seed: int = 0
    tol: float = 1e-6
    eval_every: int = 25

    def __post_init__(self):
        if self.lambda_d < 0 or self.lambda_w < 0:
            raise ValueError("regularization strengths must be nonnegative")
        if not (0 <= self.alpha_d <= 1 and 0 <= self.alpha_w <= 1):
            raise ValueError("elastic-net mixing weights must lie in [0, 1]")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.m < 1:
            raise ValueError("cadre count must be at least 1")
        for name in ("batch_size", "max_steps", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.learning_rate <= 0 or self.tol <= 0:
            raise ValueError("learning_rate and tol must be positive")


@dataclass
class TrainResult:
    params: ScmParams
    final_objective: float
    objective_trace: list[tuple[int, float]] = field(default_factory=list)
    converged: bool = False


# --- raw parameter dictionaries ----------------------------------------------
# Training operates on a dict of arrays so the optimizer can treat every
# parameter uniformly; keys follow _PARAM_KEYS order for flattening.

_PARAM_KEYS = ("centers", "d", "w", "w0", "log_sigma2")


def _raw_from_params(params: ScmParams, task: str) -> dict[str, np.ndarray]:
    raw = {
        "centers": params.centers.copy(),
        "d": params.d.copy(),
        "w": params.w.copy(),
        "w0": params.w0.copy(),
    }
    if task == "cbp":
        raw["log_sigma2"] = np.log(params.sigma2)
    return raw


def _params_from_raw(raw: dict[str, np.ndarray], gamma: float) -> ScmParams:
    sigma2 = np.exp(raw["log_sigma2"]) if "log_sigma2" in raw else None
    return ScmParams(centers=raw["centers"], d=raw["d"], w=raw["w"],
                     w0=raw["w0"], gamma=gamma, sigma2=sigma2)


def flatten_grad(grad: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenate gradient blocks in canonical key order (for diagnostics)."""
    return np.concatenate([grad[k].ravel() for k in _PARAM_KEYS if k in grad])


def _forward(raw, gamma, x_cadre, x_target):
    diff = x_cadre[:, None, :] - raw["centers"][None, :, :]  # (n, m, p_c)
    logits = -gamma * (diff**2 @ np.abs(raw["d"]))
    logits -= logits.max(axis=1, keepdims=True)
    expg = np.exp(logits)
    g = expg / expg.sum(axis=1, keepdims=True)
    expert = np.einsum("mpk,np->nmk", raw["w"], x_target) + raw["w0"][None, :, :]
    pred = np.einsum("nm,nmk->nk", g, expert)
    return diff, g, expert, pred


def _penalties(raw, cfg: TrainConfig) -> tuple[float, float]:
    d, w = raw["d"], raw["w"]
    pen_d = cfg.alpha_d * np.abs(d).sum() + (1 - cfg.alpha_d) * (d**2).sum()
    pen_w = cfg.alpha_w * np.abs(w).sum() + (1 - cfg.alpha_w) * (w**2).sum()
    return float(pen_d), float(pen_w)


def _slices(data: SurveyDataset, roles: VariableRoles):
    return data.features[:, roles.cadre_idx], data.features[:, roles.target_idx]


def data_loglik(params: ScmParams, data: SurveyDataset, roles: VariableRoles,
                task: str) -> float:
    """Unpenalized survey-weighted data term of the training objective.

    For the regression task this includes the -(1 + N) log|Sigma| term, which
    belongs to the likelihood rather than the priors.
    """
    raw = _raw_from_params(params, task)
    x_cadre, x_target = _slices(data, roles)
    _, _, _, pred = _forward(raw, params.gamma, x_cadre, x_target)
    s = data.weights
    if task == "hyp":
        margins = 1.0 - data.responses[:, 0] * pred[:, 0]
        return float(-(s * np.maximum(margins, 0.0)).sum())
    resid = data.responses - pred
    sigma2 = params.sigma2
    fit = -0.5 * float((s * (resid**2 / sigma2[None, :]).sum(axis=1)).sum())
    return fit - (1 + data.n) * float(np.log(sigma2).sum())


def objective_hyp(params: ScmParams, data: SurveyDataset, roles: VariableRoles,
                  cfg: TrainConfig) -> float:
    """Classification objective: weighted hinge fit minus elastic-net penalties."""
    raw = _raw_from_params(params, "hyp")
    _check_finite_raw(raw)
    pen_d, pen_w = _penalties(raw, cfg)
    return (data_loglik(params, data, roles, "hyp")
            - 0.5 * cfg.lambda_d * pen_d - 0.5 * cfg.lambda_w * pen_w)


def objective_cbp(params: ScmParams, data: SurveyDataset, roles: VariableRoles,
                  cfg: TrainConfig) -> float:
    """Regression objective: weighted Gaussian fit, |Sigma|-scaled penalties."""
    if params.sigma2 is None:
        raise ValueError("regression objective requires sigma2")
    raw = _raw_from_params(params, "cbp")
    _check_finite_raw(raw)
    det = float(np.prod(params.sigma2))
    pen_d, pen_w = _penalties(raw, cfg)
    return (data_loglik(params, data, roles, "cbp")
            - 0.5 * cfg.lambda_d * pen_d / det - 0.5 * cfg.lambda_w * pen_w / det)


def _check_finite_raw(raw: dict[str, np.ndarray]) -> None:
    for key, arr in raw.items():
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite model parameter in {key!r}")


def _gradient_arrays(raw, cfg: TrainConfig, task: str, x_cadre, x_target, y, s,
                     n_total: int, data_scale: float = 1.0) -> dict[str, np.ndarray]:
    """Gradient of the (maximized) objective w.r.t. every raw parameter block.

    data_scale rescales the data-fit contribution (n_total / batch size) so a
    minibatch gradient is an unbiased estimate of the full gradient; penalty
    and log-determinant terms are global and enter unscaled.
    """
    gamma = cfg.gamma
    diff, g, expert, pred = _forward(raw, gamma, x_cadre, x_target)

    if task == "hyp":
        margins = 1.0 - y[:, 0] * pred[:, 0]
        dpred = (s * y[:, 0] * (margins > 0))[:, None]  # (n, 1)
    else:
        sigma2 = np.exp(raw["log_sigma2"])
        resid = y - pred
        dpred = s[:, None] * resid / sigma2[None, :]

    dpred = dpred * data_scale
    grad_w = np.einsum("nm,np,nk->mpk", g, x_target, dpred)
    grad_w0 = np.einsum("nm,nk->mk", g, dpred)
    # gating: dL/du_m = g_m * dpred . (expert_m - pred), u = -gamma ||.||_d^2
    h = g * np.einsum("nk,nmk->nm", dpred, expert - pred[:, None, :])
    grad_centers = 2.0 * gamma * np.abs(raw["d"])[None, :] * np.einsum(
        "nm,nmp->mp", h, diff)
    grad_d = -gamma * np.sign(raw["d"]) * np.einsum("nm,nmp->p", h, diff**2)

    pen_scale = 1.0
    if task == "cbp":
        pen_scale = 1.0 / float(np.prod(np.exp(raw["log_sigma2"])))
    grad_d += -0.5 * cfg.lambda_d * pen_scale * (
        cfg.alpha_d * np.sign(raw["d"]) + 2 * (1 - cfg.alpha_d) * raw["d"])
    grad_w += -0.5 * cfg.lambda_w * pen_scale * (
        cfg.alpha_w * np.sign(raw["w"]) + 2 * (1 - cfg.alpha_w) * raw["w"])

    grad = {"centers": grad_centers, "d": grad_d, "w": grad_w, "w0": grad_w0}
    if task == "cbp":
        pen_d, pen_w = _penalties(raw, cfg)
        fit_part = 0.5 * (s[:, None] * resid**2 / sigma2[None, :]).sum(axis=0)
        common = 0.5 * (cfg.lambda_d * pen_d + cfg.lambda_w * pen_w) * pen_scale
        grad["log_sigma2"] = data_scale * fit_part + common - (1 + n_total)
    return grad


def objective_gradient(params: ScmParams, data: SurveyDataset,
                       roles: VariableRoles, cfg: TrainConfig,
                       task: str) -> dict[str, np.ndarray]:
    """Exact full-data gradient of the matching objective.

    Returns arrays keyed by parameter block: centers, d, w, w0, and (for the
    regression task) log_sigma2. Nondifferentiable points (hinge margin,
    |.| at zero) take subgradient 0.
    """
    raw = _raw_from_params(params, task)
    _check_finite_raw(raw)
    x_cadre, x_target = _slices(data, roles)
    if task == "hyp":
        y = data.responses[:, :1]
    else:
        y = data.responses
    return _gradient_arrays(raw, cfg, task, x_cadre, x_target, y,
                            data.weights, data.n)


def seed_centers(x_cadre: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    """Pick m subject rows as initial cadre centers, k-means++ style.

    First center uniform at random; each later center is sampled with
    probability proportional to its squared distance from the chosen set, so
    initial cadres start well spread. Falls back to uniform sampling when all
    remaining rows coincide with a chosen center.
    """
    n = x_cadre.shape[0]
    if m > n:
        raise ValueError(f"cannot seed {m} centers from {n} subjects")
    first = int(rng.integers(n))
    centers = [x_cadre[first]]
    d2 = ((x_cadre - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, m):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers.append(x_cadre[idx])
        d2 = np.minimum(d2, ((x_cadre - centers[-1]) ** 2).sum(axis=1))
    return np.array(centers)


def initial_params(data: SurveyDataset, roles: VariableRoles, cfg: TrainConfig,
                   task: str, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Spread centers over subjects, Euclidean seminorm, small random experts."""
    x_cadre = data.features[:, roles.cadre_idx]
    p_y = 1 if task == "hyp" else data.p_y
    raw = {
        "centers": seed_centers(x_cadre, cfg.m, rng),
        "d": np.ones(roles.p_cadre),
        "w": rng.normal(0.0, 0.1, size=(cfg.m, roles.p_target, p_y)),
        "w0": rng.normal(0.0, 0.1, size=(cfg.m, p_y)),
    }
    if task == "cbp":
        raw["log_sigma2"] = np.zeros(p_y)
    return raw


def fit_scm(data: SurveyDataset, roles: VariableRoles, cfg: TrainConfig,
            init_seed: int | None = None) -> TrainResult:
    """Maximize the task objective by minibatch adaptive gradient ascent.

    Minibatches are drawn without replacement within each epoch. Training
    stops at max_steps or once the moving average of the last STOP_WINDOW
    full-objective evaluations changes by less than ``tol`` (relative).
    Deterministic for a fixed seed.
    """
    task = data.task
    seed = cfg.seed if init_seed is None else init_seed
    rng = np.random.default_rng(seed)
    raw = initial_params(data, roles, cfg, task, rng)

    x_cadre, x_target = _slices(data, roles)
    y = data.responses[:, :1] if task == "hyp" else data.responses
    s = data.weights
    n = data.n
    batch = min(cfg.batch_size, n)

    def full_objective() -> float:
        params = _params_from_raw(raw, cfg.gamma)
        if task == "hyp":
            return objective_hyp(params, data, roles, cfg)
        return objective_cbp(params, data, roles, cfg)

    mom = {k: np.zeros_like(v) for k, v in raw.items()}
    vel = {k: np.zeros_like(v) for k, v in raw.items()}
    trace: list[tuple[int, float]] = [(0, full_objective())]
    evals = [trace[0][1]]
    if not np.isfinite(evals[0]):
        raise TrainingDiverged("objective non-finite at initialization", trace)

    converged = False
    order = rng.permutation(n)
    cursor = 0
    for step in range(1, cfg.max_steps + 1):
        if cursor >= n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + batch]
        cursor += batch
        try:
            with np.errstate(divide="raise", invalid="raise", under="ignore"):
                grad = _gradient_arrays(raw, cfg, task, x_cadre[idx],
                                        x_target[idx], y[idx], s[idx], n,
                                        data_scale=n / len(idx))
        except (ZeroDivisionError, FloatingPointError) as exc:
            raise TrainingDiverged(f"gradient failed at step {step}: {exc}",
                                   trace) from exc
        if any(not np.all(np.isfinite(g)) for g in grad.values()):
            raise TrainingDiverged(f"non-finite gradient at step {step}", trace)
        for key in raw:
            g = grad[key]
            mom[key] = ADAM_BETA1 * mom[key] + (1 - ADAM_BETA1) * g
            vel[key] = ADAM_BETA2 * vel[key] + (1 - ADAM_BETA2) * g**2
            m_hat = mom[key] / (1 - ADAM_BETA1**step)
            v_hat = vel[key] / (1 - ADAM_BETA2**step)
            raw[key] = raw[key] + cfg.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            value = full_objective()
            trace.append((step, value))
            if not np.isfinite(value):
                raise TrainingDiverged(f"objective non-finite at step {step}", trace)
            evals.append(value)
            if len(evals) > STOP_WINDOW:
                ma_now = float(np.mean(evals[-STOP_WINDOW:]))
                ma_prev = float(np.mean(evals[-STOP_WINDOW - 1:-1]))
                if abs(ma_now - ma_prev) < cfg.tol * max(1.0, abs(ma_prev)):
                    converged = True
                    break

    return TrainResult(params=_params_from_raw(raw, cfg.gamma),
                       final_objective=trace[-1][1], objective_trace=trace,
                       converged=converged)

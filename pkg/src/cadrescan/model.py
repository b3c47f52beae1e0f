"""Supervised cadre model: parameters, gating, prediction, and hardness.

A model with M cadres combines a gating function (softmax over sharpened
seminorm distances to M cadre centers) with M linear experts. The gating
probability of cadre m for a subject with cadre-assignment covariates x is

    g_m(x) = softmax_m( -gamma * ||x - c^m||_d^2 ),

where ||z||_d^2 = sum_p |d_p| z_p^2, so d acts as a nonnegative-by-magnitude
feature-selection weight. The model's prediction is the gating-weighted sum
of expert outputs W_m^T x_t + w0_m.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import VariableRoles


@dataclass
class ScmParams:
    """Trained cadre-model parameters.

    centers: (m, p_cadre) cadre centers in cadre-covariate space.
    d: (p_cadre,) seminorm weights; only |d| enters distances.
    w: (m, p_target, p_y) expert regression weights.
    w0: (m, p_y) expert intercepts.
    sigma2: (p_y,) diagonal response variances, regression task only.
    gamma: positive cadre-sharpness hyperparameter.
    """

    centers: np.ndarray
    d: np.ndarray
    w: np.ndarray
    w0: np.ndarray
    gamma: float
    sigma2: np.ndarray | None = None

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        self.d = np.asarray(self.d, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        self.w0 = np.atleast_2d(np.asarray(self.w0, dtype=float))
        if self.sigma2 is not None:
            self.sigma2 = np.asarray(self.sigma2, dtype=float)
            if np.any(self.sigma2 <= 0):
                raise ValueError("sigma2 entries must be strictly positive")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        m, p_c = self.centers.shape
        if self.d.shape != (p_c,):
            raise ValueError("d length does not match centers")
        if self.w.ndim != 3 or self.w.shape[0] != m:
            raise ValueError("w must have shape (m, p_target, p_y)")
        if self.w0.shape != (m, self.w.shape[2]):
            raise ValueError("w0 shape does not match w")

    @property
    def m(self) -> int:
        return self.centers.shape[0]

    @property
    def p_cadre(self) -> int:
        return self.centers.shape[1]

    @property
    def p_target(self) -> int:
        return self.w.shape[1]

    @property
    def p_y(self) -> int:
        return self.w.shape[2]


@dataclass
class CadreAssignment:
    """Soft memberships, hardened labels, and per-cadre entropies (bits).

    hard_labels are 1-based cadre ids. per_cadre_entropy[m-1] is NaN for a
    cadre that received no subjects.
    """

    probabilities: np.ndarray
    hard_labels: np.ndarray
    per_cadre_entropy: np.ndarray

    @property
    def empty_cadres(self) -> list[int]:
        return [m + 1 for m in range(self.per_cadre_entropy.shape[0])
                if np.isnan(self.per_cadre_entropy[m])]


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        flat = np.argwhere(~np.isfinite(np.atleast_2d(x)))
        row, col = flat[0]
        raise ValueError(f"non-finite input at row {row}, coordinate {col}")


def seminorm_sq(z: np.ndarray, d: np.ndarray) -> np.ndarray:
    """||z||_d^2 = sum_p |d_p| z_p^2, rowwise for 2-d input."""
    return np.asarray(z) ** 2 @ np.abs(d)


def memberships(x_cadre: np.ndarray, params: ScmParams) -> np.ndarray:
    """Gating probabilities for each row of x_cadre; shape (n, m).

    Softmax is computed with max-subtraction so large gamma (e.g. 75) cannot
    overflow.
    """
    x = np.atleast_2d(np.asarray(x_cadre, dtype=float))
    _check_finite(x)
    diff = x[:, None, :] - params.centers[None, :, :]  # (n, m, p_c)
    logits = -params.gamma * (diff**2 @ np.abs(params.d))
    logits -= logits.max(axis=1, keepdims=True)
    expl = np.exp(logits)
    return expl / expl.sum(axis=1, keepdims=True)


def membership(x_cadre: np.ndarray, params: ScmParams) -> np.ndarray:
    """Gating probabilities of one subject; shape (m,)."""
    return memberships(np.asarray(x_cadre)[None, :], params)[0]


def predict_matrix(features: np.ndarray, roles: VariableRoles, params: ScmParams) -> np.ndarray:
    """Cadre-weighted expert predictions for each row; shape (n, p_y)."""
    x = np.atleast_2d(np.asarray(features, dtype=float))
    g = memberships(x[:, roles.cadre_idx], params)
    expert = np.einsum("mpk,np->nmk", params.w, x[:, roles.target_idx]) + params.w0[None, :, :]
    return np.einsum("nm,nmk->nk", g, expert)


def predict(x: np.ndarray, roles: VariableRoles, params: ScmParams) -> np.ndarray:
    """Prediction for a single subject; shape (p_y,).

    For the classification task p_y=1 and the sign of the score is the
    predicted class.
    """
    return predict_matrix(np.asarray(x)[None, :], roles, params)[0]


def harden(probabilities: np.ndarray) -> np.ndarray:
    """Most-likely cadre per row, 1-based; ties go to the lowest index."""
    probs = np.atleast_2d(np.asarray(probabilities))
    return np.argmax(probs, axis=1) + 1


def cadre_conditional_entropy(
    probabilities: np.ndarray,
    hard_labels: np.ndarray,
    weights: np.ndarray,
    m: int,
) -> float:
    """Assignment-confidence entropy (bits) of the subjects hardened into cadre m.

    The conditional cadre distribution is the survey-weighted mean of the
    membership rows over the cadre's members, renormalized to sum to one;
    0 * log2(0) is taken as 0. Ranges from 0 (every member one-hot) to
    log2(M) (members uniformly torn between all cadres).
    """
    probs = np.atleast_2d(np.asarray(probabilities, dtype=float))
    labels = np.asarray(hard_labels)
    weights = np.asarray(weights, dtype=float)
    members = labels == m
    if not members.any():
        raise ValueError(f"empty cadre {m}")
    w = weights[members]
    p = w @ probs[members] / w.sum()
    p = p / p.sum()
    nz = p > 0
    return float(-(p[nz] * np.log2(p[nz])).sum() + 0.0)  # +0.0 avoids -0.0


def assign(
    x_cadre: np.ndarray, params: ScmParams, weights: np.ndarray
) -> CadreAssignment:
    """Full soft/hard assignment with per-cadre entropies; NaN for empty cadres."""
    probs = memberships(x_cadre, params)
    labels = harden(probs)
    entropies = np.full(params.m, np.nan)
    for m in range(1, params.m + 1):
        if np.any(labels == m):
            entropies[m - 1] = cadre_conditional_entropy(probs, labels, weights, m)
    return CadreAssignment(probabilities=probs, hard_labels=labels,
                           per_cadre_entropy=entropies)


# --- JSON serialization -----------------------------------------------------
#
# Schema (all matrices as row-major nested lists):
# {
#   "m": int, "p_cadre": int, "p_target": int, "p_response": int,
#   "gamma": float,
#   "centers": [[float]*p_cadre]*m,
#   "d": [float]*p_cadre,
#   "w": [[[float]*p_response]*p_target]*m,
#   "w0": [[float]*p_response]*m,
#   "sigma2": [float]*p_response | null
# }


def params_to_dict(params: ScmParams) -> dict:
    return {
        "m": params.m,
        "p_cadre": params.p_cadre,
        "p_target": params.p_target,
        "p_response": params.p_y,
        "gamma": params.gamma,
        "centers": params.centers.tolist(),
        "d": params.d.tolist(),
        "w": params.w.tolist(),
        "w0": params.w0.tolist(),
        "sigma2": None if params.sigma2 is None else params.sigma2.tolist(),
    }


def params_from_dict(payload: dict) -> ScmParams:
    params = ScmParams(
        centers=np.array(payload["centers"], dtype=float),
        d=np.array(payload["d"], dtype=float),
        w=np.array(payload["w"], dtype=float),
        w0=np.array(payload["w0"], dtype=float),
        gamma=float(payload["gamma"]),
        sigma2=None if payload.get("sigma2") is None
        else np.array(payload["sigma2"], dtype=float),
    )
    declared = (payload["m"], payload["p_cadre"], payload["p_target"], payload["p_response"])
    actual = (params.m, params.p_cadre, params.p_target, params.p_y)
    if tuple(declared) != actual:
        raise ValueError(f"declared dimensions {declared} do not match matrices {actual}")
    return params


def params_to_json(params: ScmParams) -> str:
    return json.dumps(params_to_dict(params), indent=2)


def params_from_json(text: str) -> ScmParams:
    return params_from_dict(json.loads(text))

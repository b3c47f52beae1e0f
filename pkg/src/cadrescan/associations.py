"""False-discovery-rate control and assembly of the association table.

Every (risk factor, response, cadre count, cadre) GLM contributes one raw
p-value. The whole family is adjusted together with the Benjamini-Hochberg
step-up procedure (optionally per response), and a record is declared
significant only when its adjusted p-value clears the threshold AND its
coefficient is positive. Records significant only under subpopulation
modeling (no significant population-level counterpart) are flagged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

VALID_RESPONSES = ("sbp", "dbp", "hyp")


@dataclass(frozen=True)
class GlmOutcome:
    """Raw result of one per-cadre GLM, before multiplicity correction."""

    risk_factor: str
    response: str  # sbp | dbp | hyp
    m: int
    cadre: int
    coefficient: float
    std_error: float
    p_value: float


@dataclass
class AssociationRecord:
    risk_factor: str
    response: str
    m: int
    cadre: int
    coefficient: float
    std_error: float
    p_raw: float
    p_adjusted: float
    significant: bool
    positive: bool
    subpopulation_only: bool = False


def bh_adjust(p_values) -> np.ndarray:
    """Benjamini-Hochberg adjusted p-values, in the input order.

    Sorted ascending, p_(i) * m / i is made monotone by a running minimum
    from the largest rank and capped at 1.
    """
    p = np.asarray(p_values, dtype=float)
    if p.ndim != 1:
        raise ValueError("p_values must be one-dimensional")
    if p.size == 0:
        return p.copy()
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    adjusted = np.minimum.accumulate(scaled[::-1])[::-1]
    adjusted = np.minimum(adjusted, 1.0)
    out = np.empty(m)
    out[order] = adjusted
    return out


def build_association_table(outcomes: Sequence[GlmOutcome], alpha: float,
                            family: str = "pooled") -> list[AssociationRecord]:
    """Adjust the pooled p-value family and assemble the final records.

    family "pooled" corrects across every outcome at once; "per-response"
    corrects within each response variable separately.
    """
    if family not in ("pooled", "per-response"):
        raise ValueError(f"unknown correction family {family!r}")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    keys = [(o.risk_factor, o.response, o.m, o.cadre) for o in outcomes]
    if len(set(keys)) != len(keys):
        seen, dup = set(), None
        for key in keys:
            if key in seen:
                dup = key
                break
            seen.add(key)
        raise ValueError(f"duplicate association key {dup}")

    raw = np.array([o.p_value for o in outcomes], dtype=float)
    adjusted = np.empty_like(raw)
    if family == "pooled" or not len(outcomes):
        adjusted = bh_adjust(raw)
    else:
        for response in {o.response for o in outcomes}:
            idx = [i for i, o in enumerate(outcomes) if o.response == response]
            adjusted[idx] = bh_adjust(raw[idx])

    records = [
        AssociationRecord(
            risk_factor=o.risk_factor, response=o.response, m=o.m,
            cadre=o.cadre, coefficient=o.coefficient, std_error=o.std_error,
            p_raw=o.p_value, p_adjusted=float(adj),
            significant=bool(adj <= alpha and o.coefficient > 0),
            positive=bool(o.coefficient > 0),
        )
        for o, adj in zip(outcomes, adjusted)
    ]
    population_hits = {(r.risk_factor, r.response)
                       for r in records if r.significant and r.m == 1}
    for r in records:
        r.subpopulation_only = (r.significant and r.m >= 2
                                and (r.risk_factor, r.response) not in population_hits)
    return records


def association_frame(records: Iterable[AssociationRecord]) -> pd.DataFrame:
    """Association records as a DataFrame in a stable, deterministic order."""
    rows = [vars(r).copy() for r in records]
    frame = pd.DataFrame(rows, columns=[
        "risk_factor", "response", "m", "cadre", "coefficient", "std_error",
        "p_raw", "p_adjusted", "significant", "positive", "subpopulation_only",
    ])
    return frame.sort_values(
        ["risk_factor", "response", "m", "cadre"]).reset_index(drop=True)

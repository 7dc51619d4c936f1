"""Coverage/size metrics and per-run evaluation reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "EF_FAILURE",
    "EvaluationReport",
    "avesize",
    "coverage_per_predicate",
    "covgap",
    "efficiency_rate",
    "evaluate_predictions",
]

EF_FAILURE = "failure"


def coverage_per_predicate(predicates, answers, prediction_sets) -> dict[int, float]:
    """Empirical coverage per predicate: fraction of test answers inside their set."""
    hits: dict[int, int] = {}
    totals: dict[int, int] = {}
    for r, answer, members in zip(predicates, answers, prediction_sets):
        r = int(r)
        totals[r] = totals.get(r, 0) + 1
        if answer in members:
            hits[r] = hits.get(r, 0) + 1
    return {r: hits.get(r, 0) / totals[r] for r in sorted(totals)}


def covgap(coverage: dict[int, float], epsilon: float) -> float:
    """Mean absolute deviation of per-predicate coverage from the 1-eps target."""
    if not coverage:
        raise ValueError("empty coverage map")
    target = 1.0 - epsilon
    return float(np.mean([abs(c - target) for c in coverage.values()]))


def avesize(prediction_sets, predicates=None, macro: bool = False) -> float:
    """Mean prediction-set size over test pairs (or macro-averaged over predicates)."""
    sizes = np.array([len(m) for m in prediction_sets], dtype=np.float64)
    if sizes.size == 0:
        raise ValueError("no prediction sets")
    if not macro:
        return float(sizes.mean())
    predicates = np.asarray(predicates, dtype=np.int64)
    return float(np.mean([sizes[predicates == r].mean() for r in np.unique(predicates)]))


def efficiency_rate(covgap_value: float, avesize_value: float,
                    covgap_ref: float, avesize_ref: float):
    """Additional entities spent per 0.01 of coverage-gap reduction vs the reference.

    Returns the sentinel ``"failure"`` when the gap is not reduced or the
    average size is unchanged.
    """
    gap_reduction = covgap_ref - covgap_value
    if gap_reduction <= 0 or avesize_value == avesize_ref:
        return EF_FAILURE
    return float((avesize_value - avesize_ref) / gap_reduction * 0.01)


@dataclass
class EvaluationReport:
    method: str
    epsilon: float
    seed: int
    coverage: dict[int, float]
    covgap: float
    avesize: float
    ef: float | str | None = None
    csr: float | None = None
    sigma_bar: float | None = None
    bound_checks: dict[int, bool] = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "method": self.method,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "covgap": self.covgap,
            "avesize": self.avesize,
            "ef": self.ef if self.ef is not None else "",
            "csr": "" if self.csr is None else self.csr,
            "sigma_bar": "" if self.sigma_bar is None else self.sigma_bar,
        }


def evaluate_predictions(method: str, epsilon: float, seed: int,
                         predicates, answers, prediction_sets,
                         macro_avesize: bool = False) -> EvaluationReport:
    coverage = coverage_per_predicate(predicates, answers, prediction_sets)
    return EvaluationReport(
        method=method,
        epsilon=epsilon,
        seed=seed,
        coverage=coverage,
        covgap=covgap(coverage, epsilon),
        avesize=avesize(prediction_sets, predicates, macro=macro_avesize),
    )


def aggregate_rows(reports: list[EvaluationReport]) -> list[dict]:
    """Mean +/- std across seeds per (method, epsilon); EF reported as mean only."""
    groups: dict[tuple[str, float], list[EvaluationReport]] = {}
    for rep in reports:
        groups.setdefault((rep.method, rep.epsilon), []).append(rep)
    rows = []
    for (method, epsilon), group in groups.items():
        gaps = np.array([r.covgap for r in group])
        sizes = np.array([r.avesize for r in group])
        efs = [r.ef for r in group if isinstance(r.ef, float)]
        rows.append({
            "method": method,
            "epsilon": epsilon,
            "n_seeds": len(group),
            "covgap_mean": float(gaps.mean()),
            "covgap_std": float(gaps.std()),
            "avesize_mean": float(sizes.mean()),
            "avesize_std": float(sizes.std()),
            "ef_mean": float(np.mean(efs)) if efs else EF_FAILURE,
        })
    return rows


def format_table(rows: list[dict]) -> str:
    header = f"{'method':<10} {'eps':>5} {'CovGap':>16} {'AveSize':>18} {'EF':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        ef = row["ef_mean"]
        ef_text = f"{ef:10.2f}" if isinstance(ef, float) else f"{ef:>10}"
        lines.append(
            f"{row['method']:<10} {row['epsilon']:>5.2f} "
            f"{row['covgap_mean']:8.3f}±{row['covgap_std']:<7.3f} "
            f"{row['avesize_mean']:9.2f}±{row['avesize_std']:<8.2f} {ef_text}"
        )
    return "\n".join(lines)
